use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// The graph node this parameter was bound to.
    pub fn at(self, bound: &[Var]) -> Var {
        bound[self.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.requires_grad(true),
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Place every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.input(&e.tensor)).collect()
    }

    /// Place every parameter on the graph as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| g.constant(&e.tensor)).collect()
    }

    /// Gradients of the bound leaves, one buffer per parameter (zeros where
    /// the loss did not reach).
    pub fn collect_grads(&self, g: &Graph, bound: &[Var]) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(bound)
            .map(|(e, v)| {
                g.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; e.tensor.numel()])
            })
            .collect()
    }

    pub fn accumulate(&mut self, grads: &[Vec<f64>]) {
        for (e, g) in self.entries.iter_mut().zip(grads) {
            e.tensor.accumulate_grad(g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Multiply every stored gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            if let Some(g) = e.tensor.grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
                e.tensor.zero_grad();
                e.tensor.accumulate_grad(&scaled);
            }
        }
    }
}

/// Sum per-sample gradient sets in order.
pub fn sum_grads(sets: Vec<Vec<Vec<f64>>>) -> Option<Vec<Vec<f64>>> {
    let mut iter = sets.into_iter();
    let mut total = iter.next()?;
    for set in iter {
        for (acc, g) in total.iter_mut().zip(set) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Some(total)
}

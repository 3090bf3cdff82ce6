use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

/// Per-patch perceptron encoder and decoder:
/// `edge^3 -> 2 n_z -> n_z` and `n_z -> 2 n_z -> edge^3`.
#[derive(Clone, Debug)]
pub struct CodecParams {
    pub store: ParamStore,
    pub volume: usize,
    pub n_z: usize,
    enc: [ParamId; 4],
    dec: [ParamId; 4],
}

/// Bound parameter handles for one graph.
pub struct BoundCodec<'a> {
    params: &'a CodecParams,
    vars: Vec<Var>,
}

fn layer(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut crate::seed::Rng) -> [ParamId; 2] {
    let std = (1.0 / fan_in as f64).sqrt();
    [
        store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), true),
        store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), false),
    ]
}

impl CodecParams {
    pub fn new(volume: usize, n_z: usize, seed_value: u64) -> Result<Self> {
        if volume == 0 || n_z == 0 {
            return Err(Error::invalid("codec needs a positive patch volume and latent width"));
        }
        let mut rng = seed::rng(seed_value, "codec-init", 0);
        let mut store = ParamStore::new();
        let hidden = 2 * n_z;
        let [e1w, e1b] = layer(&mut store, "enc.l1", volume, hidden, &mut rng);
        let [e2w, e2b] = layer(&mut store, "enc.l2", hidden, n_z, &mut rng);
        let [d1w, d1b] = layer(&mut store, "dec.l1", n_z, hidden, &mut rng);
        let [d2w, d2b] = layer(&mut store, "dec.l2", hidden, volume, &mut rng);
        Ok(Self {
            store,
            volume,
            n_z,
            enc: [e1w, e1b, e2w, e2b],
            dec: [d1w, d1b, d2w, d2b],
        })
    }

    /// Zero the encoder's output layer.
    pub fn zero_encoder_output(&mut self) {
        for id in [self.enc[2], self.enc[3]] {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph) -> BoundCodec<'a> {
        BoundCodec {
            params: self,
            vars: self.store.bind(g),
        }
    }

    /// Wrap variables already bound in store order.
    pub fn with_vars(&self, vars: Vec<Var>) -> BoundCodec<'_> {
        BoundCodec { params: self, vars }
    }

    pub fn bind_frozen<'a>(&'a self, g: &mut Graph) -> BoundCodec<'a> {
        BoundCodec {
            params: self,
            vars: self.store.bind_frozen(g),
        }
    }

    /// Encode patch rows (already scaled to `[-1, 1]`) without a persistent graph.
    pub fn encode_rows(&self, rows: &[f64], count: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let x = g.constant_from(&[count, self.volume], rows.to_vec())?;
        let z = b.encode(&mut g, x)?;
        Ok(g.value(z).to_vec())
    }

    pub fn decode_rows(&self, latents: &[f64], count: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let z = g.constant_from(&[count, self.n_z], latents.to_vec())?;
        let y = b.decode(&mut g, z)?;
        Ok(g.value(y).to_vec())
    }
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

impl BoundCodec<'_> {
    fn v(&self, id: ParamId) -> Var {
        id.at(&self.vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `[B, edge^3] -> [B, n_z]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.params.enc.map(|id| self.v(id));
        let h = dense(g, x, w1, b1)?;
        let h = g.act(h);
        dense(g, h, w2, b2)
    }

    /// `[B, n_z] -> [B, edge^3]`.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.params.dec.map(|id| self.v(id));
        let h = dense(g, z, w1, b1)?;
        let h = g.act(h);
        dense(g, h, w2, b2)
    }
}

/// Scalar pieces of the codec objective.
#[derive(Clone, Copy, Debug)]
pub struct VqTerms {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
    /// Encoder output and the straight-through decoder input.
    pub z: Var,
    pub z_st: Var,
}

fn mean_sq(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `z + sg[z_q - z]`: the value of `z_q` with the gradient routed to `z`.
pub fn straight_through(g: &mut Graph, z: Var, zq: Var) -> Result<Var> {
    let shift = g.sub(zq, z)?;
    let shift = g.stop_gradient(shift);
    g.add(z, shift)
}

/// `recon + ‖sg[z] - z_q‖² + β‖z - sg[z_q]‖²`, each term a mean over elements.
///
/// `x` holds scaled patch rows and `codebook` is a `[K, n_z]` variable. The
/// decoder sees `z + sg[z_q - z]`, so its input gradient passes straight to
/// the encoder while codebook rows only learn from the middle term.
pub fn vqvae_loss(
    g: &mut Graph,
    codec: &BoundCodec<'_>,
    codebook: Var,
    x: Var,
    beta: f64,
) -> Result<(VqTerms, Vec<usize>)> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!("commitment weight must be >= 0, got {beta}")));
    }
    let z = codec.encode(g, x)?;
    let [rows, n_z] = [g.shape(z)[0], g.shape(z)[1]];
    let [k, cw] = [g.shape(codebook)[0], g.shape(codebook)[1]];
    if cw != n_z {
        return Err(Error::shape("vqvae_loss", format!("codebook width {cw} vs latent width {n_z}")));
    }
    let zv = g.value(z).to_vec();
    let cv = g.value(codebook).to_vec();
    let book = super::Codebook::new(k, n_z, cv)?;
    let idx: Vec<usize> = (0..rows).map(|r| book.quantize(&zv[r * n_z..(r + 1) * n_z]).0).collect();
    let zq = g.embedding(codebook, &idx)?;
    let z_sg = g.stop_gradient(z);
    let zq_sg = g.stop_gradient(zq);
    let cb_term = mean_sq(g, z_sg, zq)?;
    let commit_raw = mean_sq(g, z, zq_sg)?;
    let commit = g.scale(commit_raw, beta);
    let z_st = straight_through(g, z, zq)?;
    let y = codec.decode(g, z_st)?;
    let recon = mean_sq(g, y, x)?;
    let s = g.add(recon, cb_term)?;
    let total = g.add(s, commit)?;
    Ok((
        VqTerms {
            total,
            recon,
            codebook: cb_term,
            commit,
            z,
            z_st,
        },
        idx,
    ))
}

use std::path::Path;

use super::config::{ConditionMode, DenoiserConfig};
use crate::autodiff::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

pub const DENOISER_CKPT: &str = "denoiser.ckpt";
pub const DENOISER_SIDECAR: &str = "denoiser.cfg";

const EMBED_STD: f64 = 0.3;

/// One forward query: a (possibly masked) token map at step `t`.
#[derive(Clone, Copy, Debug)]
pub struct NetInput<'a> {
    pub tokens: &'a [u32],
    pub t: usize,
    /// `None` selects the empty label.
    pub label: Option<u32>,
    /// Condition tokens for cross-attention; empty means no condition.
    pub cond: &'a [u32],
}

impl<'a> NetInput<'a> {
    pub fn new(tokens: &'a [u32], t: usize) -> Self {
        Self {
            tokens,
            t,
            label: None,
            cond: &[],
        }
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn with_cond(mut self, cond: &'a [u32]) -> Self {
        self.cond = cond;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    l1: Dense,
    l2: Dense,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ada1: Dense,
    attn: Attn,
    cross: Option<Attn>,
    ada2: Dense,
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct Mfm {
    ada_h: Dense,
    sa_h: Attn,
    ada_l: Dense,
    sa_l: Attn,
    f_l: Mlp,
    f_h: Mlp,
    ada_m: Dense,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    tok: ParamId,
    pos: [ParamId; 3],
    label: ParamId,
    cond: Option<ParamId>,
    blocks: Vec<Block>,
    mfm: Vec<Mfm>,
    last: Block,
    head: Dense,
}

/// The denoising transformer: embeddings, ordinary blocks, MFM layers, a
/// final block and a projection to `K` log-probabilities per position.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: seed::Rng,
    c: usize,
    zero_out: bool,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = if std == 0.0 {
            Tensor::zeros(&[rows, cols])
        } else {
            Tensor::randn(&[rows, cols], std, &mut self.rng)
        };
        self.store.add(name, t, true)
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, out_layer: bool) -> Dense {
        let std = if out_layer && self.zero_out { 0.0 } else { (1.0 / fan_in as f64).sqrt() };
        Dense {
            w: self.matrix(format!("{name}.w"), fan_in, fan_out, std),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), false),
        }
    }

    /// Modulation projection, zero at init.
    fn ada(&mut self, name: &str) -> Dense {
        let c = self.c;
        Dense {
            w: self.matrix(format!("{name}.w"), c, 2 * c, 0.0),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[1, 2 * c]), false),
        }
    }

    fn attn(&mut self, name: &str) -> Attn {
        let c = self.c;
        let std = (1.0 / c as f64).sqrt();
        let o_std = if self.zero_out { 0.0 } else { std };
        Attn {
            q: self.matrix(format!("{name}.q"), c, c, std),
            k: self.matrix(format!("{name}.k"), c, c, std),
            v: self.matrix(format!("{name}.v"), c, c, std),
            o: self.matrix(format!("{name}.o"), c, c, o_std),
        }
    }

    fn mlp(&mut self, name: &str, hidden: usize) -> Mlp {
        let c = self.c;
        Mlp {
            l1: self.dense(&format!("{name}.l1"), c, hidden, false),
            l2: self.dense(&format!("{name}.l2"), hidden, c, true),
        }
    }

    fn block(&mut self, name: &str, cross: bool, hidden: usize) -> Block {
        Block {
            ada1: self.ada(&format!("{name}.ada1")),
            attn: self.attn(&format!("{name}.attn")),
            cross: cross.then(|| self.attn(&format!("{name}.cross"))),
            ada2: self.ada(&format!("{name}.ada2")),
            mlp: self.mlp(&format!("{name}.mlp"), hidden),
        }
    }
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let hidden = config.mlp_ratio * c;
        let cross = config.condition_mode == ConditionMode::TokenSequence;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: seed::rng(seed_value, "denoiser-init", 0),
            c,
            zero_out: config.zero_residual,
        };
        let embed = |b: &mut Builder<'_>, name: &str, rows: usize| {
            let t = Tensor::randn(&[rows, c], EMBED_STD, &mut b.rng);
            b.store.add(name, t, false)
        };
        let tok = embed(&mut b, "tok_emb", config.k + 1);
        let pos = [
            embed(&mut b, "pos_x", config.patch_grid[0]),
            embed(&mut b, "pos_y", config.patch_grid[1]),
            embed(&mut b, "pos_z", config.patch_grid[2]),
        ];
        let label = embed(&mut b, "label_emb", config.num_classes);
        let cond = cross.then(|| embed(&mut b, "cond_emb", config.cond_vocab));
        let blocks = (0..config.blocks)
            .map(|i| b.block(&format!("block{i}"), cross, hidden))
            .collect();
        let mfm = (0..config.mfm_layers)
            .map(|i| {
                let n = format!("mfm{i}");
                Mfm {
                    ada_h: b.ada(&format!("{n}.ada_h")),
                    sa_h: b.attn(&format!("{n}.sa_h")),
                    ada_l: b.ada(&format!("{n}.ada_l")),
                    sa_l: b.attn(&format!("{n}.sa_l")),
                    f_l: b.mlp(&format!("{n}.f_l"), c),
                    f_h: b.mlp(&format!("{n}.f_h"), c),
                    ada_m: b.ada(&format!("{n}.ada_m")),
                    mlp: b.mlp(&format!("{n}.mlp"), hidden),
                }
            })
            .collect();
        let last = b.block("last", cross, hidden);
        let head = {
            let std = (1.0 / c as f64).sqrt();
            Dense {
                w: b.matrix("head.w".into(), c, config.k, std),
                b: b.store.add("head.b", Tensor::zeros(&[1, config.k]), false),
            }
        };
        let layout = Layout {
            tok,
            pos,
            label,
            cond,
            blocks,
            mfm,
            last,
            head,
        };
        Ok(Self { config, store, layout })
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.store.bind(g)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.store.bind_frozen(g)
    }

    fn check_input(&self, input: &NetInput<'_>) -> Result<()> {
        let cfg = &self.config;
        if input.tokens.len() != cfg.n() {
            return Err(Error::invalid(format!(
                "{} tokens for a {:?} patch grid",
                input.tokens.len(),
                cfg.patch_grid
            )));
        }
        if let Some(bad) = input.tokens.iter().find(|&&s| s as usize > cfg.k) {
            return Err(Error::invalid(format!("token {bad} exceeds mask index {}", cfg.k)));
        }
        if input.t == 0 || input.t > cfg.t_max {
            return Err(Error::invalid(format!("t = {} outside 1..={}", input.t, cfg.t_max)));
        }
        if let Some(l) = input.label {
            if l as usize >= cfg.num_classes {
                return Err(Error::invalid(format!("label {l} >= num_classes {}", cfg.num_classes)));
            }
        }
        if let Some(bad) = input.cond.iter().find(|&&s| s as usize >= cfg.cond_vocab) {
            return Err(Error::invalid(format!("condition token {bad} >= cond_vocab {}", cfg.cond_vocab)));
        }
        Ok(())
    }

    /// Label row actually used for `input` under the configured mode.
    fn label_index(&self, input: &NetInput<'_>) -> usize {
        match (self.config.condition_mode, input.label) {
            (ConditionMode::Class, Some(l)) => l as usize,
            _ => self.config.empty_label(),
        }
    }

    /// Token plus factorized position embeddings, `[N, C]`.
    pub fn embed(&self, g: &mut Graph, vars: &[Var], tokens: &[u32]) -> Result<Var> {
        let [gx, gy, _] = self.config.patch_grid;
        let n = tokens.len();
        let idx: Vec<usize> = tokens.iter().map(|&s| s as usize).collect();
        let mut x = g.embedding(self.layout.tok.at(vars), &idx)?;
        let coords: [Vec<usize>; 3] = [
            (0..n).map(|i| i % gx).collect(),
            (0..n).map(|i| (i / gx) % gy).collect(),
            (0..n).map(|i| i / (gx * gy)).collect(),
        ];
        for (axis, c) in coords.iter().enumerate() {
            let p = g.embedding(self.layout.pos[axis].at(vars), c)?;
            x = g.add(x, p)?;
        }
        Ok(x)
    }

    /// Activated conditioning row `act(sinusoid(t) + label_emb[y])`, `[1, C]`.
    fn conditioning(&self, g: &mut Graph, vars: &[Var], t: usize, label: usize) -> Result<Var> {
        let s = g.constant_from(&[1, self.config.channels], sinusoid(t, self.config.channels))?;
        let l = g.embedding(self.layout.label.at(vars), &[label])?;
        let c = g.add(s, l)?;
        Ok(g.act(c))
    }

    /// `[N, K]` log-probabilities over the clean token at each position.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: &NetInput<'_>) -> Result<Var> {
        self.check_input(input)?;
        let cfg = &self.config;
        let mut x = self.embed(g, vars, input.tokens)?;
        let c = self.conditioning(g, vars, input.t, self.label_index(input))?;
        let cond = match self.layout.cond {
            Some(table) if !input.cond.is_empty() => {
                let idx: Vec<usize> = input.cond.iter().map(|&s| s as usize).collect();
                Some(g.embedding(table.at(vars), &idx)?)
            }
            _ => None,
        };
        let ctx = self.ctx(vars);
        for b in &self.layout.blocks {
            x = ctx.block(g, x, c, cond, b)?;
        }
        for m in &self.layout.mfm {
            x = ctx.mfm(g, x, c, m, cfg.patch_grid, cfg.pool)?;
        }
        x = ctx.block(g, x, c, cond, &self.layout.last)?;
        self.head(g, vars, x)
    }

    /// Conditioning row for timestep `t` and `label` (`None` = empty).
    pub fn conditioning_row(&self, g: &mut Graph, vars: &[Var], t: usize, label: Option<u32>) -> Result<Var> {
        let input = NetInput::new(&[], t).with_label(label);
        let l = self.label_index(&input);
        if l >= self.config.num_classes {
            return Err(Error::invalid(format!("label {l} >= num_classes {}", self.config.num_classes)));
        }
        self.conditioning(g, vars, t, l)
    }

    fn ctx<'a>(&self, vars: &'a [Var]) -> Ctx<'a> {
        Ctx { vars, heads: self.config.heads, c: self.config.channels }
    }

    fn block_at(&self, index: usize) -> Result<&Block> {
        match index.cmp(&self.layout.blocks.len()) {
            std::cmp::Ordering::Less => Ok(&self.layout.blocks[index]),
            std::cmp::Ordering::Equal => Ok(&self.layout.last),
            std::cmp::Ordering::Greater => Err(Error::invalid(format!("no block {index}"))),
        }
    }

    /// Ordinary block `index` (the final block is `index = blocks`) on `[M, C]` features.
    pub fn ordinary_block(&self, g: &mut Graph, vars: &[Var], index: usize, x: Var, c: Var, cond: Option<Var>) -> Result<Var> {
        let b = *self.block_at(index)?;
        self.ctx(vars).block(g, x, c, cond, &b)
    }

    /// Cross-attention sub-block `x + attn(LN(x), cond)` of ordinary block `index`.
    pub fn cross_attention(&self, g: &mut Graph, vars: &[Var], index: usize, x: Var, cond: Var) -> Result<Var> {
        let a = self
            .block_at(index)?
            .cross
            .ok_or_else(|| Error::invalid("network has no cross-attention"))?;
        let ctx = self.ctx(vars);
        if g.shape(cond)[0] == 0 {
            return Ok(x);
        }
        let h = g.layer_norm(x);
        let h = ctx.attention(g, h, cond, &a)?;
        g.add(x, h)
    }

    /// MFM layer `index` on `[N, C]` features laid out on the patch grid.
    pub fn mfm_layer(&self, g: &mut Graph, vars: &[Var], index: usize, x: Var, c: Var) -> Result<Var> {
        let m = *self
            .layout
            .mfm
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no MFM layer {index}")))?;
        self.ctx(vars).mfm(g, x, c, &m, self.config.patch_grid, self.config.pool)
    }

    /// Embedded condition tokens `[M, C]`.
    pub fn embed_condition(&self, g: &mut Graph, vars: &[Var], cond: &[u32]) -> Result<Var> {
        let table = self.layout.cond.ok_or_else(|| Error::invalid("network has no condition embedding"))?;
        let idx: Vec<usize> = cond.iter().map(|&s| s as usize).collect();
        g.embedding(table.at(vars), &idx)
    }

    /// Final `LN -> linear -> log_softmax` on `[N, C]` features.
    pub fn head(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = g.layer_norm(x);
        let logits = self.ctx(vars).dense(g, h, &self.layout.head)?;
        Ok(g.log_softmax(logits))
    }

    /// Inference without gradients, flattened `N × K`.
    pub fn log_probs(&self, input: &NetInput<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &vars, input)?;
        Ok(g.value(out).to_vec())
    }

    /// Write the checkpoint and its config sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(&dir.join(DENOISER_CKPT), &self.store)?;
        self.config.save(&dir.join(DENOISER_SIDECAR))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = DenoiserConfig::load(&dir.join(DENOISER_SIDECAR))?;
        let mut net = Self::new(config, 0)?;
        checkpoint::restore(&dir.join(DENOISER_CKPT), &mut net.store)?;
        Ok(net)
    }

    /// Round all weights through f32 so in-memory results match a saved copy.
    pub fn round_to_f32(&mut self) {
        for e in self.store.entries_mut() {
            for v in e.tensor.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// Sinusoidal timestep features of width `c`.
pub fn sinusoid(t: usize, c: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; c];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Softmax attention weights `softmax(q k^T / sqrt(d))`, `[Nq, Nk]`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d = g.shape(q)[1];
    let s = g.matmul_t(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    Ok(g.softmax(s))
}

struct Ctx<'a> {
    vars: &'a [Var],
    heads: usize,
    c: usize,
}

impl Ctx<'_> {
    fn v(&self, id: ParamId) -> Var {
        id.at(self.vars)
    }

    fn dense(&self, g: &mut Graph, x: Var, d: &Dense) -> Result<Var> {
        let h = g.matmul(x, self.v(d.w))?;
        g.add_row(h, self.v(d.b))
    }

    fn mlp(&self, g: &mut Graph, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.dense(g, x, &m.l1)?;
        let h = g.act(h);
        self.dense(g, h, &m.l2)
    }

    /// `LN(x) * (1 + scale) + shift` with `[scale, shift]` projected from `c`.
    fn ada_ln(&self, g: &mut Graph, x: Var, c: Var, d: &Dense) -> Result<Var> {
        let h = g.layer_norm(x);
        let m = self.dense(g, c, d)?;
        let scale = g.slice(m, 1, 0, self.c)?;
        let shift = g.slice(m, 1, self.c, self.c)?;
        let scale = g.add_scalar(scale, 1.0);
        let y = g.mul_row(h, scale)?;
        g.add_row(y, shift)
    }

    /// Multi-head attention from `x` onto `kv`, output-projected.
    fn attention(&self, g: &mut Graph, x: Var, kv: Var, a: &Attn) -> Result<Var> {
        let q = g.matmul(x, self.v(a.q))?;
        let k = g.matmul(kv, self.v(a.k))?;
        let v = g.matmul(kv, self.v(a.v))?;
        let dh = self.c / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, h * dh, dh)?, g.slice(k, 1, h * dh, dh)?, g.slice(v, 1, h * dh, dh)?)
            };
            let w = attention_weights(g, qh, kh)?;
            outs.push(g.matmul(w, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        g.matmul(o, self.v(a.o))
    }

    fn block(&self, g: &mut Graph, x: Var, c: Var, cond: Option<Var>, b: &Block) -> Result<Var> {
        let h = self.ada_ln(g, x, c, &b.ada1)?;
        let h = self.attention(g, h, h, &b.attn)?;
        let mut x = g.add(x, h)?;
        if let (Some(a), Some(cond)) = (&b.cross, cond) {
            let h = g.layer_norm(x);
            let h = self.attention(g, h, cond, a)?;
            x = g.add(x, h)?;
        }
        let h = self.ada_ln(g, x, c, &b.ada2)?;
        let h = self.mlp(g, h, &b.mlp)?;
        g.add(x, h)
    }

    /// Dual-branch layer: the high branch keeps per-token features, the low
    /// branch pools them; each self-attends, then each receives the other
    /// through `f` (pooled high into low, upsampled low into high).
    fn mfm(&self, g: &mut Graph, x: Var, c: Var, m: &Mfm, grid: [usize; 3], pool: usize) -> Result<Var> {
        let h = self.ada_ln(g, x, c, &m.ada_h)?;
        let h = self.attention(g, h, h, &m.sa_h)?;
        let xh = g.add(x, h)?;
        let y = g.mean_pool3d(x, grid, pool)?;
        let h = self.ada_ln(g, y, c, &m.ada_l)?;
        let h = self.attention(g, h, h, &m.sa_l)?;
        let yl = g.add(y, h)?;
        let down = g.mean_pool3d(xh, grid, pool)?;
        let s = g.add(yl, down)?;
        let f = self.mlp(g, s, &m.f_l)?;
        let y2 = g.add(yl, f)?;
        let up = g.upsample3d(y2, grid, pool)?;
        let s = g.add(xh, up)?;
        let f = self.mlp(g, s, &m.f_h)?;
        let x2 = g.add(xh, f)?;
        let h = self.ada_ln(g, x2, c, &m.ada_m)?;
        let h = self.mlp(g, h, &m.mlp)?;
        g.add(x2, h)
    }
}

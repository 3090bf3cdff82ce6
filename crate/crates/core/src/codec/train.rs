use rand::seq::SliceRandom;

use super::{init_codebook_kmeans, partition, vqvae_loss, Codebook, Codec, CodecParams, PatchSpec};
use crate::autodiff::{AdamW, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::seed;
use crate::shape::TsdfGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub k: usize,
    pub n_z: usize,
    pub beta: f64,
    /// Plain autoencoder epochs before the codebook is seeded.
    pub warmup_epochs: usize,
    /// Joint epochs with quantization.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            k: 32,
            n_z: 32,
            beta: super::DEFAULT_BETA,
            warmup_epochs: 30,
            epochs: 40,
            batch: 256,
            lr: 1e-3,
            kmeans_iters: 25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CodecTrainReport {
    /// Mean reconstruction term per epoch (warmup, then joint).
    pub loss_curve: Vec<f64>,
    pub kmeans_objective: Vec<f64>,
    /// Distinct codes used over the training patches.
    pub codes_used: usize,
    /// Mean absolute per-voxel error of quantized reconstructions, TSDF units.
    pub mean_abs_error: f64,
}

struct PatchSet {
    rows: Vec<f64>,
    volume: usize,
}

impl PatchSet {
    fn count(&self) -> usize {
        self.rows.len() / self.volume
    }

    fn gather(&self, order: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(order.len() * self.volume);
        for &i in order {
            out.extend_from_slice(&self.rows[i * self.volume..(i + 1) * self.volume]);
        }
        out
    }
}

fn batches(n: usize, batch: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Fit the codec: autoencoder warmup, k-means codebook seeding on the warmed
/// latents, then joint training of encoder, decoder and codebook.
pub fn train_codec(
    grids: &[TsdfGrid],
    patch: PatchSpec,
    cfg: &CodecTrainConfig,
) -> Result<(Codec, CodecTrainReport)> {
    let first = grids.first().ok_or_else(|| Error::invalid("no grids to train on"))?;
    let truncation = first.truncation();
    if cfg.batch == 0 {
        return Err(Error::invalid("batch must be >= 1"));
    }
    let inv = 1.0 / f64::from(truncation);
    let mut rows = Vec::new();
    for g in grids {
        if g.truncation() != truncation {
            return Err(Error::invalid("grids disagree on truncation"));
        }
        rows.extend(partition(g, &patch)?.into_iter().flatten().map(|v| f64::from(v) * inv));
    }
    let data = PatchSet {
        rows,
        volume: patch.volume(),
    };
    let mut params = CodecParams::new(patch.volume(), cfg.n_z, cfg.seed)?;
    let mut report = CodecTrainReport::default();
    let mut rng = seed::rng(cfg.seed, "codec-batches", 0);

    let mut opt = AdamW::new(cfg.lr, 0.9, 0.999, 0.0);
    for _ in 0..cfg.warmup_epochs {
        let mut sum = 0.0;
        let parts = batches(data.count(), cfg.batch, &mut rng);
        for idx in &parts {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let x = g.constant_from(&[idx.len(), data.volume], data.gather(idx))?;
            let z = b.encode(&mut g, x)?;
            let y = b.decode(&mut g, z)?;
            let d = g.sub(y, x)?;
            let sq = g.mul(d, d)?;
            let loss = g.mean(sq);
            check_finite(g.scalar(loss), report.loss_curve.len())?;
            sum += g.scalar(loss);
            g.backward(loss)?;
            let vars = b.vars().to_vec();
            let grads = params.store.collect_grads(&g, &vars);
            params.store.accumulate(&grads);
            opt.step(&mut params.store);
        }
        report.loss_curve.push(sum / parts.len() as f64);
    }

    let latents = params.encode_rows(&data.rows, data.count())?;
    let latents: Vec<Vec<f64>> = latents.chunks(cfg.n_z).map(<[f64]>::to_vec).collect();
    let fit = init_codebook_kmeans(&latents, cfg.k, cfg.kmeans_iters, cfg.seed)?;
    report.kmeans_objective = fit.objective;
    let mut book_store = ParamStore::new();
    book_store.add(
        "codebook",
        Tensor::new(&[cfg.k, cfg.n_z], fit.codebook.entries().to_vec())?,
        false,
    );

    let mut book_opt = AdamW::new(cfg.lr, 0.9, 0.999, 0.0);
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let parts = batches(data.count(), cfg.batch, &mut rng);
        for idx in &parts {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let book_vars = book_store.bind(&mut g);
            let x = g.constant_from(&[idx.len(), data.volume], data.gather(idx))?;
            let (terms, _) = vqvae_loss(&mut g, &b, book_vars[0], x, cfg.beta)?;
            check_finite(g.scalar(terms.total), report.loss_curve.len())?;
            sum += g.scalar(terms.recon);
            g.backward(terms.total)?;
            let vars = b.vars().to_vec();
            let grads = params.store.collect_grads(&g, &vars);
            params.store.accumulate(&grads);
            let bgrads = book_store.collect_grads(&g, &book_vars);
            book_store.accumulate(&bgrads);
            opt.step(&mut params.store);
            book_opt.step(&mut book_store);
        }
        report.loss_curve.push(sum / parts.len() as f64);
    }

    let codebook = Codebook::new(cfg.k, cfg.n_z, book_store.entries()[0].tensor.data().to_vec())?;
    let mut codec = Codec {
        patch,
        truncation,
        params,
        codebook,
    };
    codec.round_to_f32();
    let mut used = vec![false; cfg.k];
    let mut err = 0.0;
    let mut voxels = 0usize;
    let entries = codec.decoded_entries()?;
    for g in grids {
        let tokens = codec.tokenize(g, None)?;
        for &i in &tokens.indices {
            used[i as usize] = true;
        }
        let r = codec.detokenize_with(&tokens, &entries)?;
        err += r.mean_abs_diff(g)? * g.len() as f64;
        voxels += g.len();
    }
    report.codes_used = used.iter().filter(|&&u| u).count();
    report.mean_abs_error = err / voxels as f64;
    Ok((codec, report))
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

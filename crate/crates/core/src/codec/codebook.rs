use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::seed;

pub const CODEBOOK_MAGIC: &str = "CDBK1";

/// `K` latent entries of width `n_z`. Index `K` is reserved for `[MASK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    n_z: usize,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(k: usize, n_z: usize, entries: Vec<f64>) -> Result<Self> {
        if k < 2 || n_z == 0 {
            return Err(Error::invalid(format!("codebook needs K >= 2 and n_z >= 1, got K={k}, n_z={n_z}")));
        }
        if entries.len() != k * n_z {
            return Err(Error::invalid(format!("{} values for {k}x{n_z} codebook", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook"));
        }
        Ok(Self { k, n_z, entries })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn mask_index(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n_z..(i + 1) * self.n_z]
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn quantize(&self, z: &[f64]) -> (usize, &[f64]) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(z, self.entry(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        (best.0, self.entry(best.0))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(13 + 4 * self.entries.len());
        binio::write_magic(&mut out, b"CDBK1")?;
        binio::write_u32(&mut out, self.k as u32)?;
        binio::write_u32(&mut out, self.n_z as u32)?;
        for &v in &self.entries {
            binio::write_f32(&mut out, v as f32)?;
        }
        Ok(out)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.expect_magic(CODEBOOK_MAGIC)?;
        let k = r.u32()? as usize;
        let n_z = r.u32()? as usize;
        let values = (0..k * n_z)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Codebook::new(k, n_z, values).map_err(|e| r.err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &binio::read_file(path)?)
    }

    /// Round entries through f32 so an in-memory codebook matches its file.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.entries {
            *v = f64::from(*v as f32);
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of [`init_codebook_kmeans`].
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Total squared quantization error after seeding and after each Lloyd iteration.
    pub objective: Vec<f64>,
}

fn objective(latents: &[Vec<f64>], centers: &Codebook) -> f64 {
    latents.iter().map(|z| sq_dist(z, centers.quantize(z).1)).sum()
}

/// k-means++ seeding followed by `iters` Lloyd iterations.
pub fn init_codebook_kmeans(latents: &[Vec<f64>], k: usize, iters: usize, seed_value: u64) -> Result<KMeansFit> {
    let n_z = latents.first().map(Vec::len).unwrap_or(0);
    if latents.iter().any(|z| z.len() != n_z) {
        return Err(Error::invalid("latents have mixed widths"));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for z in latents {
        if !distinct.iter().any(|d| *d == z) {
            distinct.push(z);
            if distinct.len() >= k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::invalid(format!(
            "k-means needs {k} distinct latents, found {}",
            distinct.len()
        )));
    }
    let mut rng = seed::rng(seed_value, "kmeans", 0);
    let mut centers: Vec<f64> = Vec::with_capacity(k * n_z);
    centers.extend_from_slice(&latents[rng.random_range(0..latents.len())]);
    let mut d2: Vec<f64> = latents.iter().map(|z| sq_dist(z, &centers[..n_z])).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let pick = pick.expect("distinct latents leave positive distance");
        centers.extend_from_slice(&latents[pick]);
        let new = &centers[c * n_z..];
        for (i, z) in latents.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(z, new));
        }
    }
    let mut book = Codebook::new(k, n_z, centers)?;
    let mut history = vec![objective(latents, &book)];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * n_z];
        let mut counts = vec![0usize; k];
        for z in latents {
            let (i, _) = book.quantize(z);
            counts[i] += 1;
            for (s, v) in sums[i * n_z..(i + 1) * n_z].iter_mut().zip(z) {
                *s += v;
            }
        }
        let entries = book.entries_mut();
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..n_z {
                    entries[c * n_z + d] = sums[c * n_z + d] / counts[c] as f64;
                }
            }
        }
        history.push(objective(latents, &book));
    }
    Ok(KMeansFit {
        codebook: book,
        objective: history,
    })
}

//! Point-set distances and population metrics for generated shapes, plus a
//! DCT power spectrum of volumes.

mod dct;
mod hungarian;
mod report;

pub use dct::{dct3, dct_matrix, dct_psd, Spectrum};
pub use hungarian::min_cost_assignment;
pub use report::{write_reports, MetricReport, TABLE_HEADER};

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::shape::SurfacePointSet;

/// Largest set size solved by exact assignment.
pub const EMD_MAX_POINTS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceKind {
    Chamfer,
    Emd,
}

impl DistanceKind {
    pub fn label(self) -> &'static str {
        match self {
            DistanceKind::Chamfer => "CD",
            DistanceKind::Emd => "EMD",
        }
    }

    pub fn distance(self, x: &SurfacePointSet, y: &SurfacePointSet) -> Result<f64> {
        match self {
            DistanceKind::Chamfer => chamfer(x, y),
            DistanceKind::Emd => emd(x, y),
        }
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd" | "chamfer" => Ok(DistanceKind::Chamfer),
            "emd" => Ok(DistanceKind::Emd),
            _ => Err(Error::Config(format!("distance {s:?}: expected cd or emd"))),
        }
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nonempty(x: &SurfacePointSet, what: &str) -> Result<()> {
    if x.points.is_empty() {
        return Err(Error::invalid(format!("{what}: empty point set")));
    }
    Ok(())
}

/// Mean squared distance from each point of `x` to its nearest point in `y`.
fn mean_nearest_sq(x: &[[f64; 3]], y: &[[f64; 3]]) -> f64 {
    x.iter()
        .map(|p| y.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / x.len() as f64
}

/// Symmetric Chamfer distance with squared Euclidean point distances.
pub fn chamfer(x: &SurfacePointSet, y: &SurfacePointSet) -> Result<f64> {
    nonempty(x, "chamfer")?;
    nonempty(y, "chamfer")?;
    Ok(mean_nearest_sq(&x.points, &y.points) + mean_nearest_sq(&y.points, &x.points))
}

/// Exact earth mover distance: minimum-cost perfect matching under Euclidean
/// cost, divided by the set size.
pub fn emd(x: &SurfacePointSet, y: &SurfacePointSet) -> Result<f64> {
    nonempty(x, "emd")?;
    if x.count() != y.count() {
        return Err(Error::invalid(format!("emd needs equal sizes, got {} and {}", x.count(), y.count())));
    }
    let n = x.count();
    if n > EMD_MAX_POINTS {
        return Err(Error::invalid(format!("emd is exact up to {EMD_MAX_POINTS} points, got {n}")));
    }
    let cost: Vec<f64> = x
        .points
        .iter()
        .flat_map(|p| y.points.iter().map(move |q| sq_dist(p, q).sqrt()))
        .collect();
    let (total, _) = min_cost_assignment(&cost, n)?;
    Ok(total / n as f64)
}

/// Largest distance from a point of `from` to its nearest point in `to`.
pub fn directed_hausdorff(from: &SurfacePointSet, to: &SurfacePointSet) -> Result<f64> {
    nonempty(from, "hausdorff")?;
    nonempty(to, "hausdorff")?;
    Ok(from
        .points
        .iter()
        .map(|p| to.points.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
        .sqrt())
}

/// `f(i, j)` for every unordered pair `i < j`, in row-major pair order.
fn pairwise<T: Send>(n: usize, f: impl Fn(usize, usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pairs.par_iter().map(|&(i, j)| f(i, j)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairs.iter().map(|&(i, j)| f(i, j)).collect()
    }
}

/// Leave-one-out accuracy of the 1-nearest-neighbour classifier telling
/// `generated` from `reference`. Ties go to the lowest pooled index
/// (generated first).
pub fn one_nna(generated: &[SurfacePointSet], reference: &[SurfacePointSet], kind: DistanceKind) -> Result<f64> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(Error::invalid("1-NNA needs at least two sets in each population"));
    }
    let pool: Vec<&SurfacePointSet> = generated.iter().chain(reference).collect();
    let n = pool.len();
    let d = pairwise(n, |i, j| kind.distance(pool[i], pool[j]))?;
    let mut dist = vec![0.0; n * n];
    let mut it = d.into_iter();
    for i in 0..n {
        for j in i + 1..n {
            let v = it.next().expect("one value per pair");
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    let ng = generated.len();
    let correct = (0..n)
        .filter(|&i| {
            let nn = (0..n)
                .filter(|&j| j != i)
                .fold((usize::MAX, f64::INFINITY), |best, j| {
                    if dist[i * n + j] < best.1 { (j, dist[i * n + j]) } else { best }
                })
                .0;
            (nn < ng) == (i < ng)
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Minimum and average matching distance of completions to their references.
/// `completions[r]` holds the completions conditioned on `references[r]`.
pub fn mmd_amd(completions: &[Vec<SurfacePointSet>], references: &[SurfacePointSet]) -> Result<(f64, f64)> {
    if completions.len() != references.len() || references.is_empty() {
        return Err(Error::invalid(format!(
            "{} completion groups for {} references",
            completions.len(),
            references.len()
        )));
    }
    let (mut mmd, mut amd) = (0.0, 0.0);
    for (group, r) in completions.iter().zip(references) {
        if group.is_empty() {
            return Err(Error::invalid("every reference needs at least one completion"));
        }
        let d = group.iter().map(|c| chamfer(c, r)).collect::<Result<Vec<f64>>>()?;
        mmd += d.iter().cloned().fold(f64::INFINITY, f64::min);
        amd += d.iter().sum::<f64>() / d.len() as f64;
    }
    let n = references.len() as f64;
    Ok((mmd / n, amd / n))
}

/// Mean pairwise Chamfer distance over all unordered pairs.
pub fn tmd(completions: &[SurfacePointSet]) -> Result<f64> {
    if completions.len() < 2 {
        return Err(Error::invalid("TMD needs at least two shapes"));
    }
    let d = pairwise(completions.len(), |i, j| chamfer(&completions[i], &completions[j]))?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean directed Hausdorff distance from the partial input to each completion.
pub fn uhd(partial: &SurfacePointSet, completions: &[SurfacePointSet]) -> Result<f64> {
    if completions.is_empty() {
        return Err(Error::invalid("UHD needs at least one completion"));
    }
    let mut total = 0.0;
    for c in completions {
        total += directed_hausdorff(partial, c)?;
    }
    Ok(total / completions.len() as f64)
}

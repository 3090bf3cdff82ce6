use rand::Rng;

use super::grid::{trilinear, trilinear_grad, TsdfGrid};
use crate::error::{Error, Result};
use crate::seed;

const NEWTON_ITERS: usize = 12;

/// Points on the zero level set of a grid's trilinear interpolant.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySurface);
        }
        Ok(Self { points })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Base corners of every cell whose corner values straddle zero.
pub fn crossing_cells(grid: &TsdfGrid) -> Vec<[usize; 3]> {
    let [h, w, d] = grid.dims();
    let mut out = Vec::new();
    for z in 0..d - 1 {
        for y in 0..w - 1 {
            for x in 0..h - 1 {
                let c = grid.cell_corners([x, y, z]);
                let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if lo <= 0.0 && hi >= 0.0 && lo < hi {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Zero of the interpolant on the first sign-changing cell edge. Trilinear
/// interpolation is linear along an edge, so this is an exact root.
fn edge_root(c: &[f64; 8]) -> [f64; 3] {
    for a in 0..8usize {
        for axis in 0..3 {
            let bit = 1 << axis;
            if a & bit != 0 {
                continue;
            }
            let b = a | bit;
            let (va, vb) = (c[a], c[b]);
            if va * vb <= 0.0 {
                let t = if va == vb { 0.0 } else { va / (va - vb) };
                let mut f = [(a & 1) as f64, ((a >> 1) & 1) as f64, ((a >> 2) & 1) as f64];
                f[axis] = t.clamp(0.0, 1.0);
                return f;
            }
        }
    }
    [0.5; 3]
}

fn refine(c: &[f64; 8], start: [f64; 3], tol: f64) -> [f64; 3] {
    let mut f = start;
    let mut best = (trilinear(c, f).abs(), f);
    for _ in 0..NEWTON_ITERS {
        let v = trilinear(c, f);
        let g = trilinear_grad(c, f);
        let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        if g2 < 1e-18 {
            break;
        }
        for a in 0..3 {
            f[a] = (f[a] - v * g[a] / g2).clamp(0.0, 1.0);
        }
        let r = trilinear(c, f).abs();
        if r < best.0 {
            best = (r, f);
        }
    }
    if best.0 <= tol {
        best.1
    } else {
        edge_root(c)
    }
}

/// Draw `n` crossing cells uniformly with replacement, jitter inside each cell
/// and pull the point onto the interpolant's zero set.
pub fn sample_surface_points(grid: &TsdfGrid, n: usize, seed_value: u64) -> Result<SurfacePointSet> {
    if n == 0 {
        return Err(Error::invalid("surface sample count must be >= 1"));
    }
    let cells = crossing_cells(grid);
    if cells.is_empty() {
        return Err(Error::EmptySurface);
    }
    let mut rng = seed::rng(seed_value, "surface", 0);
    let tol = 1e-3 * grid.max_spacing();
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = cells[rng.random_range(0..cells.len())];
        let start = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let c = grid.cell_corners(cell);
        let f = refine(&c, start, tol);
        points.push(grid.to_world([
            cell[0] as f64 + f[0],
            cell[1] as f64 + f[1],
            cell[2] as f64 + f[2],
        ]));
    }
    SurfacePointSet::new(points)
}

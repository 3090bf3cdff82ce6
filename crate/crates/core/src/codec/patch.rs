use crate::error::{Error, Result};
use crate::shape::TsdfGrid;

/// Cubic patch tiling of a grid. Patches are numbered x-fastest, like voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub edge: usize,
    pub per_axis: [usize; 3],
}

impl PatchSpec {
    pub fn for_dims(dims: [usize; 3], edge: usize) -> Result<Self> {
        if edge < 2 {
            return Err(Error::invalid(format!("patch edge must be >= 2, got {edge}")));
        }
        if dims.iter().any(|&d| d == 0 || d % edge != 0) {
            return Err(Error::invalid(format!("dims {dims:?} not divisible by patch edge {edge}")));
        }
        Ok(Self {
            edge,
            per_axis: dims.map(|d| d / edge),
        })
    }

    pub fn count(&self) -> usize {
        self.per_axis.iter().product()
    }

    pub fn volume(&self) -> usize {
        self.edge.pow(3)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.per_axis.map(|p| p * self.edge)
    }

    /// Patch-grid coordinate of patch `i`.
    pub fn coord(&self, i: usize) -> [usize; 3] {
        let [px, py, _] = self.per_axis;
        [i % px, (i / px) % py, i / (px * py)]
    }
}

/// Split into `N` patches of `edge^3` values each (x-fastest within a patch).
pub fn partition(grid: &TsdfGrid, spec: &PatchSpec) -> Result<Vec<Vec<f32>>> {
    if grid.dims() != spec.dims() {
        return Err(Error::invalid(format!(
            "grid dims {:?} do not tile into {:?} patches of edge {}",
            grid.dims(),
            spec.per_axis,
            spec.edge
        )));
    }
    let e = spec.edge;
    Ok((0..spec.count())
        .map(|i| {
            let [px, py, pz] = spec.coord(i);
            let mut patch = Vec::with_capacity(spec.volume());
            for z in 0..e {
                for y in 0..e {
                    for x in 0..e {
                        patch.push(grid.get(px * e + x, py * e + y, pz * e + z));
                    }
                }
            }
            patch
        })
        .collect())
}

/// Inverse of [`partition`]. Values are clamped to `±truncation`.
pub fn assemble(patches: &[Vec<f32>], spec: &PatchSpec, truncation: f32) -> Result<TsdfGrid> {
    if patches.len() != spec.count() || patches.iter().any(|p| p.len() != spec.volume()) {
        return Err(Error::invalid(format!(
            "expected {} patches of {} values",
            spec.count(),
            spec.volume()
        )));
    }
    let dims = spec.dims();
    let e = spec.edge;
    let mut values = vec![0.0f32; dims.iter().product()];
    for (i, patch) in patches.iter().enumerate() {
        let [px, py, pz] = spec.coord(i);
        let mut it = patch.iter();
        for z in 0..e {
            for y in 0..e {
                for x in 0..e {
                    let v = *it.next().unwrap();
                    if !v.is_finite() {
                        return Err(Error::NonFinite("assemble"));
                    }
                    let (gx, gy, gz) = (px * e + x, py * e + y, pz * e + z);
                    values[gx + dims[0] * (gy + dims[1] * gz)] = v.clamp(-truncation, truncation);
                }
            }
        }
    }
    TsdfGrid::new(dims, truncation, values)
}

use crate::error::{Error, Result};

/// Dense truncated signed-distance volume over the cube `[-1, 1]^3`.
///
/// Values are stored x-fastest: index `x + H * (y + W * z)` for dims
/// `(H, W, D)` along `(x, y, z)`. Voxel `i` along an axis of `n` voxels has
/// its center at `-1 + (i + 0.5) * 2 / n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfGrid {
    dims: [usize; 3],
    truncation: f32,
    values: Vec<f32>,
}

impl TsdfGrid {
    /// Build a grid, checking that every value is finite and inside `[-τ, τ]`.
    pub fn new(dims: [usize; 3], truncation: f32, values: Vec<f32>) -> Result<Self> {
        if !(truncation > 0.0) || !truncation.is_finite() {
            return Err(Error::invalid(format!("truncation must be positive, got {truncation}")));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid(format!("grid dims must be >= 2, got {dims:?}")));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite TSDF value {v}")));
        }
        if let Some(v) = values.iter().find(|v| v.abs() > truncation) {
            return Err(Error::invalid(format!("value {v} outside ±{truncation}")));
        }
        Ok(Self {
            dims,
            truncation,
            values,
        })
    }

    pub(crate) fn from_parts_unchecked(dims: [usize; 3], truncation: f32, values: Vec<f32>) -> Self {
        Self {
            dims,
            truncation,
            values,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn truncation(&self) -> f32 {
        self.truncation
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    /// Voxel pitch along each axis.
    pub fn spacing(&self) -> [f64; 3] {
        self.dims.map(|n| 2.0 / n as f64)
    }

    /// Largest voxel pitch.
    pub fn max_spacing(&self) -> f64 {
        self.spacing().into_iter().fold(0.0, f64::max)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let s = self.spacing();
        [
            -1.0 + (x as f64 + 0.5) * s[0],
            -1.0 + (y as f64 + 0.5) * s[1],
            -1.0 + (z as f64 + 0.5) * s[2],
        ]
    }

    /// Continuous voxel coordinate of a world point (voxel centers at integers).
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let s = self.spacing();
        [
            (p[0] + 1.0) / s[0] - 0.5,
            (p[1] + 1.0) / s[1] - 0.5,
            (p[2] + 1.0) / s[2] - 0.5,
        ]
    }

    pub fn to_world(&self, u: [f64; 3]) -> [f64; 3] {
        let s = self.spacing();
        [
            -1.0 + (u[0] + 0.5) * s[0],
            -1.0 + (u[1] + 0.5) * s[1],
            -1.0 + (u[2] + 0.5) * s[2],
        ]
    }

    /// Trilinear interpolation at a world point, clamped to the voxel-center hull.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let u = self.to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let c = u[a].clamp(0.0, hi);
            let b = (c.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = c - b as f64;
        }
        let corners = self.cell_corners(base);
        trilinear(&corners, frac)
    }

    /// Values at the 8 corners of cell `base`, ordered by bit pattern `x | y<<1 | z<<2`.
    pub(crate) fn cell_corners(&self, base: [usize; 3]) -> [f64; 8] {
        let mut c = [0.0; 8];
        for (bit, slot) in c.iter_mut().enumerate() {
            let x = base[0] + (bit & 1);
            let y = base[1] + ((bit >> 1) & 1);
            let z = base[2] + ((bit >> 2) & 1);
            *slot = f64::from(self.get(x, y, z));
        }
        c
    }

    /// Inside-out copy (all values negated).
    pub fn negated(&self) -> Self {
        Self {
            dims: self.dims,
            truncation: self.truncation,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }

    /// Mean absolute voxel difference to another grid of the same dims.
    pub fn mean_abs_diff(&self, other: &TsdfGrid) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let total: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        Ok(total / self.values.len() as f64)
    }
}

pub(crate) fn trilinear(c: &[f64; 8], f: [f64; 3]) -> f64 {
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(c[0], c[1], f[0]);
    let x10 = lerp(c[2], c[3], f[0]);
    let x01 = lerp(c[4], c[5], f[0]);
    let x11 = lerp(c[6], c[7], f[0]);
    let y0 = lerp(x00, x10, f[1]);
    let y1 = lerp(x01, x11, f[1]);
    lerp(y0, y1, f[2])
}

pub(crate) fn trilinear_grad(c: &[f64; 8], f: [f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (bit, &v) in c.iter().enumerate() {
        let b = [bit & 1, (bit >> 1) & 1, (bit >> 2) & 1];
        let w = |a: usize| if b[a] == 1 { f[a] } else { 1.0 - f[a] };
        let dw = |a: usize| if b[a] == 1 { 1.0 } else { -1.0 };
        g[0] += v * dw(0) * w(1) * w(2);
        g[1] += v * w(0) * dw(1) * w(2);
        g[2] += v * w(0) * w(1) * dw(2);
    }
    g
}

/// Clamp raw distances to `[-threshold, threshold]`.
pub fn truncate_and_normalize(dims: [usize; 3], raw: &[f32], threshold: f32) -> Result<TsdfGrid> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("truncate_and_normalize"));
    }
    let values = raw.iter().map(|v| v.clamp(-threshold, threshold)).collect();
    TsdfGrid::new(dims, threshold, values)
}

use crate::error::{Error, Result};
use crate::shape::TsdfGrid;

/// Orthonormal DCT-II basis, `m[k * n + i] = s_k cos(π (2i + 1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Separable 3D orthonormal DCT-II of a cube of side `n` laid out x-fastest.
pub fn dct3(values: &[f64], n: usize) -> Result<Vec<f64>> {
    if values.len() != n * n * n {
        return Err(Error::invalid(format!("{} values for a {n}^3 cube", values.len())));
    }
    let m = dct_matrix(n);
    let mut cur = values.to_vec();
    let mut line = vec![0.0; n];
    for stride in [1, n, n * n] {
        let mut next = vec![0.0; cur.len()];
        for base in 0..cur.len() {
            // Visit each line once, from its first element.
            if (base / stride) % n != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = cur[base + i * stride];
            }
            for k in 0..n {
                let row = &m[k * n..(k + 1) * n];
                next[base + k * stride] = row.iter().zip(&line).map(|(a, b)| a * b).sum();
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Power per radial-frequency octave band.
///
/// Band 0 holds the DC coefficient; band `b >= 1` holds coefficients whose
/// index norm `r = |(kx, ky, kz)|` satisfies `2^(b-1) <= r < 2^b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Summed squared coefficients per band.
    pub band_power: Vec<f64>,
    /// Coefficients per band.
    pub band_count: Vec<usize>,
    /// `Σ coefficient²`.
    pub coefficient_energy: f64,
    /// `Σ sample²`.
    pub signal_energy: f64,
}

impl Spectrum {
    /// Mean per-coefficient power in each band.
    pub fn band_mean(&self) -> Vec<f64> {
        self.band_power
            .iter()
            .zip(&self.band_count)
            .map(|(&p, &c)| if c == 0 { 0.0 } else { p / c as f64 })
            .collect()
    }

    /// Mean per-coefficient power of the highest band.
    pub fn top_band_mean(&self) -> f64 {
        *self.band_mean().last().expect("at least the DC band")
    }

    /// `|Σc² - Σx²| / max(Σx², tiny)`.
    pub fn parseval_error(&self) -> f64 {
        (self.coefficient_energy - self.signal_energy).abs() / self.signal_energy.max(f64::MIN_POSITIVE)
    }
}

pub(crate) fn band_of(r: f64) -> usize {
    if r < 1.0 {
        0
    } else {
        r.log2().floor() as usize + 1
    }
}

/// DCT power spectrum of a cubic grid.
pub fn dct_psd(grid: &TsdfGrid) -> Result<Spectrum> {
    let [n, ny, nz] = grid.dims();
    if n != ny || n != nz {
        return Err(Error::invalid(format!("dct_psd needs a cubic grid, got {:?}", grid.dims())));
    }
    let x: Vec<f64> = grid.values().iter().map(|&v| f64::from(v)).collect();
    let c = dct3(&x, n)?;
    let rmax = (3.0f64).sqrt() * (n - 1) as f64;
    let bands = band_of(rmax) + 1;
    let mut band_power = vec![0.0; bands];
    let mut band_count = vec![0usize; bands];
    for (i, v) in c.iter().enumerate() {
        let (kx, ky, kz) = (i % n, (i / n) % n, i / (n * n));
        let r = ((kx * kx + ky * ky + kz * kz) as f64).sqrt();
        let b = band_of(r);
        band_power[b] += v * v;
        band_count[b] += 1;
    }
    Ok(Spectrum {
        band_power,
        band_count,
        coefficient_energy: c.iter().map(|v| v * v).sum(),
        signal_energy: x.iter().map(|v| v * v).sum(),
    })
}

//! WebAssembly bindings for the demo page: slice a generated TSDF, corrupt
//! its patch tokens along the forward chain, and show its DCT spectrum.

use voxdiff::diffusion::{build_schedule, forward_marginal, ScheduleKind};
use voxdiff::metrics::dct_psd;
use voxdiff::seed;
use voxdiff::shape::{generate_shape, ShapeSpec, TsdfGrid, DEFAULT_TRUNCATION};
use wasm_bindgen::prelude::*;

fn err(e: voxdiff::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn shape(class_label: u32, seed_value: u64, n: usize) -> Result<TsdfGrid, JsError> {
    if !(4..=64).contains(&n) {
        return Err(JsError::new("grid size must be in 4..=64"));
    }
    let mut rng = seed::rng(seed_value, "web-shape", 0);
    let spec = ShapeSpec::random(class_label % 3, &mut rng);
    generate_shape(&spec, [n; 3], DEFAULT_TRUNCATION).map_err(err)
}

/// TSDF values of a random shape of class `class_label` (0 box, 1 cylinder,
/// 2 union), x-fastest, `n³` entries.
#[wasm_bindgen]
pub fn shape_volume(class_label: u32, seed_value: u64, n: usize) -> Result<Vec<f32>, JsError> {
    Ok(shape(class_label, seed_value, n)?.values().to_vec())
}

/// Per-step schedule table, rows `t = 0..=T` of
/// `[keep_bar, gamma_bar, beta_bar]`, flattened.
#[wasm_bindgen]
pub fn schedule_table(t_max: usize, k: usize) -> Result<Vec<f64>, JsError> {
    let s = build_schedule(t_max, k, &ScheduleKind::LinearCumulative).map_err(err)?;
    Ok((0..=t_max)
        .flat_map(|t| [s.keep_bar(t), s.gamma_bar(t), s.beta_bar(t)])
        .collect())
}

/// Stand-in tokens for the demo: each patch's mean TSDF binned into `k`
/// levels. The trained codec is too large to ship to the page.
fn patch_tokens(grid: &TsdfGrid, edge: usize, k: usize) -> Vec<u32> {
    let n = grid.dims()[0];
    let per = n / edge;
    let tau = f64::from(grid.truncation());
    let mut out = Vec::with_capacity(per * per * per);
    for pz in 0..per {
        for py in 0..per {
            for px in 0..per {
                let mut sum = 0.0;
                for z in 0..edge {
                    for y in 0..edge {
                        for x in 0..edge {
                            sum += f64::from(grid.get(px * edge + x, py * edge + y, pz * edge + z));
                        }
                    }
                }
                let mean = sum / (edge * edge * edge) as f64;
                let level = ((mean + tau) / (2.0 * tau) * k as f64).floor();
                out.push(level.clamp(0.0, (k - 1) as f64) as u32);
            }
        }
    }
    out
}

/// Patch tokens of the shape after `t` forward steps; the mask is `k`.
/// Returns `t = 0` tokens followed by the corrupted ones.
#[wasm_bindgen]
pub fn corrupt_tokens(
    class_label: u32,
    seed_value: u64,
    n: usize,
    edge: usize,
    k: usize,
    t_max: usize,
    t: usize,
) -> Result<Vec<u32>, JsError> {
    if edge == 0 || n % edge != 0 || k < 2 {
        return Err(JsError::new("patch edge must divide the grid and K >= 2"));
    }
    let grid = shape(class_label, seed_value, n)?;
    let clean = patch_tokens(&grid, edge, k);
    let s = build_schedule(t_max, k, &ScheduleKind::LinearCumulative).map_err(err)?;
    let noisy = if t == 0 {
        clean.clone()
    } else {
        let mut rng = seed::rng(seed_value, "web-corrupt", t as u64);
        forward_marginal(&s, &clean, t, &mut rng).map_err(err)?
    };
    Ok(clean.into_iter().chain(noisy).collect())
}

/// Mean DCT power per octave band of the shape, followed by the Parseval
/// relative error.
#[wasm_bindgen]
pub fn spectrum(class_label: u32, seed_value: u64, n: usize) -> Result<Vec<f64>, JsError> {
    let s = dct_psd(&shape(class_label, seed_value, n)?).map_err(err)?;
    let mut v = s.band_mean();
    v.push(s.parseval_error());
    Ok(v)
}

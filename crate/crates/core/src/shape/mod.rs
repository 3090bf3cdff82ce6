//! Truncated signed-distance grids and the procedural shape corpus.

mod grid;
mod solid;
mod surface;

use std::io::Write;
use std::path::Path;

pub use grid::{truncate_and_normalize, TsdfGrid};
pub use solid::{ShapeKind, ShapeSpec, Solid, SHAPE_BOUND};
pub use surface::{crossing_cells, sample_surface_points, SurfacePointSet};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::seed;

pub const TSDF_MAGIC: &str = "TSDF1";
pub const DEFAULT_TRUNCATION: f32 = 0.2;

/// Sample the solid's signed distance at every voxel center and clamp to ±τ.
pub fn generate_shape(spec: &ShapeSpec, dims: [usize; 3], truncation: f32) -> Result<TsdfGrid> {
    spec.validate()?;
    if !(truncation > 0.0) {
        return Err(Error::invalid(format!("truncation must be positive, got {truncation}")));
    }
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!("grid dims must be >= 2, got {dims:?}")));
    }
    let probe = TsdfGrid::from_parts_unchecked(dims, truncation, Vec::new());
    let mut raw = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                raw.push(spec.solid.sdf(probe.voxel_center(x, y, z)) as f32);
            }
        }
    }
    truncate_and_normalize(dims, &raw, truncation)
}

/// A shape with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledShape {
    pub grid: TsdfGrid,
    pub class_label: u32,
}

/// Shape `i` gets class `i % classes` and its own derived seed, so the corpus
/// does not depend on generation order.
pub fn make_corpus(
    count: usize,
    classes: u32,
    dims: [usize; 3],
    truncation: f32,
    seed_value: u64,
) -> Result<Vec<LabeledShape>> {
    if count == 0 || classes == 0 {
        return Err(Error::invalid("corpus needs count >= 1 and classes >= 1"));
    }
    (0..count)
        .map(|i| {
            let label = (i % classes as usize) as u32;
            let mut rng = seed::rng(seed_value, "corpus-shape", i as u64);
            let spec = ShapeSpec::random(label, &mut rng);
            Ok(LabeledShape {
                grid: generate_shape(&spec, dims, truncation)?,
                class_label: label,
            })
        })
        .collect()
}

pub fn encode_tsdf(grid: &TsdfGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + 4 * grid.len());
    binio::write_magic(&mut out, b"TSDF1")?;
    for d in grid.dims() {
        binio::write_u32(&mut out, d as u32)?;
    }
    binio::write_f32(&mut out, grid.truncation())?;
    for &v in grid.values() {
        binio::write_f32(&mut out, v)?;
    }
    Ok(out)
}

pub fn decode_tsdf(path: &Path, bytes: &[u8]) -> Result<TsdfGrid> {
    let mut r = Reader::new(path, bytes);
    r.expect_magic(TSDF_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let truncation = r.f32()?;
    let n: usize = dims.iter().product();
    let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    TsdfGrid::new(dims, truncation, values).map_err(|e| r.err(e.to_string()))
}

pub fn save_tsdf(path: &Path, grid: &TsdfGrid) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_tsdf(grid)?)?;
    Ok(())
}

pub fn load_tsdf(path: &Path) -> Result<TsdfGrid> {
    decode_tsdf(path, &binio::read_file(path)?)
}

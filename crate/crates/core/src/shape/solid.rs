use rand::Rng;

use crate::error::{Error, Result};

/// Everything generated must stay strictly inside this half-width.
pub const SHAPE_BOUND: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Box,
    Cylinder,
    UnionOfTwo,
}

/// Analytic solid. Cylinders stand along +z.
#[derive(Clone, Debug, PartialEq)]
pub enum Solid {
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_height: f64,
    },
    Union(Box<Solid>, Box<Solid>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub solid: Solid,
    pub class_label: u32,
}

impl Solid {
    pub fn cube(half: f64) -> Self {
        Solid::Box {
            center: [0.0; 3],
            half: [half; 3],
        }
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            Solid::Box { .. } => ShapeKind::Box,
            Solid::Cylinder { .. } => ShapeKind::Cylinder,
            Solid::Union(..) => ShapeKind::UnionOfTwo,
        }
    }

    /// Exact signed distance (negative inside).
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Solid::Box { center, half } => {
                let q: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]).abs() - half[a]);
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Solid::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let r = (dx * dx + dy * dy).sqrt() - radius;
                let h = (p[2] - center[2]).abs() - half_height;
                let outside = (r.max(0.0).powi(2) + h.max(0.0).powi(2)).sqrt();
                outside + r.max(h).min(0.0)
            }
            // Min of two SDFs is exact outside and a lower bound on depth inside,
            // which is all the truncated representation keeps anyway.
            Solid::Union(a, b) => a.sdf(p).min(b.sdf(p)),
        }
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Solid::Box { center, half } => (
                std::array::from_fn(|a| center[a] - half[a]),
                std::array::from_fn(|a| center[a] + half[a]),
            ),
            Solid::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let ext = [*radius, *radius, *half_height];
                (
                    std::array::from_fn(|a| center[a] - ext[a]),
                    std::array::from_fn(|a| center[a] + ext[a]),
                )
            }
            Solid::Union(a, b) => {
                let (lo1, hi1) = a.bounds();
                let (lo2, hi2) = b.bounds();
                (
                    std::array::from_fn(|i| lo1[i].min(lo2[i])),
                    std::array::from_fn(|i| hi1[i].max(hi2[i])),
                )
            }
        }
    }

    fn check_params(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Solid::Box { center, half } => {
                if !half.iter().all(|&h| ok(h)) || !center.iter().all(|c| c.is_finite()) {
                    return Err(Error::ShapeOutOfBounds(format!("degenerate box {self:?}")));
                }
            }
            Solid::Cylinder {
                center,
                radius,
                half_height,
            } => {
                if !ok(*radius) || !ok(*half_height) || !center.iter().all(|c| c.is_finite()) {
                    return Err(Error::ShapeOutOfBounds(format!("degenerate cylinder {self:?}")));
                }
            }
            Solid::Union(a, b) => {
                a.check_params()?;
                b.check_params()?;
            }
        }
        Ok(())
    }
}

impl ShapeSpec {
    pub fn kind(&self) -> ShapeKind {
        self.solid.kind()
    }

    /// Reject degenerate parameters and solids reaching outside `[-0.9, 0.9]^3`.
    pub fn validate(&self) -> Result<()> {
        self.solid.check_params()?;
        let (lo, hi) = self.solid.bounds();
        if lo.iter().any(|&v| v <= -SHAPE_BOUND) || hi.iter().any(|&v| v >= SHAPE_BOUND) {
            return Err(Error::ShapeOutOfBounds(format!(
                "bounds {lo:?}..{hi:?} leave the ±{SHAPE_BOUND} cube"
            )));
        }
        Ok(())
    }

    /// Draw a random spec for `class_label`. The kind cycles with the label;
    /// labels past the third get progressively smaller parts so classes stay
    /// distinguishable.
    pub fn random(class_label: u32, rng: &mut impl Rng) -> Self {
        let band = (class_label / 3) as f64;
        let s = 1.0 / (1.0 + 0.35 * band);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let solid = match class_label % 3 {
            0 => {
                let half = [u(0.3, 0.65) * s, u(0.3, 0.65) * s, u(0.3, 0.65) * s];
                let center = half.map(|h| (0.8 - h).min(0.1) * u(-1.0, 1.0));
                Solid::Box { center, half }
            }
            1 => {
                let radius = u(0.3, 0.6) * s;
                let half_height = u(0.35, 0.7) * s;
                let center = [
                    (0.8 - radius).min(0.1) * u(-1.0, 1.0),
                    (0.8 - radius).min(0.1) * u(-1.0, 1.0),
                    (0.8 - half_height).min(0.1) * u(-1.0, 1.0),
                ];
                Solid::Cylinder {
                    center,
                    radius,
                    half_height,
                }
            }
            _ => {
                // Table-like: a slab resting on a central column.
                let top = u(0.45, 0.75);
                let slab_half = u(0.08, 0.15);
                let slab = Solid::Box {
                    center: [0.0, 0.0, top - slab_half],
                    half: [u(0.45, 0.75) * s, u(0.45, 0.75) * s, slab_half],
                };
                let bottom = -u(0.45, 0.75);
                let col_top = top - slab_half;
                let column = Solid::Cylinder {
                    center: [0.0, 0.0, 0.5 * (bottom + col_top)],
                    radius: u(0.12, 0.25) * s,
                    half_height: 0.5 * (col_top - bottom),
                };
                Solid::Union(Box::new(slab), Box::new(column))
            }
        };
        Self { solid, class_label }
    }
}

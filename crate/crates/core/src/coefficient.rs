//! Multiscale coefficients `α(x, s) = Σᵢ cᵢ(x) kᵢ(s)`.
//!
//! The spatial factors are piecewise constant on the fine elements; the
//! nonlinear factors are scalar functions of the solution value.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LodError, Result};
use crate::fem::{NodalVector, Region};
use crate::io::{put_f64s, put_u32, to_u32, write_atomic, Reader};
use crate::mesh::StructuredMesh;

pub const FIELD_MAGIC: &[u8; 4] = b"LODF";
pub const FIELD_VERSION: u32 = 1;

/// High-contrast inclusion painted over the random background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub region: Region,
    pub value: f64,
}

/// Recipe for a random ε-periodic-cell field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub seed: u64,
    /// Number of ε-cells per side.
    pub eps_cells: usize,
    pub base_range: (f64, f64),
    pub channel: Option<Channel>,
}

impl FieldSpec {
    /// Background in `[0.05, 1]` on a 64×64 cell grid with a channel of value
    /// 50 across `[0.5, 1] × [0.05, 0.15]`.
    pub fn experiment_default() -> Self {
        Self {
            seed: 42,
            eps_cells: 64,
            base_range: (0.05, 1.0),
            channel: Some(Channel {
                region: Region { x: (0.5, 1.0), y: (0.05, 0.15) },
                value: 50.0,
            }),
        }
    }

    /// Lower-contrast companion used as the first term of combined models.
    pub fn experiment_secondary() -> Self {
        Self {
            seed: 7,
            eps_cells: 64,
            base_range: (0.1, 1.0),
            channel: Some(Channel {
                region: Region { x: (0.5, 1.0), y: (0.05, 0.15) },
                value: 5.0,
            }),
        }
    }
}

/// Per-fine-element positive values `c(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    mesh: StructuredMesh,
    values: Vec<f64>,
}

impl SpatialField {
    pub fn new(mesh: StructuredMesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.element_count() {
            return Err(invalid(format!(
                "field needs {} element values, got {}",
                mesh.element_count(),
                values.len()
            )));
        }
        if let Some(e) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid(format!("field value {} on element {e} is not positive", values[e])));
        }
        Ok(Self { mesh, values })
    }

    pub fn constant(mesh: StructuredMesh, value: f64) -> Result<Self> {
        Self::new(mesh, vec![value; mesh.element_count()])
    }

    /// Draws a log-uniform value per ε-cell, then overwrites the cells that
    /// overlap the channel with positive area.
    pub fn generate(mesh: StructuredMesh, spec: &FieldSpec) -> Result<Self> {
        let (lo, hi) = spec.base_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid(format!("base range ({lo}, {hi}) must be positive and ordered")));
        }
        if spec.eps_cells == 0 || mesh.n() % spec.eps_cells != 0 {
            return Err(invalid(format!(
                "{} ε-cells per side do not divide the {}-element mesh",
                spec.eps_cells,
                mesh.n()
            )));
        }
        let cells = spec.eps_cells;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (llo, lhi) = (lo.ln(), hi.ln());
        let mut cell_values: Vec<f64> = (0..cells * cells)
            .map(|_| {
                let t: f64 = rng.random();
                if lo == hi {
                    lo
                } else {
                    (llo + t * (lhi - llo)).exp()
                }
            })
            .collect();
        if let Some(ch) = &spec.channel {
            if !(ch.value > 0.0) {
                return Err(invalid("channel value must be positive"));
            }
            let w = 1.0 / cells as f64;
            for cj in 0..cells {
                for ci in 0..cells {
                    let (x0, y0) = (ci as f64 * w, cj as f64 * w);
                    let overlaps = x0 < ch.region.x.1
                        && x0 + w > ch.region.x.0
                        && y0 < ch.region.y.1
                        && y0 + w > ch.region.y.0;
                    if overlaps {
                        cell_values[cj * cells + ci] = ch.value;
                    }
                }
            }
        }
        let per_cell = mesh.n() / cells;
        let values = (0..mesh.element_count())
            .map(|e| {
                let (i, j) = mesh.element_coords(e);
                cell_values[(j / per_cell) * cells + i / per_cell]
            })
            .collect();
        Self::new(mesh, values)
    }

    pub fn mesh(&self) -> &StructuredMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    /// Serialized `LODF` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.values.len());
        buf.extend_from_slice(FIELD_MAGIC);
        put_u32(&mut buf, FIELD_VERSION);
        put_u32(&mut buf, self.mesh.n() as u32);
        put_f64s(&mut buf, &self.values);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(FIELD_MAGIC)?;
        let version = r.u32()?;
        if version != FIELD_VERSION {
            return Err(LodError::Format(format!("unsupported field version {version}")));
        }
        let n = r.u32()? as usize;
        let mesh = StructuredMesh::new(n)?;
        let values = r.f64s(n * n)?;
        r.finish()?;
        Self::new(mesh, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        to_u32(self.mesh.n(), "mesh size")?;
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Scalar nonlinearity `k(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearModel {
    /// `k ≡ 1`; turns the problem linear.
    Constant,
    /// `k(s) = exp(rate · s)`.
    Exponential { rate: f64 },
    /// `k(s) = (1 + t/√(1+t²))² / (1+t²)` with `t = a|s|`.
    VanGenuchten { a: f64 },
    /// `k(s) = 1 + s²`.
    Quadratic,
}

/// Bounds observed on a sample of `s` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledBounds {
    /// Smallest observed `k`.
    pub lower: f64,
    /// Largest observed `k`.
    pub upper: f64,
    /// Largest observed `|k′|`, a Lipschitz estimate on the sampled interval.
    pub lipschitz: f64,
}

impl NonlinearModel {
    pub const EXP4: Self = Self::Exponential { rate: 4.0 };
    pub const EXP2: Self = Self::Exponential { rate: 2.0 };
    pub const VAN_GENUCHTEN: Self = Self::VanGenuchten { a: 0.005 };

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant)
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        let v = match *self {
            Self::Constant => 1.0,
            Self::Exponential { rate } => (rate * s).exp(),
            Self::VanGenuchten { a } => {
                let t = a * s.abs();
                let w = 1.0 + t * t;
                (1.0 + t / w.sqrt()).powi(2) / w
            }
            Self::Quadratic => 1.0 + s * s,
        };
        finite(v, s)
    }

    pub fn derivative(&self, s: f64) -> Result<f64> {
        let v = match *self {
            Self::Constant => 0.0,
            Self::Exponential { rate } => rate * (rate * s).exp(),
            Self::VanGenuchten { a } => {
                // sign(0) = 0 picks the symmetric value at the kink.
                let sign = if s > 0.0 {
                    1.0
                } else if s < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                sign * a * vg_profile_derivative(a * s.abs())
            }
            Self::Quadratic => 2.0 * s,
        };
        finite(v, s)
    }

    /// Second derivative; the Van Genuchten branch differentiates `k′`
    /// numerically away from the kink.
    pub fn second_derivative(&self, s: f64) -> Result<f64> {
        let v = match *self {
            Self::Constant => 0.0,
            Self::Exponential { rate } => rate * rate * (rate * s).exp(),
            Self::VanGenuchten { a } => {
                let t = a * s.abs();
                let step = 1e-5 * (1.0 + t);
                a * a * (vg_profile_derivative(t + step) - vg_profile_derivative((t - step).abs()))
                    / (t + step - (t - step).abs())
            }
            Self::Quadratic => 2.0,
        };
        finite(v, s)
    }

    pub fn sampled_bounds(&self, lo: f64, hi: f64, samples: usize) -> Result<SampledBounds> {
        let mut b = SampledBounds { lower: f64::INFINITY, upper: f64::NEG_INFINITY, lipschitz: 0.0 };
        let count = samples.max(2);
        for i in 0..count {
            let s = lo + (hi - lo) * i as f64 / (count - 1) as f64;
            let k = self.eval(s)?;
            b.lower = b.lower.min(k);
            b.upper = b.upper.max(k);
            b.lipschitz = b.lipschitz.max(self.derivative(s)?.abs());
        }
        Ok(b)
    }
}

fn vg_profile_derivative(t: f64) -> f64 {
    let w = 1.0 + t * t;
    let r = t / w.sqrt();
    let num = (1.0 + r) * (1.0 + r);
    let num_d = 2.0 * (1.0 + r) * w.powf(-1.5);
    num_d / w - num * 2.0 * t / (w * w)
}

fn finite(v: f64, s: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LodError::Overflow(s))
    }
}

/// `α(x, s) = Σᵢ cᵢ(x) kᵢ(s)` on a fine mesh.
#[derive(Debug, Clone)]
pub struct CombinedCoefficient {
    terms: Vec<(Arc<SpatialField>, NonlinearModel)>,
}

impl CombinedCoefficient {
    pub fn new(terms: Vec<(Arc<SpatialField>, NonlinearModel)>) -> Result<Self> {
        let Some((first, _)) = terms.first() else {
            return Err(invalid("a coefficient needs at least one term"));
        };
        let mesh = *first.mesh();
        if terms.iter().any(|(f, _)| *f.mesh() != mesh) {
            return Err(invalid("all spatial fields must share the fine mesh"));
        }
        Ok(Self { terms })
    }

    pub fn single(field: Arc<SpatialField>, model: NonlinearModel) -> Self {
        Self { terms: vec![(field, model)] }
    }

    pub fn terms(&self) -> &[(Arc<SpatialField>, NonlinearModel)] {
        &self.terms
    }

    pub fn mesh(&self) -> &StructuredMesh {
        self.terms[0].0.mesh()
    }

    /// True when `α` does not depend on `s`.
    pub fn is_state_independent(&self) -> bool {
        self.terms.iter().all(|(_, m)| m.is_constant())
    }

    pub fn alpha(&self, element: usize, s: f64) -> Result<f64> {
        self.terms
            .iter()
            .try_fold(0.0, |acc, (c, k)| Ok(acc + c.values()[element] * k.eval(s)?))
    }

    pub fn alpha_s(&self, element: usize, s: f64) -> Result<f64> {
        self.terms
            .iter()
            .try_fold(0.0, |acc, (c, k)| Ok(acc + c.values()[element] * k.derivative(s)?))
    }

    pub fn alpha_ss(&self, element: usize, s: f64) -> Result<f64> {
        self.terms
            .iter()
            .try_fold(0.0, |acc, (c, k)| Ok(acc + c.values()[element] * k.second_derivative(s)?))
    }

    fn check_vector(&self, v: &NodalVector) -> Result<()> {
        if v.mesh() != self.mesh() {
            return Err(invalid(format!(
                "vector on n={} but coefficient on n={}",
                v.mesh().n(),
                self.mesh().n()
            )));
        }
        Ok(())
    }

    /// `α(x_K, v(x_K))` at each fine element midpoint.
    pub fn elementwise_alpha(&self, v: &NodalVector) -> Result<Vec<f64>> {
        self.check_vector(v)?;
        v.element_midpoint_values()
            .into_iter()
            .enumerate()
            .map(|(e, s)| self.alpha(e, s))
            .collect()
    }

    /// `α_s(x_K, v(x_K))` at each fine element midpoint.
    pub fn elementwise_alpha_s(&self, v: &NodalVector) -> Result<Vec<f64>> {
        self.check_vector(v)?;
        v.element_midpoint_values()
            .into_iter()
            .enumerate()
            .map(|(e, s)| self.alpha_s(e, s))
            .collect()
    }

    /// Bytes identifying the coefficient: every field file followed by the
    /// model descriptors.
    pub fn fingerprint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for (c, k) in &self.terms {
            buf.extend_from_slice(&c.to_bytes());
            buf.extend_from_slice(format!("{k:?}").as_bytes());
        }
        buf
    }
}

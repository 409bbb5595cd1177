use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficient::{CombinedCoefficient, FieldSpec, NonlinearModel, SpatialField};
use crate::corrector::Linearization;
use crate::error::{invalid, LodError, Result};
use crate::fem::PiecewiseSource;
use crate::mesh::StructuredMesh;
use crate::solver::{IterationOptions, TestSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Exp4,
    Exp2,
    Vg,
    /// `c₁ k₁ + c₂ k₂`, two Van Genuchten laws.
    CombinedVg,
    /// `c₁ k₁ + c₂ exp(2u)`.
    CombinedExpVg,
    /// `k ≡ 1`.
    Linear,
}

impl ModelId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exp4 => "exp4",
            Self::Exp2 => "exp2",
            Self::Vg => "vg",
            Self::CombinedVg => "combined_vg",
            Self::CombinedExpVg => "combined_exp_vg",
            Self::Linear => "linear",
        }
    }

    /// Van Genuchten law with `a = 5` used as the first term of combined models.
    pub const STEEP_VG: NonlinearModel = NonlinearModel::VanGenuchten { a: 5.0 };

    /// Builds `α(x, s)` on `fine`; `seed` drives the main field.
    pub fn coefficient(self, fine: StructuredMesh, seed: u64) -> Result<CombinedCoefficient> {
        let main = Arc::new(SpatialField::generate(fine, &FieldSpec { seed, ..FieldSpec::experiment_default() })?);
        let single = |m| Ok(CombinedCoefficient::single(main.clone(), m));
        match self {
            Self::Exp4 => single(NonlinearModel::EXP4),
            Self::Exp2 => single(NonlinearModel::EXP2),
            Self::Vg => single(NonlinearModel::VAN_GENUCHTEN),
            Self::Linear => single(NonlinearModel::Constant),
            Self::CombinedVg | Self::CombinedExpVg => {
                let secondary = Arc::new(SpatialField::generate(fine, &FieldSpec::experiment_secondary())?);
                let second = if self == Self::CombinedVg { NonlinearModel::VAN_GENUCHTEN } else { NonlinearModel::EXP2 };
                CombinedCoefficient::new(vec![(secondary, Self::STEEP_VG), (main, second)])
            }
        }
    }
}

impl FromStr for ModelId {
    type Err = LodError;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Exp4, Self::Exp2, Self::Vg, Self::CombinedVg, Self::CombinedExpVg, Self::Linear]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsId {
    /// 0.1 for `x₂ ≤ 0.1`, 1 above.
    Default,
    /// 100 for `x₂ ≤ 0.25`, 2 above.
    Exp1,
}

impl RhsId {
    pub fn source(self) -> PiecewiseSource {
        match self {
            Self::Default => PiecewiseSource::horizontal_split(0.1, 0.1, 1.0),
            Self::Exp1 => PiecewiseSource::horizontal_split(0.25, 100.0, 2.0),
        }
    }
}

impl FromStr for RhsId {
    type Err = LodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "exp1" => Ok(Self::Exp1),
            other => Err(invalid(format!("unknown right-hand side `{other}`"))),
        }
    }
}

/// Where the correctors are linearized.
///
/// Text forms: `zero`, `g`, `g1`, `coarse_fem(32)` (or `coarse_fem(1/32)`),
/// `reference`, `ulod` (short for `ulod(16;4;g1)`) and `ulod(n;k;<inner>)`.
/// Commas work in place of semicolons when parsing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PStarSpec {
    Zero,
    /// `10 x y² (1−x)(1−y)`.
    G,
    /// `0.5 x y² (1−x)(1−y) e^{5(x+y)}`.
    G1,
    /// Coarse finite element solution with `n` elements per side.
    CoarseFem(usize),
    /// The fine reference solution.
    Reference,
    /// Kačanov LOD solution on `n` coarse elements with `k` layers,
    /// itself linearized at `inner`.
    Ulod { coarse_n: usize, k: usize, inner: Box<PStarSpec> },
}

impl PStarSpec {
    pub fn g(x: f64, y: f64) -> f64 {
        10.0 * x * y * y * (1.0 - x) * (1.0 - y)
    }

    pub fn g1(x: f64, y: f64) -> f64 {
        0.5 * x * y * y * (1.0 - x) * (1.0 - y) * (5.0 * (x + y)).exp()
    }
}

impl fmt::Display for PStarSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::G => f.write_str("g"),
            Self::G1 => f.write_str("g1"),
            Self::CoarseFem(n) => write!(f, "coarse_fem({n})"),
            Self::Reference => f.write_str("reference"),
            Self::Ulod { coarse_n, k, inner } => write!(f, "ulod({coarse_n};{k};{inner})"),
        }
    }
}

fn parse_n(s: &str) -> Result<usize> {
    let s = s.trim();
    let digits = s.strip_prefix("1/").unwrap_or(s);
    digits.parse().map_err(|_| invalid(format!("expected an element count, got `{s}`")))
}

impl FromStr for PStarSpec {
    type Err = LodError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "zero" => return Ok(Self::Zero),
            "g" => return Ok(Self::G),
            "g1" => return Ok(Self::G1),
            "reference" => return Ok(Self::Reference),
            "ulod" => return Ok(Self::Ulod { coarse_n: 16, k: 4, inner: Box::new(Self::G1) }),
            _ => {}
        }
        let (name, args) = s
            .strip_suffix(')')
            .and_then(|r| r.split_once('('))
            .ok_or_else(|| invalid(format!("unknown linearization point `{s}`")))?;
        match name {
            "coarse_fem" => Ok(Self::CoarseFem(parse_n(args)?)),
            "ulod" => {
                let mut parts = args.splitn(3, [',', ';']);
                let mut next = || parts.next().ok_or_else(|| invalid(format!("`{s}` needs three arguments")));
                let coarse_n = parse_n(next()?)?;
                let k = next()?.trim().parse().map_err(|_| invalid(format!("bad k in `{s}`")))?;
                let inner = Box::new(next()?.parse()?);
                Ok(Self::Ulod { coarse_n, k, inner })
            }
            _ => Err(invalid(format!("unknown linearization point `{s}`"))),
        }
    }
}

impl TryFrom<String> for PStarSpec {
    type Error = LodError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PStarSpec> for String {
    fn from(p: PStarSpec) -> String {
        p.to_string()
    }
}

/// One experiment. Every field has a default, so a config file may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelId,
    pub rhs: RhsId,
    pub fine_n: usize,
    pub coarse_n: Vec<usize>,
    pub k: Vec<usize>,
    pub linearization: Linearization,
    pub test_space: TestSpace,
    pub p_star: PStarSpec,
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration cap of the fine reference solve, which must be converged to
    /// serve as the truth even where the multiscale solves are capped lower.
    pub reference_max_iter: usize,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Write measured times into the `wall_ms` column. Off by default so that
    /// tables are reproducible byte for byte; times always go to a sidecar file.
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelId::Exp2,
            rhs: RhsId::Default,
            fine_n: 128,
            coarse_n: vec![2, 4, 8, 16, 32, 64],
            k: vec![1, 2, 3, 4],
            linearization: Linearization::Kacanov,
            test_space: TestSpace::Galerkin,
            p_star: PStarSpec::Zero,
            tol: 1e-12,
            max_iter: 10,
            reference_max_iter: 100,
            seed: 42,
            cache_dir: None,
            output_dir: PathBuf::from("out"),
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    /// Settings of the iteration-count experiment.
    pub fn iteration_default() -> Self {
        Self { model: ModelId::Exp4, rhs: RhsId::Exp1, k: vec![4], ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_n == 0 || self.coarse_n.is_empty() || self.k.is_empty() {
            return Err(invalid("fine_n, coarse_n and k must be non-empty"));
        }
        if let Some(&n) = self.coarse_n.iter().find(|&&n| n == 0 || self.fine_n % n != 0) {
            return Err(invalid(format!("coarse n {n} does not divide fine n {}", self.fine_n)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 || self.reference_max_iter == 0 {
            return Err(invalid("tol must be positive and iteration caps at least 1"));
        }
        let mut spec = &self.p_star;
        loop {
            match spec {
                PStarSpec::CoarseFem(n) | PStarSpec::Ulod { coarse_n: n, .. } if *n == 0 || self.fine_n % n != 0 => {
                    return Err(invalid(format!("linearization point mesh {n} does not divide fine n")));
                }
                PStarSpec::Ulod { inner, .. } => spec = inner,
                _ => break,
            }
        }
        Ok(())
    }

    pub fn options(&self) -> IterationOptions {
        IterationOptions { tol: self.tol, max_iter: self.max_iter }
    }

    pub fn reference_options(&self) -> IterationOptions {
        IterationOptions { tol: self.tol, max_iter: self.reference_max_iter }
    }

    pub fn fine_mesh(&self) -> Result<StructuredMesh> {
        StructuredMesh::new(self.fine_n)
    }
}

//! Kačanov fixed-point solvers on the fine space and on the multiscale space.

use std::path::Path;
use std::time::Instant;

use faer::sparse::Triplet;

use crate::coefficient::CombinedCoefficient;
use crate::corrector::{build_linearization, CorrectorSet, Linearization, LinearizationData};
use crate::error::{invalid, LodError, Result};
use crate::fem::{assemble_stiffness, h1_seminorm, NodalVector, Scale, SparseOperator};
use crate::interpolation::TransferOperators;
use crate::io::{put_f64s, put_u32, to_u32, Reader};
use crate::linalg::{norm2, SparseFactor};
use crate::mesh::StructuredMesh;

pub const SOLUTION_MAGIC: &[u8; 4] = b"LODU";
pub const SOLUTION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationOptions {
    /// Relative Euclidean increment at which the iteration stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSpace {
    /// Test with the multiscale basis itself.
    Galerkin,
    /// Test with the coarse hats.
    PetrovGalerkin,
}

impl std::str::FromStr for TestSpace {
    type Err = LodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "galerkin" => Ok(Self::Galerkin),
            "petrov_galerkin" | "petrov-galerkin" | "pg" => Ok(Self::PetrovGalerkin),
            other => Err(invalid(format!("unknown test space `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    /// Number of linear solves performed.
    pub iterations: usize,
    /// Relative increment after each solve.
    pub increments: Vec<f64>,
    /// Relative H¹ error of `u0, u1, …` against a supplied reference.
    pub errors: Vec<f64>,
    pub converged: bool,
    pub wall_ms: f64,
}

impl SolveTrace {
    pub fn last_increment(&self) -> Option<f64> {
        self.increments.last().copied()
    }
}

fn relative_increment(new: &[f64], old: &[f64]) -> f64 {
    let diff: Vec<f64> = new.iter().zip(old).map(|(a, b)| a - b).collect();
    let d = norm2(&diff);
    if d == 0.0 {
        0.0
    } else {
        d / norm2(new).max(f64::MIN_POSITIVE)
    }
}

fn relative_h1(u: &NodalVector, reference: &NodalVector) -> Result<f64> {
    let denom = h1_seminorm(reference);
    if denom == 0.0 {
        return Err(invalid("reference solution is zero"));
    }
    Ok(h1_seminorm(&u.axpy(-1.0, reference)?) / denom)
}

fn free_stiffness(coeff: &CombinedCoefficient, u: &NodalVector) -> Result<SparseOperator> {
    let mesh = *u.mesh();
    let alpha = coeff.elementwise_alpha(u)?;
    if let Some((element, &value)) = alpha.iter().enumerate().find(|(_, a)| !(**a > 0.0)) {
        return Err(LodError::Ellipticity { element, value });
    }
    assemble_stiffness(&mesh, &alpha)?.restrict_free(&mesh)
}

fn check_load(mesh: &StructuredMesh, load: &NodalVector) -> Result<Vec<f64>> {
    if load.mesh() != mesh {
        return Err(invalid("load vector is not on the fine mesh"));
    }
    Ok(load.free_values())
}

/// Fine-scale Kačanov iteration: `u^{n+1}` solves `A(u^n) u^{n+1} = b`.
///
/// `load` holds `∫ f φ_i` for every fine node. A coefficient that does not
/// depend on the state is solved once.
pub fn solve_reference(
    coeff: &CombinedCoefficient,
    load: &NodalVector,
    options: IterationOptions,
    u0: &NodalVector,
) -> Result<(NodalVector, SolveTrace)> {
    let start = Instant::now();
    let mesh = *coeff.mesh();
    if u0.mesh() != &mesh {
        return Err(invalid("initial guess is not on the fine mesh"));
    }
    validate(options)?;
    let b = check_load(&mesh, load)?;
    let mut trace = SolveTrace::default();
    let mut u = u0.clone();
    for n in 1..=options.max_iter {
        let a = free_stiffness(coeff, &u)?;
        let x = SparseFactor::new(&a)?.solve_vec(&b)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LodError::NonFinite(n));
        }
        let inc = relative_increment(&x, &u.free_values());
        u = NodalVector::from_free(mesh, Scale::Fine, &x)?;
        trace.iterations = n;
        trace.increments.push(inc);
        if inc <= options.tol || coeff.is_state_independent() {
            trace.converged = true;
            break;
        }
    }
    trace.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((u, trace))
}

fn validate(options: IterationOptions) -> Result<()> {
    if !(options.tol > 0.0) || options.max_iter == 0 {
        return Err(invalid("tolerance must be positive and max_iter at least 1"));
    }
    Ok(())
}

/// The multiscale basis `φ_ℓ − Q^k φ_ℓ` over fine free nodes.
#[derive(Debug, Clone)]
pub struct MultiscaleBasis {
    /// Fine free × coarse free.
    phi: SparseOperator,
    /// Prolonged coarse hats, fine free × coarse free.
    hats: SparseOperator,
    fine: StructuredMesh,
    coarse: StructuredMesh,
    pub k: usize,
    pub kind: Linearization,
    pub fingerprint: [u8; 32],
}

impl MultiscaleBasis {
    pub fn new(transfer: &TransferOperators, correctors: &CorrectorSet) -> Result<Self> {
        let pair = *transfer.pair();
        if correctors.pair != pair {
            return Err(invalid("corrector set belongs to a different mesh pair"));
        }
        let hats = transfer.prolongation_free()?;
        let mut triplets = Vec::new();
        for (i, j, v) in hats.triplets() {
            triplets.push(Triplet::new(i, j, v));
        }
        for (l, q) in correctors.correctors.iter().enumerate() {
            for (&i, &v) in q.indices.iter().zip(&q.values) {
                triplets.push(Triplet::new(i, l, -v));
            }
        }
        let phi = SparseOperator::from_triplets(hats.nrows(), hats.ncols(), &triplets, false)?;
        Ok(Self {
            phi,
            hats,
            fine: pair.fine,
            coarse: pair.coarse,
            k: correctors.k,
            kind: correctors.kind,
            fingerprint: correctors.fingerprint,
        })
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &SparseOperator {
        &self.phi
    }

    pub fn fine(&self) -> &StructuredMesh {
        &self.fine
    }

    pub fn coarse(&self) -> &StructuredMesh {
        &self.coarse
    }

    /// `Σ_ℓ c_ℓ (φ_ℓ − Q^k φ_ℓ)` on the fine mesh.
    pub fn expand(&self, coefficients: &[f64]) -> Result<NodalVector> {
        if coefficients.len() != self.dim() {
            return Err(invalid("coefficient vector has the wrong length"));
        }
        NodalVector::from_free(self.fine, Scale::Fine, &self.phi.apply(coefficients))
    }

    /// Basis vector `ℓ` on the fine mesh.
    pub fn vector(&self, l: usize) -> Result<NodalVector> {
        let mut c = vec![0.0; self.dim()];
        c[l] = 1.0;
        self.expand(&c)
    }

    /// Reduced matrix `Tᵀ A Φ` and load `Tᵀ b` for the chosen test space.
    pub fn reduce(&self, a: &SparseOperator, b: &[f64], mode: TestSpace) -> Result<(SparseOperator, Vec<f64>)> {
        let a_phi = a.matmul(&self.phi)?;
        let test = match mode {
            TestSpace::Galerkin => &self.phi,
            TestSpace::PetrovGalerkin => &self.hats,
        };
        let mut reduced = test.transpose().matmul(&a_phi)?;
        if mode == TestSpace::Galerkin && a.is_symmetric() {
            reduced = reduced.assume_symmetric();
        }
        Ok((reduced, test.apply_transpose(b)))
    }
}

/// Kačanov iteration on the multiscale space. The starting coefficients are
/// the L² projection of `u0` onto the coarse space; the stopping rule uses
/// the relative increment of the coefficient vector. When `reference` is
/// given, the relative H¹ error of every iterate (including `u0`) is recorded.
pub fn solve_lod(
    basis: &MultiscaleBasis,
    transfer: &TransferOperators,
    coeff: &CombinedCoefficient,
    load: &NodalVector,
    options: IterationOptions,
    u0: &NodalVector,
    mode: TestSpace,
    reference: Option<&NodalVector>,
) -> Result<(NodalVector, SolveTrace)> {
    let start = Instant::now();
    validate(options)?;
    if coeff.mesh() != basis.fine() || u0.mesh() != basis.fine() {
        return Err(invalid("basis, coefficient and initial guess must share the fine mesh"));
    }
    let b = check_load(basis.fine(), load)?;
    let mut trace = SolveTrace::default();
    let mut u = u0.clone();
    let mut c = transfer.interpolate_free(&u0.free_values())?;
    if let Some(r) = reference {
        trace.errors.push(relative_h1(&u, r)?);
    }
    for n in 1..=options.max_iter {
        let a = free_stiffness(coeff, &u)?;
        let (reduced, rhs) = basis.reduce(&a, &b, mode)?;
        let next = SparseFactor::new(&reduced)?.solve_vec(&rhs)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(LodError::NonFinite(n));
        }
        let inc = relative_increment(&next, &c);
        c = next;
        u = basis.expand(&c)?;
        trace.iterations = n;
        trace.increments.push(inc);
        if let Some(r) = reference {
            trace.errors.push(relative_h1(&u, r)?);
        }
        if inc <= options.tol || coeff.is_state_independent() {
            trace.converged = true;
            break;
        }
    }
    trace.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((u, trace))
}

/// Everything needed to run the multiscale pipeline at one `(H, k)`.
pub struct LodProblem<'a> {
    pub transfer: &'a TransferOperators,
    pub coeff: &'a CombinedCoefficient,
    pub load: &'a NodalVector,
    pub k: usize,
    pub kind: Linearization,
    pub mode: TestSpace,
    pub options: IterationOptions,
    pub reference: Option<&'a NodalVector>,
}

/// One stage of the iterated method.
#[derive(Debug, Clone)]
pub struct Stage {
    pub p_star: NodalVector,
    pub solution: NodalVector,
    pub trace: SolveTrace,
}

/// Source of corrector sets, e.g. direct assembly or a file cache.
pub type CorrectorSource<'s> = dyn FnMut(&TransferOperators, &LinearizationData, usize) -> Result<CorrectorSet> + 's;

impl LodProblem<'_> {
    /// Linearizes at `p_star`, builds the basis and solves from `u0 = p*`.
    pub fn run(&self, p_star: &NodalVector, source: &mut CorrectorSource<'_>) -> Result<Stage> {
        let lin = build_linearization(self.coeff, self.kind, p_star)?;
        let set = source(self.transfer, &lin, self.k)?;
        let basis = MultiscaleBasis::new(self.transfer, &set)?;
        let (solution, trace) = solve_lod(
            &basis,
            self.transfer,
            self.coeff,
            self.load,
            self.options,
            p_star,
            self.mode,
            self.reference,
        )?;
        Ok(Stage { p_star: p_star.clone(), solution, trace })
    }
}

/// Runs `stages` LOD solves, each linearized at the previous solution.
pub fn iterate_lod(
    problem: &LodProblem<'_>,
    stages: usize,
    initial_p_star: &NodalVector,
    source: &mut CorrectorSource<'_>,
) -> Result<Vec<Stage>> {
    if stages == 0 {
        return Err(invalid("at least one stage is required"));
    }
    let mut out: Vec<Stage> = Vec::with_capacity(stages);
    for _ in 0..stages {
        let p = out.last().map_or(initial_p_star, |s| &s.solution).clone();
        out.push(problem.run(&p, source)?);
    }
    Ok(out)
}

/// Corrector source that always assembles.
pub fn assemble_source(transfer: &TransferOperators, lin: &LinearizationData, k: usize) -> Result<CorrectorSet> {
    crate::corrector::assemble_corrector_set(transfer, k, lin)
}

/// `LODU` bytes: magic, version, `n`, then all `(n+1)²` nodal values.
pub fn solution_to_bytes(u: &NodalVector) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(12 + 8 * u.values().len());
    buf.extend_from_slice(SOLUTION_MAGIC);
    put_u32(&mut buf, SOLUTION_VERSION);
    put_u32(&mut buf, to_u32(u.mesh().n(), "n")?);
    put_f64s(&mut buf, u.values());
    Ok(buf)
}

pub fn solution_from_bytes(bytes: &[u8]) -> Result<NodalVector> {
    let mut r = Reader::new(bytes);
    r.expect_magic(SOLUTION_MAGIC)?;
    let version = r.u32()?;
    if version != SOLUTION_VERSION {
        return Err(LodError::Format(format!("unsupported solution version {version}")));
    }
    let mesh = StructuredMesh::new(r.u32()? as usize).map_err(|e| LodError::Format(e.to_string()))?;
    let values = r.f64s(mesh.node_count())?;
    r.finish()?;
    NodalVector::from_values(mesh, Scale::Fine, values)
}

pub fn write_solution(path: &Path, u: &NodalVector) -> Result<()> {
    crate::io::write_atomic(path, &solution_to_bytes(u)?)
}

pub fn read_solution(path: &Path) -> Result<NodalVector> {
    solution_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient::{NonlinearModel, SpatialField};
    use crate::fem::{assemble_load, PiecewiseSource};
    use crate::mesh::MeshPair;
    use std::sync::Arc;

    fn layered(fine: StructuredMesh) -> Arc<SpatialField> {
        let values = (0..fine.element_count())
            .map(|e| if (fine.element_coords(e).1 / 2) % 2 == 0 { 1.0 } else { 4.0 })
            .collect();
        Arc::new(SpatialField::new(fine, values).unwrap())
    }

    #[test]
    fn linear_model_takes_one_iteration() {
        let fine = StructuredMesh::new(16).unwrap();
        let coeff = CombinedCoefficient::single(layered(fine), NonlinearModel::Constant);
        let load = assemble_load(&fine, &PiecewiseSource::constant(1.0), Scale::Fine);
        let (u, trace) = solve_reference(&coeff, &load, IterationOptions::default(), &NodalVector::zeros(fine, Scale::Fine)).unwrap();
        assert_eq!(trace.iterations, 1);
        assert!(trace.converged);
        assert!(u.satisfies_dirichlet() && u.max_abs() > 0.0);
    }

    #[test]
    fn same_mesh_lod_reproduces_reference_iterates() {
        let pair = MeshPair::new(8, 8).unwrap();
        let tr = TransferOperators::new(pair).unwrap();
        let coeff = CombinedCoefficient::single(layered(pair.fine), NonlinearModel::EXP2);
        let load = assemble_load(&pair.fine, &PiecewiseSource::horizontal_split(0.25, 0.1, 1.0), Scale::Fine);
        let zero = NodalVector::zeros(pair.fine, Scale::Fine);
        for iters in 1..=4 {
            let opts = IterationOptions { tol: 1e-14, max_iter: iters };
            let (u_ref, _) = solve_reference(&coeff, &load, opts, &zero).unwrap();
            let lin = build_linearization(&coeff, Linearization::Kacanov, &zero).unwrap();
            let set = assemble_source(&tr, &lin, 1).unwrap();
            let basis = MultiscaleBasis::new(&tr, &set).unwrap();
            let (u, _) = solve_lod(&basis, &tr, &coeff, &load, opts, &zero, TestSpace::Galerkin, None).unwrap();
            let diff = u.axpy(-1.0, &u_ref).unwrap().max_abs();
            assert!(diff <= 1e-10 * u_ref.max_abs(), "{iters}: {diff}");
        }
    }

    #[test]
    fn solution_file_roundtrip() {
        let mesh = StructuredMesh::new(4).unwrap();
        let u = NodalVector::interpolate_fn(mesh, Scale::Fine, |x, y| x * y * (1.0 - x) * (1.0 - y));
        let bytes = solution_to_bytes(&u).unwrap();
        assert_eq!(bytes.len(), 12 + 25 * 8);
        assert_eq!(solution_from_bytes(&bytes).unwrap().values(), u.values());
        assert!(solution_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(solution_from_bytes(&bad).is_err());
    }
}

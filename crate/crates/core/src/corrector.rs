//! Linearized element correctors `Q_{T,k}` on oversampling patches.
//!
//! Each corrector solves the saddle-point system
//!
//! ```text
//! [ A_p + B_p   C_pᵀ ] [ q ]   [ r ]
//! [ C_p         0    ] [ μ ] = [ 0 ]
//! ```
//!
//! on the fine interior nodes of a patch, where `A_p` is the stiffness with
//! the frozen coefficient `α(x, p*)`, `B_p` the gradient coupling
//! `(v α_s(x, p*) ∇p*, ∇w)` (absent for Kačanov), `C_p` the rows of the
//! cross mass that describe `ker I_H`, and `r` the element-local form of a
//! coarse basis function. The system is solved by block elimination with one
//! sparse factorization of `A_p + B_p` per patch.

use std::collections::BTreeMap;
use std::path::Path;

use faer::sparse::Triplet;
use faer::Mat;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::coefficient::CombinedCoefficient;
use crate::error::{invalid, LodError, Result};
use crate::fem::{
    assemble_gradient_coupling, assemble_stiffness, h1_seminorm, local_gradient_coupling_q1,
    local_stiffness_q1, NodalVector, Scale, SparseOperator,
};
use crate::interpolation::{PatchConstraints, TransferOperators};
use crate::io::{put_f64s, put_u32, to_u32, Reader};
use crate::linalg::{dense_solve, SparseFactor};
use crate::mesh::{build_patch, patch_rect, ElementRect, MeshPair, Patch, CORNER_OFFSETS};

pub const CORRECTOR_MAGIC: &[u8; 4] = b"LODC";
pub const CORRECTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linearization {
    /// Freeze the coefficient at `p*`.
    Kacanov,
    /// Newton-type linearization with the extra `v α_s(x,p*) ∇p*` flux.
    Frechet,
}

impl Linearization {
    pub fn id(self) -> u8 {
        match self {
            Self::Kacanov => 0,
            Self::Frechet => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kacanov => "kacanov",
            Self::Frechet => "frechet",
        }
    }
}

impl std::str::FromStr for Linearization {
    type Err = LodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kacanov" => Ok(Self::Kacanov),
            "frechet" => Ok(Self::Frechet),
            other => Err(invalid(format!("unknown linearization `{other}`"))),
        }
    }
}

/// Elementwise data of a linearized flux at a fixed point `p*`.
#[derive(Debug, Clone)]
pub struct LinearizationData {
    pub kind: Linearization,
    pub p_star: NodalVector,
    /// `α(x, p*)` at fine element midpoints.
    pub alpha_elem: Vec<f64>,
    /// `α_s(x, p*) ∇p*` at fine element midpoints; zero for Kačanov.
    pub beta_elem: Vec<[f64; 2]>,
    /// Largest Euclidean norm of `beta_elem`.
    pub beta_sup: f64,
    /// SHA-256 over the bytes of `p*` and of the coefficient.
    pub fingerprint: [u8; 32],
}

pub fn build_linearization(
    coeff: &CombinedCoefficient,
    kind: Linearization,
    p_star: &NodalVector,
) -> Result<LinearizationData> {
    let alpha_elem = coeff.elementwise_alpha(p_star)?;
    if let Some((element, &value)) =
        alpha_elem.iter().enumerate().find(|(_, a)| !(**a > 0.0 && a.is_finite()))
    {
        return Err(LodError::Ellipticity { element, value });
    }
    let beta_elem: Vec<[f64; 2]> = match kind {
        Linearization::Kacanov => vec![[0.0; 2]; alpha_elem.len()],
        Linearization::Frechet => {
            let alpha_s = coeff.elementwise_alpha_s(p_star)?;
            p_star
                .element_midpoint_gradients()
                .iter()
                .zip(alpha_s)
                .map(|(g, a)| [a * g[0], a * g[1]])
                .collect()
        }
    };
    let beta_sup = beta_elem.iter().map(|b| b[0].hypot(b[1])).fold(0.0, f64::max);
    Ok(LinearizationData {
        kind,
        p_star: p_star.clone(),
        alpha_elem,
        beta_elem,
        beta_sup,
        fingerprint: fingerprint(coeff, p_star),
    })
}

pub fn fingerprint(coeff: &CombinedCoefficient, p_star: &NodalVector) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in p_star.values() {
        hasher.update(v.to_le_bytes());
    }
    hasher.update(coeff.fingerprint_bytes());
    hasher.finalize().into()
}

/// `H · sup|α_s(x,p*)∇p*|`, a computable stand-in for the smallness
/// condition on the Fréchet corrector problems. Values at or above one mean
/// the local problems may lose coercivity.
pub fn frechet_coercivity_precheck(lin: &LinearizationData, coarse_h: f64) -> f64 {
    coarse_h * lin.beta_sup
}

/// A sparse vector over fine free nodes, indices ascending.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn from_dense(values: &[f64]) -> Self {
        let (indices, values) = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self { indices, values }
    }

    /// Sums contributions given in a fixed order; equal indices add up in
    /// that order.
    fn accumulate(parts: Vec<(Vec<usize>, Vec<f64>)>) -> Self {
        let mut entries: Vec<(usize, f64)> = parts
            .into_iter()
            .flat_map(|(idx, val)| idx.into_iter().zip(val))
            .collect();
        entries.sort_by_key(|e| e.0);
        let mut out = SparseVec::default();
        for (i, v) in entries {
            if out.indices.last() == Some(&i) {
                *out.values.last_mut().unwrap() += v;
            } else {
                out.indices.push(i);
                out.values.push(v);
            }
        }
        out
    }
}

/// `Q^k φ_ℓ` for every free coarse node `ℓ`, in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSet {
    pub pair: MeshPair,
    pub k: usize,
    pub kind: Linearization,
    pub fingerprint: [u8; 32],
    pub correctors: Vec<SparseVec>,
}

impl CorrectorSet {
    /// Fine free-node values of one corrector.
    pub fn dense(&self, node: usize) -> Vec<f64> {
        self.correctors[node].to_dense(self.pair.fine.free_count())
    }

    pub fn to_nodal(&self, node: usize) -> NodalVector {
        NodalVector::from_free(self.pair.fine, Scale::Fine, &self.dense(node))
            .expect("corrector length matches the fine mesh")
    }

    /// Largest entrywise difference between two sets on the same meshes.
    pub fn max_difference(&self, other: &CorrectorSet) -> f64 {
        let len = self.pair.fine.free_count();
        self.correctors
            .iter()
            .zip(&other.correctors)
            .map(|(a, b)| {
                let (a, b) = (a.to_dense(len), b.to_dense(len));
                a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// `LODC` bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fine_free = self.pair.fine.free_count();
        let mut buf = Vec::with_capacity(53 + 8 * fine_free * self.correctors.len());
        buf.extend_from_slice(CORRECTOR_MAGIC);
        put_u32(&mut buf, CORRECTOR_VERSION);
        put_u32(&mut buf, to_u32(self.pair.coarse.n(), "coarse n")?);
        put_u32(&mut buf, to_u32(self.pair.fine.n(), "fine n")?);
        put_u32(&mut buf, to_u32(self.k, "k")?);
        buf.push(self.kind.id());
        buf.extend_from_slice(&self.fingerprint);
        for c in &self.correctors {
            put_f64s(&mut buf, &c.to_dense(fine_free));
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CorrectorHeader::parse(bytes)?;
        let pair = MeshPair::new(header.coarse_n, header.fine_n)?;
        let mut r = Reader::new(&bytes[CorrectorHeader::LEN..]);
        let fine_free = pair.fine.free_count();
        let correctors = (0..pair.coarse.free_count())
            .map(|_| r.f64s(fine_free).map(|v| SparseVec::from_dense(&v)))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { pair, k: header.k, kind: header.kind, fingerprint: header.fingerprint, correctors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Fixed-size prefix of a `LODC` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectorHeader {
    pub version: u32,
    pub coarse_n: usize,
    pub fine_n: usize,
    pub k: usize,
    pub kind: Linearization,
    pub fingerprint: [u8; 32],
}

impl CorrectorHeader {
    pub const LEN: usize = 4 + 4 * 4 + 1 + 32;

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CORRECTOR_MAGIC)?;
        let version = r.u32()?;
        if version != CORRECTOR_VERSION {
            return Err(LodError::Format(format!("unsupported corrector version {version}")));
        }
        let coarse_n = r.u32()? as usize;
        let fine_n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let kind = match r.u8()? {
            0 => Linearization::Kacanov,
            1 => Linearization::Frechet,
            other => return Err(LodError::Format(format!("unknown linearization id {other}"))),
        };
        let fingerprint = r.take(32)?.try_into().unwrap();
        Ok(Self { version, coarse_n, fine_n, k, kind, fingerprint })
    }
}

/// The linear algebra of one patch.
pub struct PatchSystem {
    pub patch: Patch,
    /// Fine free-node indices of the patch unknowns.
    pub free_nodes: Vec<usize>,
    /// `A_p + B_p` on the patch unknowns.
    pub matrix: SparseOperator,
    pub constraints: PatchConstraints,
}

impl PatchSystem {
    /// The full saddle-point matrix, unknowns first and multipliers last.
    pub fn saddle_matrix(&self) -> Result<SparseOperator> {
        let n = self.matrix.nrows();
        let m = self.constraints.matrix.nrows();
        let mut triplets: Vec<Triplet<usize, usize, f64>> = self
            .matrix
            .triplets()
            .into_iter()
            .map(|(i, j, v)| Triplet::new(i, j, v))
            .collect();
        for (i, j, v) in self.constraints.matrix.triplets() {
            triplets.push(Triplet::new(n + i, j, v));
            triplets.push(Triplet::new(j, n + i, v));
        }
        SparseOperator::from_triplets(n + m, n + m, &triplets, self.matrix.is_symmetric())
    }

    pub fn factorize(&self) -> Result<FactoredPatch> {
        let center = self.patch.center;
        let fail = |e: LodError| LodError::PatchSolve { patch: center, reason: e.to_string() };
        let n = self.matrix.nrows();
        if n == 0 {
            return Ok(FactoredPatch { center, factor: None, constraint_solve: None, constraints: self.constraints.matrix.clone() });
        }
        let factor = SparseFactor::new(&self.matrix).map_err(fail)?;
        let c = &self.constraints.matrix;
        let m = c.nrows();
        let constraint_solve = if m == 0 {
            None
        } else {
            let mut ct = Mat::<f64>::zeros(n, m);
            for (i, j, v) in c.triplets() {
                ct[(j, i)] = v;
            }
            let y = factor.solve(ct).map_err(fail)?;
            let schur = apply_rows(c, &y);
            Some(SchurBlock { y, schur })
        };
        Ok(FactoredPatch { center, factor: Some(factor), constraint_solve, constraints: c.clone() })
    }
}

struct SchurBlock {
    /// `K⁻¹ Cᵀ`.
    y: Mat<f64>,
    /// `C K⁻¹ Cᵀ`.
    schur: Mat<f64>,
}

/// A patch system ready for repeated solves.
pub struct FactoredPatch {
    center: usize,
    factor: Option<SparseFactor>,
    constraint_solve: Option<SchurBlock>,
    constraints: SparseOperator,
}

impl FactoredPatch {
    /// Solves the saddle-point system for each column of `rhs` and returns the
    /// primal parts.
    pub fn solve(&self, rhs: Mat<f64>) -> Result<Mat<f64>> {
        let fail = |e: LodError| LodError::PatchSolve { patch: self.center, reason: e.to_string() };
        let Some(factor) = &self.factor else {
            return Ok(rhs);
        };
        let z = factor.solve(rhs).map_err(fail)?;
        let Some(block) = &self.constraint_solve else {
            return Ok(z);
        };
        let g = apply_rows(&self.constraints, &z);
        let mu = solve_schur(&block.schur, g).map_err(fail)?;
        Ok(z - &block.y * &mu)
    }
}

/// `C · X` for sparse `C` and dense `X`.
fn apply_rows(c: &SparseOperator, x: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(c.nrows(), x.ncols());
    for (i, j, v) in c.triplets() {
        for col in 0..x.ncols() {
            out[(i, col)] += v * x[(j, col)];
        }
    }
    out
}

/// Solves the multiplier system. When the constraints are redundant on the
/// patch (more rows than the fine space can separate) the system is only
/// semidefinite; any solution yields the same primal part, so a truncated
/// pseudo-inverse is used.
fn solve_schur(schur: &Mat<f64>, g: Mat<f64>) -> Result<Mat<f64>> {
    if let Ok(mu) = dense_solve(schur, g.clone()) {
        let residual = schur * &mu - &g;
        if residual.norm_l2() <= 1e-10 * g.norm_l2().max(f64::MIN_POSITIVE) {
            return Ok(mu);
        }
    }
    let svd = schur
        .thin_svd()
        .map_err(|e| LodError::SolverFailure(format!("SVD of multiplier block failed: {e:?}")))?;
    let s = svd.S().column_vector();
    let s_max = s.iter().fold(0.0f64, |m, v| m.max(*v));
    let cut = s_max * 1e-12 * schur.nrows() as f64;
    let ut_g = svd.U().transpose() * &g;
    let scaled = Mat::from_fn(ut_g.nrows(), ut_g.ncols(), |i, j| {
        if s[i] > cut {
            ut_g[(i, j)] / s[i]
        } else {
            0.0
        }
    });
    Ok(svd.V() * scaled)
}

/// Shared state for all corrector solves of one linearization on one mesh pair.
pub struct CorrectorProblem<'a> {
    transfer: &'a TransferOperators,
    lin: &'a LinearizationData,
    /// `A + B` on fine free nodes.
    operator: SparseOperator,
}

impl<'a> CorrectorProblem<'a> {
    pub fn new(transfer: &'a TransferOperators, lin: &'a LinearizationData) -> Result<Self> {
        let fine = transfer.pair().fine;
        if lin.alpha_elem.len() != fine.element_count() {
            return Err(invalid("linearization data does not match the fine mesh"));
        }
        let stiffness = assemble_stiffness(&fine, &lin.alpha_elem)?;
        let full = match lin.kind {
            Linearization::Kacanov => stiffness,
            Linearization::Frechet => {
                let coupling = assemble_gradient_coupling(&fine, &lin.beta_elem)?;
                stiffness.linear_combination(1.0, &coupling, 1.0)?
            }
        };
        Ok(Self { transfer, lin, operator: full.restrict_free(&fine)? })
    }

    pub fn pair(&self) -> &MeshPair {
        self.transfer.pair()
    }

    pub fn linearization(&self) -> &LinearizationData {
        self.lin
    }

    /// `A + B` on all fine free nodes.
    pub fn operator(&self) -> &SparseOperator {
        &self.operator
    }

    pub fn patch_system(&self, patch: &Patch) -> Result<PatchSystem> {
        let free_nodes: Vec<usize> = patch
            .fine_interior_nodes
            .iter()
            .map(|&v| self.transfer.fine_free_index(v).expect("patch interior nodes are free"))
            .collect();
        let matrix = self.operator.restrict(&free_nodes, &free_nodes)?;
        let constraints = self.transfer.kernel_constraint_rows(patch)?;
        Ok(PatchSystem { patch: patch.clone(), free_nodes, matrix, constraints })
    }

    /// `r_i = (A_L)_T(p*, v, φ_i)` for the patch unknowns, where `v` is given
    /// by its values at the four corners of the coarse element `T`.
    pub fn element_rhs(&self, patch: &Patch, element: usize, corner_values: [f64; 4]) -> Vec<f64> {
        let pair = self.pair();
        let (fine, r) = (&pair.fine, pair.ratio());
        let h = fine.h();
        let reference = local_stiffness_q1(1.0);
        let mut rhs = vec![0.0; patch.fine_interior_nodes.len()];
        for fe in pair.fine_elements_of(element) {
            let nodes = fine.element_nodes(fe);
            // Values of the bilinear coarse function at the fine corners.
            let local_v = nodes.map(|v| {
                let (a, b) = fine.node_coords(v);
                let (ci, cj) = pair.coarse.element_coords(element);
                let xi = (a as f64 - (ci * r) as f64) / r as f64;
                let eta = (b as f64 - (cj * r) as f64) / r as f64;
                CORNER_OFFSETS
                    .iter()
                    .zip(corner_values)
                    .map(|(&(di, dj), cv)| {
                        let wx = if di == 0 { 1.0 - xi } else { xi };
                        let wy = if dj == 0 { 1.0 - eta } else { eta };
                        cv * wx * wy
                    })
                    .sum::<f64>()
            });
            let alpha = self.lin.alpha_elem[fe];
            let coupling = local_gradient_coupling_q1(h, self.lin.beta_elem[fe]);
            for (a, &node) in nodes.iter().enumerate() {
                let Some(pos) = local_patch_index(pair, &patch.rect, node) else {
                    continue;
                };
                let mut s = 0.0;
                for b in 0..4 {
                    s += (alpha * reference[a][b] + coupling[a][b]) * local_v[b];
                }
                rhs[pos] += s;
            }
        }
        rhs
    }

    /// Corrector of the coarse hat at local corner `corner` of the patch centre,
    /// restricted to that element, zero-extended to the fine mesh.
    pub fn solve_element_corrector(&self, patch: &Patch, corner: usize) -> Result<NodalVector> {
        if corner >= 4 {
            return Err(invalid("local basis index must be in 0..4"));
        }
        let system = self.patch_system(patch)?;
        let mut values = [0.0; 4];
        values[corner] = 1.0;
        let rhs = self.element_rhs(patch, patch.center, values);
        let q = system.factorize()?.solve(crate::linalg::column(&rhs))?;
        let mut out = NodalVector::zeros(self.pair().fine, Scale::Fine);
        for (pos, &node) in patch.fine_interior_nodes.iter().enumerate() {
            out.values_mut()[node] = q[(pos, 0)];
        }
        Ok(out)
    }

    /// Groups coarse elements by patch rectangle so coinciding patches share
    /// one factorization.
    fn patch_groups(&self, k: usize) -> Vec<(ElementRect, Vec<usize>)> {
        let coarse = self.pair().coarse;
        let mut groups: BTreeMap<ElementRect, Vec<usize>> = BTreeMap::new();
        for t in 0..coarse.element_count() {
            groups.entry(patch_rect(&coarse, t, k)).or_default().push(t);
        }
        groups.into_iter().collect()
    }

    /// Solves all element problems of one patch group. `rhs_for` lists, per
    /// element, the corner-value sets to correct; the result holds one
    /// fine-free sparse vector per requested set, in the same order.
    fn solve_group(
        &self,
        k: usize,
        elements: &[usize],
        rhs_for: &(dyn Fn(usize) -> Vec<[f64; 4]> + Sync),
    ) -> Result<Vec<Vec<(Vec<usize>, Vec<f64>)>>> {
        let patch = build_patch(self.pair(), elements[0], k)?;
        let system = self.patch_system(&patch)?;
        let factor = system.factorize()?;
        let mut columns = Vec::new();
        let mut owners = Vec::new();
        for (slot, &t) in elements.iter().enumerate() {
            for values in rhs_for(t) {
                columns.push(self.element_rhs(&patch, t, values));
                owners.push(slot);
            }
        }
        let n = system.free_nodes.len();
        let mut out: Vec<Vec<(Vec<usize>, Vec<f64>)>> = vec![Vec::new(); elements.len()];
        if columns.is_empty() {
            return Ok(out);
        }
        let rhs = Mat::from_fn(n, columns.len(), |i, j| columns[j][i]);
        let q = factor.solve(rhs).map_err(|e| match e {
            LodError::PatchSolve { reason, .. } => LodError::PatchSolve { patch: elements[0], reason },
            other => other,
        })?;
        for (col, &slot) in owners.iter().enumerate() {
            let values: Vec<f64> = (0..n).map(|i| q[(i, col)]).collect();
            out[slot].push((system.free_nodes.clone(), values));
        }
        Ok(out)
    }

    /// `Q^k φ_ℓ = Σ_T Q_{T,k}(φ_ℓ|_T)` for every free coarse node.
    pub fn assemble(&self, k: usize) -> Result<CorrectorSet> {
        let pair = *self.pair();
        let coarse = pair.coarse;
        let coarse_free = coarse.free_index_map();
        let free_corners = |t: usize| -> Vec<usize> {
            coarse.element_nodes(t).iter().enumerate().filter(|(_, v)| coarse_free[**v].is_some()).map(|(a, _)| a).collect()
        };
        let rhs_for = |t: usize| -> Vec<[f64; 4]> {
            free_corners(t)
                .into_iter()
                .map(|a| {
                    let mut v = [0.0; 4];
                    v[a] = 1.0;
                    v
                })
                .collect()
        };
        let groups = self.patch_groups(k);
        let solved: Vec<Vec<Vec<(Vec<usize>, Vec<f64>)>>> = groups
            .par_iter()
            .map(|(_, elements)| self.solve_group(k, elements, &rhs_for))
            .collect::<Result<_>>()?;

        // Per element, the corrector pieces in corner order.
        let mut per_element: Vec<Vec<(Vec<usize>, Vec<f64>)>> = vec![Vec::new(); coarse.element_count()];
        for ((_, elements), results) in groups.iter().zip(solved) {
            for (&t, pieces) in elements.iter().zip(results) {
                per_element[t] = pieces;
            }
        }
        let mut parts: Vec<Vec<(Vec<usize>, Vec<f64>)>> = vec![Vec::new(); coarse.free_count()];
        for (t, pieces) in per_element.into_iter().enumerate() {
            let nodes = coarse.element_nodes(t);
            for (a, piece) in free_corners(t).into_iter().zip(pieces) {
                parts[coarse_free[nodes[a]].unwrap()].push(piece);
            }
        }
        Ok(CorrectorSet {
            pair,
            k,
            kind: self.lin.kind,
            fingerprint: self.lin.fingerprint,
            correctors: parts.into_iter().map(SparseVec::accumulate).collect(),
        })
    }

    /// `Q^k v_H` on fine free nodes for one coarse function.
    pub fn apply_localized(&self, k: usize, v_h: &NodalVector) -> Result<Vec<f64>> {
        let coarse = self.pair().coarse;
        if v_h.mesh() != &coarse {
            return Err(invalid("expected a coarse vector"));
        }
        let rhs_for = |t: usize| -> Vec<[f64; 4]> { vec![v_h.element_values(t)] };
        let groups = self.patch_groups(k);
        let solved: Vec<_> = groups
            .par_iter()
            .map(|(_, elements)| self.solve_group(k, elements, &rhs_for))
            .collect::<Result<_>>()?;
        let mut pieces = vec![Vec::new(); coarse.element_count()];
        for ((_, elements), results) in groups.iter().zip(solved) {
            for (&t, mut p) in elements.iter().zip(results) {
                pieces[t] = p.pop().map(|x| vec![x]).unwrap_or_default();
            }
        }
        let acc = SparseVec::accumulate(pieces.into_iter().flatten().collect());
        Ok(acc.to_dense(self.pair().fine.free_count()))
    }

    /// `d_k = |Q^{full} v_H − Q^k v_H|₁` for `k = 1..=k_max`, where the
    /// full-domain patch stands in for the ideal corrector.
    pub fn decay_profile(&self, v_h: &NodalVector, k_max: usize) -> Result<Vec<f64>> {
        let k_full = self.pair().coarse.n().saturating_sub(1).max(k_max);
        let fine = self.pair().fine;
        let reference = self.apply_localized(k_full, v_h)?;
        (1..=k_max)
            .map(|k| {
                let qk = self.apply_localized(k, v_h)?;
                let diff: Vec<f64> = reference.iter().zip(&qk).map(|(a, b)| a - b).collect();
                Ok(h1_seminorm(&NodalVector::from_free(fine, Scale::Fine, &diff)?))
            })
            .collect()
    }
}

/// Position of a fine node among the interior nodes of a patch rectangle.
pub fn local_patch_index(pair: &MeshPair, rect: &ElementRect, node: usize) -> Option<usize> {
    let r = pair.ratio();
    let (a, b) = pair.fine.node_coords(node);
    let (a0, a1) = (rect.x0 * r, (rect.x1 + 1) * r);
    let (b0, b1) = (rect.y0 * r, (rect.y1 + 1) * r);
    if a <= a0 || a >= a1 || b <= b0 || b >= b1 {
        return None;
    }
    Some((b - b0 - 1) * (a1 - a0 - 1) + (a - a0 - 1))
}

/// Assembles the corrector set for one linearization.
pub fn assemble_corrector_set(
    transfer: &TransferOperators,
    k: usize,
    lin: &LinearizationData,
) -> Result<CorrectorSet> {
    CorrectorProblem::new(transfer, lin)?.assemble(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient::{NonlinearModel, SpatialField};
    use crate::mesh::StructuredMesh;
    use std::sync::Arc;

    fn coefficient(fine: StructuredMesh, model: NonlinearModel) -> CombinedCoefficient {
        let values = (0..fine.element_count())
            .map(|e| {
                let (i, j) = fine.element_coords(e);
                1.0 + 0.9 * ((3 * i + 7 * j) % 5) as f64 / 4.0
            })
            .collect();
        CombinedCoefficient::single(Arc::new(SpatialField::new(fine, values).unwrap()), model)
    }

    #[test]
    fn kacanov_has_no_coupling() {
        let fine = StructuredMesh::new(8).unwrap();
        let coeff = coefficient(fine, NonlinearModel::EXP2);
        let p = NodalVector::interpolate_fn(fine, Scale::Fine, |x, y| x * y);
        let lin = build_linearization(&coeff, Linearization::Kacanov, &p).unwrap();
        assert!(lin.beta_elem.iter().all(|b| *b == [0.0, 0.0]));
        assert_eq!(frechet_coercivity_precheck(&lin, 0.25), 0.0);
    }

    #[test]
    fn frechet_equals_kacanov_for_constant_point() {
        let fine = StructuredMesh::new(8).unwrap();
        let coeff = coefficient(fine, NonlinearModel::EXP2);
        let p = NodalVector::interpolate_fn(fine, Scale::Fine, |_, _| 0.3);
        let k = build_linearization(&coeff, Linearization::Kacanov, &p).unwrap();
        let f = build_linearization(&coeff, Linearization::Frechet, &p).unwrap();
        assert_eq!(k.alpha_elem, f.alpha_elem);
        assert!(f.beta_elem.iter().all(|b| b[0] == 0.0 && b[1] == 0.0));
        let zero = NodalVector::zeros(fine, Scale::Fine);
        let f0 = build_linearization(&coeff, Linearization::Frechet, &zero).unwrap();
        assert_eq!(frechet_coercivity_precheck(&f0, 0.5), 0.0);
    }

    #[test]
    fn frechet_beta_of_linear_point() {
        let fine = StructuredMesh::new(2).unwrap();
        let ones = Arc::new(SpatialField::constant(fine, 1.0).unwrap());
        let coeff = CombinedCoefficient::single(ones, NonlinearModel::EXP2);
        let p = NodalVector::interpolate_fn(fine, Scale::Fine, |x, _| x);
        let lin = build_linearization(&coeff, Linearization::Frechet, &p).unwrap();
        for e in 0..4 {
            let (xm, _) = fine.element_midpoint(e);
            let expected = 2.0 * (2.0 * xm).exp();
            assert!((lin.beta_elem[e][0] - expected).abs() < 1e-14);
            assert!(lin.beta_elem[e][1].abs() < 1e-14);
        }
    }

    #[test]
    fn nonpositive_alpha_is_rejected() {
        let fine = StructuredMesh::new(2).unwrap();
        let ones = Arc::new(SpatialField::constant(fine, 1.0).unwrap());
        let coeff = CombinedCoefficient::single(ones, NonlinearModel::EXP4);
        let p = NodalVector::interpolate_fn(fine, Scale::Fine, |_, _| 1e3);
        assert!(build_linearization(&coeff, Linearization::Kacanov, &p).is_err());
    }

    #[test]
    fn same_mesh_correctors_vanish() {
        let pair = MeshPair::new(4, 4).unwrap();
        let tr = TransferOperators::new(pair).unwrap();
        let coeff = coefficient(pair.fine, NonlinearModel::Constant);
        let lin = build_linearization(&coeff, Linearization::Kacanov, &NodalVector::zeros(pair.fine, Scale::Fine)).unwrap();
        for k in [1, 3] {
            let set = assemble_corrector_set(&tr, k, &lin).unwrap();
            assert!(set.correctors.iter().all(|c| c.values.iter().all(|v| v.abs() < 1e-12)));
        }
        let single = MeshPair::new(1, 1).unwrap();
        let tr = TransferOperators::new(single).unwrap();
        let coeff = coefficient(single.fine, NonlinearModel::Constant);
        let lin = build_linearization(&coeff, Linearization::Kacanov, &NodalVector::zeros(single.fine, Scale::Fine)).unwrap();
        let problem = CorrectorProblem::new(&tr, &lin).unwrap();
        let patch = build_patch(&single, 0, 0).unwrap();
        let q = problem.solve_element_corrector(&patch, 0).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrector_file_roundtrip_and_header_checks() {
        let pair = MeshPair::new(2, 8).unwrap();
        let tr = TransferOperators::new(pair).unwrap();
        let coeff = coefficient(pair.fine, NonlinearModel::EXP2);
        let p = NodalVector::interpolate_fn(pair.fine, Scale::Fine, |x, y| x * (1.0 - x) * y * (1.0 - y));
        let lin = build_linearization(&coeff, Linearization::Frechet, &p).unwrap();
        let set = assemble_corrector_set(&tr, 1, &lin).unwrap();
        let bytes = set.to_bytes().unwrap();
        assert_eq!(bytes.len(), CorrectorHeader::LEN + 49 * 8);
        let back = CorrectorSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.kind, Linearization::Frechet);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(CorrectorSet::from_bytes(&bad), Err(LodError::Format(_))));
    }

    #[test]
    fn local_index_matches_patch_ordering() {
        let pair = MeshPair::new(4, 12).unwrap();
        for t in [0, 5, 15] {
            let patch = build_patch(&pair, t, 1).unwrap();
            for (pos, &node) in patch.fine_interior_nodes.iter().enumerate() {
                assert_eq!(local_patch_index(&pair, &patch.rect, node), Some(pos));
            }
        }
    }

    fn setup(coarse: usize, fine: usize, model: NonlinearModel, p: impl Fn(f64, f64) -> f64) -> (TransferOperators, CombinedCoefficient, NodalVector) {
        let pair = MeshPair::new(coarse, fine).unwrap();
        let tr = TransferOperators::new(pair).unwrap();
        let coeff = coefficient(pair.fine, model);
        let p = NodalVector::interpolate_fn(pair.fine, Scale::Fine, p);
        (tr, coeff, p)
    }

    fn bump(x: f64, y: f64) -> f64 {
        4.0 * x * (1.0 - x) * y * (1.0 - y) * (1.0 + x)
    }

    /// Dense solve of the global saddle problem for every coarse hat.
    fn dense_global_correctors(problem: &CorrectorProblem, tr: &TransferOperators) -> Vec<Vec<f64>> {
        let k = problem.operator().to_dense();
        let c = tr.cross_mass().to_dense();
        let p = tr.prolongation_free().unwrap().to_dense();
        let (n, m) = (k.nrows(), c.nrows());
        let saddle = Mat::from_fn(n + m, n + m, |i, j| match (i < n, j < n) {
            (true, true) => k[(i, j)],
            (true, false) => c[(j - n, i)],
            (false, true) => c[(i - n, j)],
            _ => 0.0,
        });
        let rhs_top = &k * &p;
        let rhs = Mat::from_fn(n + m, m, |i, j| if i < n { rhs_top[(i, j)] } else { 0.0 });
        let x = dense_solve(&saddle, rhs).unwrap();
        (0..m).map(|j| (0..n).map(|i| x[(i, j)]).collect()).collect()
    }

    #[test]
    fn full_patch_correctors_match_dense_oracle() {
        for kind in [Linearization::Kacanov, Linearization::Frechet] {
            let (tr, coeff, p) = setup(4, 16, NonlinearModel::EXP2, bump);
            let lin = build_linearization(&coeff, kind, &p).unwrap();
            let problem = CorrectorProblem::new(&tr, &lin).unwrap();
            let set = problem.assemble(3).unwrap();
            let oracle = dense_global_correctors(&problem, &tr);
            for (node, expected) in oracle.iter().enumerate() {
                let got = set.dense(node);
                let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let err = got.iter().zip(expected).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(err <= 1e-10 * scale.max(1.0), "{kind:?} node {node}: {err}");
            }
        }
    }

    #[test]
    fn correctors_lie_in_kernel_and_stay_local() {
        let (tr, coeff, p) = setup(8, 32, NonlinearModel::EXP2, bump);
        let pair = *tr.pair();
        let lin = build_linearization(&coeff, Linearization::Frechet, &p).unwrap();
        let set = assemble_corrector_set(&tr, 1, &lin).unwrap();
        let coarse = pair.coarse;
        let free_nodes = coarse.free_nodes();
        for (l, corr) in set.correctors.iter().enumerate() {
            let q = set.dense(l);
            let cq = tr.cross_mass().apply(&q);
            let qmax = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(qmax > 0.0);
            assert!(cq.iter().all(|v| v.abs() <= 1e-9 * qmax));
            // Support within the union of 1-patches of the touching elements.
            let node = free_nodes[l];
            let rects: Vec<ElementRect> = (0..coarse.element_count())
                .filter(|&t| coarse.element_nodes(t).contains(&node))
                .map(|t| patch_rect(&coarse, t, 1))
                .collect();
            let fine_free = pair.fine.free_nodes();
            for &i in &corr.indices {
                let v = fine_free[i];
                assert!(rects.iter().any(|r| local_patch_index(&pair, r, v).is_some()));
            }
        }
    }

    #[test]
    fn element_correctors_are_orthogonal_to_patch_kernel() {
        for kind in [Linearization::Kacanov, Linearization::Frechet] {
            let (tr, coeff, p) = setup(4, 16, NonlinearModel::EXP2, bump);
            let lin = build_linearization(&coeff, kind, &p).unwrap();
            let problem = CorrectorProblem::new(&tr, &lin).unwrap();
            let patch = build_patch(tr.pair(), 5, 1).unwrap();
            let system = problem.patch_system(&patch).unwrap();
            let kp = system.matrix.to_dense();
            let c = system.constraints.matrix.to_dense();
            let svd = c.svd().unwrap();
            let rank = svd.S().column_vector().iter().filter(|s| **s > 1e-12).count();
            let v = svd.V();
            assert!(v.ncols() > rank);
            for corner in 0..4 {
                let q = problem.solve_element_corrector(&patch, corner).unwrap();
                let ql: Vec<f64> = patch.fine_interior_nodes.iter().map(|&i| q.values()[i]).collect();
                let mut values = [0.0; 4];
                values[corner] = 1.0;
                let r = problem.element_rhs(&patch, 5, values);
                for j in rank..v.ncols() {
                    let w: Vec<f64> = (0..v.nrows()).map(|i| v[(i, j)]).collect();
                    let kq: f64 = (0..w.len()).map(|i| w[i] * (0..w.len()).map(|l| kp[(i, l)] * ql[l]).sum::<f64>()).sum();
                    let rw: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
                    assert!((kq - rw).abs() <= 1e-9 * r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0));
                }
            }
        }
    }

    #[test]
    fn saddle_symmetry_follows_linearization() {
        let (tr, coeff, p) = setup(4, 16, NonlinearModel::EXP2, bump);
        let patch = build_patch(tr.pair(), 6, 1).unwrap();
        let kac = build_linearization(&coeff, Linearization::Kacanov, &p).unwrap();
        let fre = build_linearization(&coeff, Linearization::Frechet, &p).unwrap();
        let sk = CorrectorProblem::new(&tr, &kac).unwrap().patch_system(&patch).unwrap();
        let sf = CorrectorProblem::new(&tr, &fre).unwrap().patch_system(&patch).unwrap();
        let a = sk.saddle_matrix().unwrap().to_dense();
        let b = sf.saddle_matrix().unwrap().to_dense();
        assert!((&a - a.transpose()).norm_max() == 0.0);
        let coupling = assemble_gradient_coupling(&tr.pair().fine, &fre.beta_elem)
            .unwrap()
            .restrict_free(&tr.pair().fine)
            .unwrap()
            .restrict(&sf.free_nodes, &sf.free_nodes)
            .unwrap()
            .to_dense();
        let n = coupling.nrows();
        let diff = &b - &a;
        for i in 0..diff.nrows() {
            for j in 0..diff.ncols() {
                let expected = if i < n && j < n { coupling[(i, j)] } else { 0.0 };
                assert!((diff[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_point_makes_linearizations_agree() {
        let (tr, coeff, p) = setup(4, 16, NonlinearModel::EXP2, |_, _| 0.7);
        let kac = build_linearization(&coeff, Linearization::Kacanov, &p).unwrap();
        let fre = build_linearization(&coeff, Linearization::Frechet, &p).unwrap();
        let a = assemble_corrector_set(&tr, 2, &kac).unwrap();
        let b = assemble_corrector_set(&tr, 2, &fre).unwrap();
        assert!(a.max_difference(&b) <= 1e-10);
    }

    #[test]
    fn decay_profile_shrinks() {
        let (tr, coeff, p) = setup(8, 32, NonlinearModel::EXP2, |_, _| 0.0);
        let lin = build_linearization(&coeff, Linearization::Kacanov, &p).unwrap();
        let problem = CorrectorProblem::new(&tr, &lin).unwrap();
        let v = NodalVector::interpolate_fn(tr.pair().coarse, Scale::Coarse, |x, y| (3.0 * x).sin() * y * (1.0 - x) * (1.0 - y));
        let d = problem.decay_profile(&v, 7).unwrap();
        assert!(d[6] < 1e-10 * d[0].max(1.0), "{d:?}");
        for w in d.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-8), "{d:?}");
        }
    }
}

//! Bilinear (Q1) finite elements on [`StructuredMesh`]es.
//!
//! Element matrices are integrated exactly from one-dimensional tables. Any
//! variable coefficient is frozen per element before it reaches this module.

use faer::sparse::{SparseColMat, Triplet};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::mesh::{StructuredMesh, CORNER_OFFSETS};

/// Which of the two meshes a vector lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Coarse,
    Fine,
}

/// Nodal coefficients of a Q1 function, stored for every node of its mesh.
///
/// Boundary entries are kept so that functions with nonzero traces (e.g. the
/// interpolant of `x`) can be represented; members of `H¹₀` have exact zeros
/// there.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalVector {
    scale: Scale,
    mesh: StructuredMesh,
    values: Vec<f64>,
}

impl NodalVector {
    pub fn zeros(mesh: StructuredMesh, scale: Scale) -> Self {
        Self { scale, mesh, values: vec![0.0; mesh.node_count()] }
    }

    pub fn from_values(mesh: StructuredMesh, scale: Scale, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(invalid(format!(
                "expected {} nodal values, got {}",
                mesh.node_count(),
                values.len()
            )));
        }
        Ok(Self { scale, mesh, values })
    }

    /// Nodal interpolant of `f`, boundary values included.
    pub fn interpolate_fn(mesh: StructuredMesh, scale: Scale, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..mesh.node_count())
            .map(|v| {
                let (x, y) = mesh.node_position(v);
                f(x, y)
            })
            .collect();
        Self { scale, mesh, values }
    }

    /// Builds an `H¹₀` function from its values on the free nodes.
    pub fn from_free(mesh: StructuredMesh, scale: Scale, free: &[f64]) -> Result<Self> {
        if free.len() != mesh.free_count() {
            return Err(invalid(format!(
                "expected {} free values, got {}",
                mesh.free_count(),
                free.len()
            )));
        }
        let mut values = vec![0.0; mesh.node_count()];
        for (slot, &v) in mesh.free_nodes().iter().zip(free) {
            values[*slot] = v;
        }
        Ok(Self { scale, mesh, values })
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.mesh.free_nodes().iter().map(|&v| self.values[v]).collect()
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn mesh(&self) -> &StructuredMesh {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// True when every boundary entry is exactly zero.
    pub fn satisfies_dirichlet(&self) -> bool {
        (0..self.mesh.node_count())
            .filter(|&v| self.mesh.is_boundary_node(v))
            .all(|v| self.values[v] == 0.0)
    }

    /// Zeroes all boundary entries.
    pub fn clear_boundary(&mut self) {
        for v in 0..self.mesh.node_count() {
            if self.mesh.is_boundary_node(v) {
                self.values[v] = 0.0;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn axpy(&self, a: f64, other: &NodalVector) -> Result<NodalVector> {
        self.check_same_mesh(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect();
        Ok(NodalVector { scale: self.scale, mesh: self.mesh, values })
    }

    pub fn scaled(&self, a: f64) -> NodalVector {
        NodalVector {
            scale: self.scale,
            mesh: self.mesh,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub(crate) fn check_same_mesh(&self, other: &NodalVector) -> Result<()> {
        if self.mesh != other.mesh {
            return Err(invalid(format!(
                "vectors live on different meshes (n={} vs n={})",
                self.mesh.n(),
                other.mesh.n()
            )));
        }
        Ok(())
    }

    /// Corner values of an element in local order.
    #[inline]
    pub fn element_values(&self, element: usize) -> [f64; 4] {
        self.mesh.element_nodes(element).map(|v| self.values[v])
    }

    /// Value at each element midpoint (mean of the four corners).
    pub fn element_midpoint_values(&self) -> Vec<f64> {
        (0..self.mesh.element_count())
            .map(|e| self.element_values(e).iter().sum::<f64>() * 0.25)
            .collect()
    }

    /// Gradient at each element midpoint.
    pub fn element_midpoint_gradients(&self) -> Vec<[f64; 2]> {
        let h = self.mesh.h();
        (0..self.mesh.element_count())
            .map(|e| {
                let [sw, se, ne, nw] = self.element_values(e);
                [(se - sw + ne - nw) / (2.0 * h), (nw - sw + ne - se) / (2.0 * h)]
            })
            .collect()
    }
}

// One-dimensional integrals on [0, 1] for the factors 1-t (offset 0) and t (offset 1).
#[inline]
fn mass_1d(a: usize, b: usize) -> f64 {
    if a == b {
        1.0 / 3.0
    } else {
        1.0 / 6.0
    }
}

#[inline]
fn stiff_1d(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        -1.0
    }
}

/// ∫ X_b X_a' for the 1D factors.
#[inline]
fn advect_1d(a: usize, _b: usize) -> f64 {
    if a == 1 {
        0.5
    } else {
        -0.5
    }
}

pub type LocalMatrix = [[f64; 4]; 4];

/// `coefficient · ∫ ∇φ_a · ∇φ_b` on one element; independent of the element size.
pub fn local_stiffness_q1(coefficient: f64) -> LocalMatrix {
    let mut m = [[0.0; 4]; 4];
    for (a, &(ax, ay)) in CORNER_OFFSETS.iter().enumerate() {
        for (b, &(bx, by)) in CORNER_OFFSETS.iter().enumerate() {
            m[a][b] = coefficient
                * (stiff_1d(ax, bx) * mass_1d(ay, by) + mass_1d(ax, bx) * stiff_1d(ay, by));
        }
    }
    m
}

/// `∫ φ_a φ_b` on an element of side `h`.
pub fn local_mass_q1(h: f64) -> LocalMatrix {
    let mut m = [[0.0; 4]; 4];
    for (a, &(ax, ay)) in CORNER_OFFSETS.iter().enumerate() {
        for (b, &(bx, by)) in CORNER_OFFSETS.iter().enumerate() {
            m[a][b] = h * h * mass_1d(ax, bx) * mass_1d(ay, by);
        }
    }
    m
}

/// `m[a][b] = ∫ φ_b (β · ∇φ_a)` on an element of side `h` with constant `β`.
///
/// Row index is the test function, column index the trial function.
pub fn local_gradient_coupling_q1(h: f64, beta: [f64; 2]) -> LocalMatrix {
    let mut m = [[0.0; 4]; 4];
    for (a, &(ax, ay)) in CORNER_OFFSETS.iter().enumerate() {
        for (b, &(bx, by)) in CORNER_OFFSETS.iter().enumerate() {
            m[a][b] = h
                * (beta[0] * advect_1d(ax, bx) * mass_1d(ay, by)
                    + beta[1] * mass_1d(ax, bx) * advect_1d(ay, by));
        }
    }
    m
}

/// A sparse matrix over the nodes (or free nodes) of a mesh.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    mat: SparseColMat<usize, f64>,
    symmetric: bool,
}

impl SparseOperator {
    /// Duplicate entries are summed in the order given.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[Triplet<usize, usize, f64>],
        symmetric: bool,
    ) -> Result<Self> {
        let mat = SparseColMat::try_new_from_triplets(nrows, ncols, triplets)
            .map_err(|e| invalid(format!("sparse matrix construction failed: {e:?}")))?;
        Ok(Self { mat, symmetric })
    }

    pub fn from_csc(mat: SparseColMat<usize, f64>, symmetric: bool) -> Self {
        Self { mat, symmetric }
    }

    pub fn nrows(&self) -> usize {
        self.mat.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.mat.ncols()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn csc(&self) -> &SparseColMat<usize, f64> {
        &self.mat
    }

    pub fn nnz(&self) -> usize {
        self.mat.compute_nnz()
    }

    /// Stored entries in column-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let m = self.mat.as_ref();
        let mut out = Vec::with_capacity(self.nnz());
        for j in 0..m.ncols() {
            for (i, v) in m.row_idx_of_col(j).zip(m.val_of_col(j)) {
                out.push((i, j, *v));
            }
        }
        out
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols(), "operand length");
        let m = self.mat.as_ref();
        let mut y = vec![0.0; self.nrows()];
        for j in 0..m.ncols() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, v) in m.row_idx_of_col(j).zip(m.val_of_col(j)) {
                y[i] += v * xj;
            }
        }
        y
    }

    /// `y = Aᵀ x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows(), "operand length");
        let m = self.mat.as_ref();
        (0..m.ncols())
            .map(|j| m.row_idx_of_col(j).zip(m.val_of_col(j)).map(|(i, v)| v * x[i]).sum())
            .collect()
    }

    /// Submatrix with the given rows and columns, in the given order.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let mut row_map = vec![usize::MAX; self.nrows()];
        for (pos, &r) in rows.iter().enumerate() {
            if r >= self.nrows() {
                return Err(invalid(format!("row {r} out of range")));
            }
            row_map[r] = pos;
        }
        let m = self.mat.as_ref();
        let mut triplets = Vec::new();
        for (cpos, &c) in cols.iter().enumerate() {
            if c >= self.ncols() {
                return Err(invalid(format!("column {c} out of range")));
            }
            for (i, v) in m.row_idx_of_col(c).zip(m.val_of_col(c)) {
                let r = row_map[i];
                if r != usize::MAX {
                    triplets.push(Triplet::new(r, cpos, *v));
                }
            }
        }
        let symmetric = self.symmetric && rows == cols;
        Self::from_triplets(rows.len(), cols.len(), &triplets, symmetric)
    }

    /// Drops rows and columns of boundary nodes.
    pub fn restrict_free(&self, mesh: &StructuredMesh) -> Result<Self> {
        if self.nrows() != mesh.node_count() || self.ncols() != mesh.node_count() {
            return Err(invalid("operator is not defined on all nodes of this mesh"));
        }
        let free = mesh.free_nodes();
        self.restrict(&free, &free)
    }

    pub fn to_dense(&self) -> faer::Mat<f64> {
        self.mat.to_dense()
    }

    pub fn transpose(&self) -> Self {
        Self { mat: self.mat.as_ref().transpose().to_col_major().expect("transpose allocation"), symmetric: self.symmetric }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &SparseOperator) -> Result<Self> {
        if self.ncols() != other.nrows() {
            return Err(invalid("operator dimensions differ"));
        }
        let mat = faer::sparse::linalg::matmul::sparse_sparse_matmul(
            self.mat.as_ref(),
            other.mat.as_ref(),
            1.0,
            faer::Par::Seq,
        )
        .map_err(|e| invalid(format!("sparse product failed: {e:?}")))?;
        Ok(Self { mat, symmetric: false })
    }

    /// Marks the operator as symmetric for factorization purposes.
    pub fn assume_symmetric(mut self) -> Self {
        self.symmetric = true;
        self
    }

    /// `a·self + b·other`; both operands must share dimensions.
    pub fn linear_combination(&self, a: f64, other: &SparseOperator, b: f64) -> Result<Self> {
        if self.nrows() != other.nrows() || self.ncols() != other.ncols() {
            return Err(invalid("operator dimensions differ"));
        }
        let mut triplets: Vec<_> = self
            .triplets()
            .into_iter()
            .map(|(i, j, v)| Triplet::new(i, j, a * v))
            .collect();
        triplets.extend(other.triplets().into_iter().map(|(i, j, v)| Triplet::new(i, j, b * v)));
        Self::from_triplets(
            self.nrows(),
            self.ncols(),
            &triplets,
            self.symmetric && other.symmetric,
        )
    }
}

fn assemble_elementwise(
    mesh: &StructuredMesh,
    local: impl Fn(usize) -> LocalMatrix + Sync,
    symmetric: bool,
) -> Result<SparseOperator> {
    let blocks: Vec<LocalMatrix> = (0..mesh.element_count()).into_par_iter().map(&local).collect();
    let mut triplets = Vec::with_capacity(blocks.len() * 16);
    for (e, block) in blocks.iter().enumerate() {
        let nodes = mesh.element_nodes(e);
        for a in 0..4 {
            for b in 0..4 {
                triplets.push(Triplet::new(nodes[a], nodes[b], block[a][b]));
            }
        }
    }
    SparseOperator::from_triplets(mesh.node_count(), mesh.node_count(), &triplets, symmetric)
}

fn check_len(mesh: &StructuredMesh, len: usize) -> Result<()> {
    if len != mesh.element_count() {
        return Err(invalid(format!(
            "expected {} element values, got {len}",
            mesh.element_count()
        )));
    }
    Ok(())
}

/// Stiffness matrix on all nodes with a per-element coefficient.
pub fn assemble_stiffness(mesh: &StructuredMesh, elem_coeff: &[f64]) -> Result<SparseOperator> {
    check_len(mesh, elem_coeff.len())?;
    if let Some(bad) = elem_coeff.iter().position(|c| !c.is_finite()) {
        return Err(invalid(format!("non-finite coefficient on element {bad}")));
    }
    let reference = local_stiffness_q1(1.0);
    assemble_elementwise(
        mesh,
        |e| reference.map(|row| row.map(|v| v * elem_coeff[e])),
        true,
    )
}

pub fn assemble_mass(mesh: &StructuredMesh) -> Result<SparseOperator> {
    let local = local_mass_q1(mesh.h());
    assemble_elementwise(mesh, |_| local, true)
}

/// Operator of the form `(v β, ∇w)` with `β` constant per element.
pub fn assemble_gradient_coupling(mesh: &StructuredMesh, beta: &[[f64; 2]]) -> Result<SparseOperator> {
    check_len(mesh, beta.len())?;
    let h = mesh.h();
    assemble_elementwise(mesh, |e| local_gradient_coupling_q1(h, beta[e]), false)
}

/// Axis-aligned closed rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x.0 <= x && x <= self.x.1 && self.y.0 <= y && y <= self.y.1
    }
}

/// Piecewise-constant source: the first matching region wins, otherwise `default`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PiecewiseSource {
    pub regions: Vec<(Region, f64)>,
    pub default: f64,
}

impl PiecewiseSource {
    pub fn constant(value: f64) -> Self {
        Self { regions: Vec::new(), default: value }
    }

    /// `below` for `x₂ ≤ threshold`, `above` elsewhere.
    pub fn horizontal_split(threshold: f64, below: f64, above: f64) -> Self {
        Self {
            regions: vec![(Region { x: (0.0, 1.0), y: (0.0, threshold) }, below)],
            default: above,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.regions
            .iter()
            .find(|(r, _)| r.contains(x, y))
            .map_or(self.default, |(_, v)| *v)
    }

    /// L² norm on the unit square, exact for the region layout.
    pub fn l2_norm_sampled(&self, mesh: &StructuredMesh) -> f64 {
        let h2 = mesh.h() * mesh.h();
        (0..mesh.element_count())
            .map(|e| {
                let (x, y) = mesh.element_midpoint(e);
                self.eval(x, y).powi(2) * h2
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Load vector on all nodes with midpoint sampling of `f` per element.
pub fn assemble_load_fn(mesh: &StructuredMesh, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let quarter = 0.25 * mesh.h() * mesh.h();
    let mut load = vec![0.0; mesh.node_count()];
    for e in 0..mesh.element_count() {
        let (x, y) = mesh.element_midpoint(e);
        let w = f(x, y) * quarter;
        for v in mesh.element_nodes(e) {
            load[v] += w;
        }
    }
    load
}

pub fn assemble_load(mesh: &StructuredMesh, f: &PiecewiseSource, scale: Scale) -> NodalVector {
    let values = assemble_load_fn(mesh, |x, y| f.eval(x, y));
    NodalVector::from_values(*mesh, scale, values).expect("length matches mesh")
}

fn quadratic_form(v: &NodalVector, local: &LocalMatrix, weight: impl Fn(usize) -> f64) -> f64 {
    let mesh = v.mesh();
    (0..mesh.element_count())
        .map(|e| {
            let x = v.element_values(e);
            let mut s = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    s += x[a] * local[a][b] * x[b];
                }
            }
            weight(e) * s
        })
        .sum()
}

/// `|v|₁ = sqrt(vᵀ A v)` with the unit-coefficient stiffness.
pub fn h1_seminorm(v: &NodalVector) -> f64 {
    quadratic_form(v, &local_stiffness_q1(1.0), |_| 1.0).max(0.0).sqrt()
}

/// Weighted energy seminorm `sqrt(Σ_K c_K ∫_K |∇v|²)`.
pub fn energy_seminorm(v: &NodalVector, elem_coeff: &[f64]) -> f64 {
    quadratic_form(v, &local_stiffness_q1(1.0), |e| elem_coeff[e]).max(0.0).sqrt()
}

/// `‖v‖₀ = sqrt(vᵀ M v)`.
pub fn l2_norm(v: &NodalVector) -> f64 {
    quadratic_form(v, &local_mass_q1(v.mesh().h()), |_| 1.0).max(0.0).sqrt()
}

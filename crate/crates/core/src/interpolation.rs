//! Coarse/fine transfer and the L² projection `I_H` whose kernel is the
//! fine-scale space.

use faer::sparse::Triplet;

use crate::error::{invalid, Result};
use crate::fem::{assemble_mass, local_mass_q1, NodalVector, Scale, SparseOperator};
use crate::linalg::SparseFactor;
use crate::mesh::{MeshPair, Patch, CORNER_OFFSETS};

/// Prolongation, cross mass and coarse mass for a [`MeshPair`].
pub struct TransferOperators {
    pair: MeshPair,
    /// Fine values of every coarse hat; all fine nodes × all coarse nodes.
    prolongation: SparseOperator,
    /// `C[ℓ, j] = ∫ Λ_ℓ φ_j` over coarse free nodes `ℓ` and fine free nodes `j`.
    cross_mass: SparseOperator,
    coarse_mass: SparseOperator,
    coarse_mass_factor: SparseFactor,
    fine_free_map: Vec<Option<usize>>,
}

impl TransferOperators {
    pub fn new(pair: MeshPair) -> Result<Self> {
        let prolongation = build_prolongation(&pair)?;
        let cross_mass = build_cross_mass(&pair, &prolongation)?;
        let coarse_mass = assemble_mass(&pair.coarse)?.restrict_free(&pair.coarse)?;
        let coarse_mass_factor = SparseFactor::new(&coarse_mass)?;
        Ok(Self {
            pair,
            prolongation,
            cross_mass,
            coarse_mass,
            coarse_mass_factor,
            fine_free_map: pair.fine.free_index_map(),
        })
    }

    pub fn pair(&self) -> &MeshPair {
        &self.pair
    }

    pub fn prolongation(&self) -> &SparseOperator {
        &self.prolongation
    }

    pub fn cross_mass(&self) -> &SparseOperator {
        &self.cross_mass
    }

    pub fn coarse_mass(&self) -> &SparseOperator {
        &self.coarse_mass
    }

    /// Fine free-node index of a global fine node.
    pub fn fine_free_index(&self, node: usize) -> Option<usize> {
        self.fine_free_map[node]
    }

    /// Prolongation restricted to free nodes on both meshes.
    pub fn prolongation_free(&self) -> Result<SparseOperator> {
        self.prolongation
            .restrict(&self.pair.fine.free_nodes(), &self.pair.coarse.free_nodes())
    }

    /// Exact embedding of a coarse function into the fine space.
    pub fn prolong(&self, w: &NodalVector) -> Result<NodalVector> {
        if w.mesh() != &self.pair.coarse {
            return Err(invalid("prolong expects a coarse vector"));
        }
        NodalVector::from_values(self.pair.fine, Scale::Fine, self.prolongation.apply(w.values()))
    }

    /// `I_H v = M_H⁻¹ C v`, the L² projection onto coarse `H¹₀` functions.
    ///
    /// Only the free values of `v` enter.
    pub fn interpolate(&self, v: &NodalVector) -> Result<NodalVector> {
        if v.mesh() != &self.pair.fine {
            return Err(invalid("interpolate expects a fine vector"));
        }
        let rhs = self.cross_mass.apply(&v.free_values());
        let coeffs = self.coarse_mass_factor.solve_vec(&rhs)?;
        NodalVector::from_free(self.pair.coarse, Scale::Coarse, &coeffs)
    }

    /// Coarse coefficients (free nodes) of `I_H v`.
    pub fn interpolate_free(&self, fine_free: &[f64]) -> Result<Vec<f64>> {
        let rhs = self.cross_mass.apply(fine_free);
        self.coarse_mass_factor.solve_vec(&rhs)
    }

    /// Constraint rows describing `W_h` on a patch.
    pub fn kernel_constraint_rows(&self, patch: &Patch) -> Result<PatchConstraints> {
        let cols: Vec<usize> = patch
            .fine_interior_nodes
            .iter()
            .map(|&v| {
                self.fine_free_map[v]
                    .ok_or_else(|| invalid(format!("patch node {v} is on the domain boundary")))
            })
            .collect::<Result<_>>()?;
        let all_rows: Vec<usize> = (0..self.cross_mass.nrows()).collect();
        let wide = self.cross_mass.restrict(&all_rows, &cols)?;
        let mut used = vec![false; all_rows.len()];
        for (i, _, v) in wide.triplets() {
            if v != 0.0 {
                used[i] = true;
            }
        }
        let coarse_rows: Vec<usize> = all_rows.into_iter().filter(|&r| used[r]).collect();
        let local_cols: Vec<usize> = (0..cols.len()).collect();
        let matrix = wide.restrict(&coarse_rows, &local_cols)?;
        Ok(PatchConstraints { coarse_rows, matrix })
    }
}

/// `C` restricted to the interior fine nodes of a patch, keeping only coarse
/// free nodes whose rows are not identically zero there.
pub struct PatchConstraints {
    /// Coarse free-node indices of the kept rows.
    pub coarse_rows: Vec<usize>,
    /// Kept rows × patch interior nodes.
    pub matrix: SparseOperator,
}

fn build_prolongation(pair: &MeshPair) -> Result<SparseOperator> {
    let r = pair.ratio();
    let (fine, coarse) = (&pair.fine, &pair.coarse);
    let mut triplets = Vec::with_capacity(fine.node_count() * 4);
    for v in 0..fine.node_count() {
        let (a, b) = fine.node_coords(v);
        // Coarse element containing the node; nodes on the far edges use the last element.
        let ci = (a / r).min(coarse.n() - 1);
        let cj = (b / r).min(coarse.n() - 1);
        let xi = (a - ci * r) as f64 / r as f64;
        let eta = (b - cj * r) as f64 / r as f64;
        for &(di, dj) in &CORNER_OFFSETS {
            let wx = if di == 0 { 1.0 - xi } else { xi };
            let wy = if dj == 0 { 1.0 - eta } else { eta };
            let w = wx * wy;
            if w != 0.0 {
                triplets.push(Triplet::new(v, coarse.node_index(ci + di, cj + dj), w));
            }
        }
    }
    SparseOperator::from_triplets(fine.node_count(), coarse.node_count(), &triplets, false)
}

/// Elementwise `∫ Λ_ℓ φ_j` using the exact fine representation of each coarse hat.
fn build_cross_mass(pair: &MeshPair, prolongation: &SparseOperator) -> Result<SparseOperator> {
    let (fine, coarse) = (&pair.fine, &pair.coarse);
    let coarse_free = coarse.free_index_map();
    let fine_free = fine.free_index_map();
    let local = local_mass_q1(fine.h());
    // Row-wise access to the prolongation: for each fine node, its (coarse node, weight) list.
    let mut hat_values: Vec<Vec<(usize, f64)>> = vec![Vec::new(); fine.node_count()];
    for (i, l, w) in prolongation.triplets() {
        if let Some(lf) = coarse_free[l] {
            hat_values[i].push((lf, w));
        }
    }
    let mut triplets = Vec::new();
    for e in 0..fine.element_count() {
        let nodes = fine.element_nodes(e);
        for (a, &na) in nodes.iter().enumerate() {
            for &(l, w) in &hat_values[na] {
                for (b, &nb) in nodes.iter().enumerate() {
                    if let Some(j) = fine_free[nb] {
                        triplets.push(Triplet::new(l, j, w * local[a][b]));
                    }
                }
            }
        }
    }
    SparseOperator::from_triplets(coarse.free_count(), fine.free_count(), &triplets, false)
}

//! Structured quadrilateral meshes of the unit square and oversampling patches.
//!
//! Nodes are numbered lexicographically with `x` running fastest, so node
//! `(i, j)` has index `j * (n + 1) + i`. Elements follow the same rule on the
//! `n × n` element grid. The four corners of element `(i, j)` are stored
//! counter-clockwise starting at the south-west corner:
//!
//! ```text
//!   3 (NW) ---- 2 (NE)
//!     |           |
//!   0 (SW) ---- 1 (SE)
//! ```

use crate::error::{invalid, Result};

/// Corner offsets `(di, dj)` in local order SW, SE, NE, NW.
pub const CORNER_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];

/// Uniform `n × n` quadrilateral partition of `[0, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructuredMesh {
    n: usize,
}

impl StructuredMesh {
    pub fn new(n_per_side: usize) -> Result<Self> {
        if n_per_side == 0 {
            return Err(invalid("mesh needs at least one element per side"));
        }
        Ok(Self { n: n_per_side })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Element side length.
    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn node_count(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    #[inline]
    pub fn element_count(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    #[inline]
    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        (node % (self.n + 1), node / (self.n + 1))
    }

    pub fn node_position(&self, node: usize) -> (f64, f64) {
        let (i, j) = self.node_coords(node);
        (i as f64 * self.h(), j as f64 * self.h())
    }

    #[inline]
    pub fn element_index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    #[inline]
    pub fn element_coords(&self, element: usize) -> (usize, usize) {
        (element % self.n, element / self.n)
    }

    /// Global node indices of an element in SW, SE, NE, NW order.
    #[inline]
    pub fn element_nodes(&self, element: usize) -> [usize; 4] {
        let (i, j) = self.element_coords(element);
        CORNER_OFFSETS.map(|(di, dj)| self.node_index(i + di, j + dj))
    }

    pub fn element_midpoint(&self, element: usize) -> (f64, f64) {
        let (i, j) = self.element_coords(element);
        let h = self.h();
        ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h)
    }

    #[inline]
    pub fn is_boundary_node(&self, node: usize) -> bool {
        let (i, j) = self.node_coords(node);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    /// Interior nodes in ascending global order.
    pub fn free_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&v| !self.is_boundary_node(v))
            .collect()
    }

    pub fn free_count(&self) -> usize {
        (self.n - 1) * (self.n - 1)
    }

    /// Map from global node index to position among free nodes.
    pub fn free_index_map(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        (0..self.node_count())
            .map(|v| {
                if self.is_boundary_node(v) {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    }

    /// Index of a free node `(i, j)` among free nodes; `i, j ∈ 1..n`.
    #[inline]
    pub fn free_index(&self, i: usize, j: usize) -> usize {
        (j - 1) * (self.n - 1) + (i - 1)
    }
}

/// A coarse mesh and a nested fine mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MeshPair {
    pub coarse: StructuredMesh,
    pub fine: StructuredMesh,
}

impl MeshPair {
    pub fn new(coarse_n: usize, fine_n: usize) -> Result<Self> {
        let coarse = StructuredMesh::new(coarse_n)?;
        let fine = StructuredMesh::new(fine_n)?;
        if fine_n % coarse_n != 0 {
            return Err(invalid(format!(
                "fine resolution {fine_n} is not a multiple of coarse resolution {coarse_n}"
            )));
        }
        Ok(Self { coarse, fine })
    }

    /// Fine elements per coarse element side.
    #[inline]
    pub fn ratio(&self) -> usize {
        self.fine.n() / self.coarse.n()
    }

    /// The coarse element containing a fine element.
    pub fn coarse_parent(&self, fine_element: usize) -> usize {
        let (i, j) = self.fine.element_coords(fine_element);
        let r = self.ratio();
        self.coarse.element_index(i / r, j / r)
    }

    /// Fine elements covering a coarse element, row by row.
    pub fn fine_elements_of(&self, coarse_element: usize) -> Vec<usize> {
        let (ci, cj) = self.coarse.element_coords(coarse_element);
        let r = self.ratio();
        let mut out = Vec::with_capacity(r * r);
        for j in cj * r..(cj + 1) * r {
            for i in ci * r..(ci + 1) * r {
                out.push(self.fine.element_index(i, j));
            }
        }
        out
    }

    /// The coarse node that coincides with a coarse grid position on the fine mesh.
    pub fn fine_node_of_coarse(&self, coarse_node: usize) -> usize {
        let (i, j) = self.coarse.node_coords(coarse_node);
        let r = self.ratio();
        self.fine.node_index(i * r, j * r)
    }
}

/// Inclusive rectangle of coarse element indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementRect {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl ElementRect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.x0..=self.x1).contains(&i) && (self.y0..=self.y1).contains(&j)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// The `k`-layer patch `N^k(T)` around a coarse element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub center: usize,
    pub k: usize,
    pub rect: ElementRect,
    /// Coarse elements of the patch in ascending order.
    pub elements: Vec<usize>,
    /// Fine nodes strictly inside the patch, ascending. None lies on the
    /// patch boundary or on the boundary of the domain.
    pub fine_interior_nodes: Vec<usize>,
}

impl Patch {
    /// Fine elements covered by the patch in ascending order.
    pub fn fine_elements(&self, pair: &MeshPair) -> Vec<usize> {
        let r = pair.ratio();
        let mut out = Vec::with_capacity(self.elements.len() * r * r);
        for j in self.rect.y0 * r..(self.rect.y1 + 1) * r {
            for i in self.rect.x0 * r..(self.rect.x1 + 1) * r {
                out.push(pair.fine.element_index(i, j));
            }
        }
        out
    }

    pub fn covers_domain(&self, coarse: &StructuredMesh) -> bool {
        self.elements.len() == coarse.element_count()
    }
}

/// Element rectangle of `N^k(T)`.
///
/// On a tensor grid the closure-intersection rule grows the patch by one
/// element in each of the eight directions per layer, clipped at the domain.
pub fn patch_rect(mesh: &StructuredMesh, center: usize, k: usize) -> ElementRect {
    let (i, j) = mesh.element_coords(center);
    let last = mesh.n() - 1;
    ElementRect {
        x0: i.saturating_sub(k),
        x1: (i + k).min(last),
        y0: j.saturating_sub(k),
        y1: (j + k).min(last),
    }
}

pub fn build_patch(pair: &MeshPair, center: usize, k: usize) -> Result<Patch> {
    if center >= pair.coarse.element_count() {
        return Err(invalid(format!(
            "coarse element {center} out of range (mesh has {})",
            pair.coarse.element_count()
        )));
    }
    let rect = patch_rect(&pair.coarse, center, k);
    let mut elements = Vec::with_capacity(rect.width() * rect.height());
    for j in rect.y0..=rect.y1 {
        for i in rect.x0..=rect.x1 {
            elements.push(pair.coarse.element_index(i, j));
        }
    }
    Ok(Patch {
        center,
        k,
        rect,
        elements,
        fine_interior_nodes: interior_fine_nodes(pair, &rect),
    })
}

/// Fine nodes strictly inside the rectangle.
pub fn interior_fine_nodes(pair: &MeshPair, rect: &ElementRect) -> Vec<usize> {
    let r = pair.ratio();
    let (a0, a1) = (rect.x0 * r, (rect.x1 + 1) * r);
    let (b0, b1) = (rect.y0 * r, (rect.y1 + 1) * r);
    let mut out = Vec::new();
    for b in b0 + 1..b1 {
        for a in a0 + 1..a1 {
            out.push(pair.fine.node_index(a, b));
        }
    }
    out
}

/// Largest number of coarse elements in any `k`-layer patch.
pub fn patch_count_bound(mesh: &StructuredMesh, k: usize) -> usize {
    let side = (2 * k + 1).min(mesh.n());
    side * side
}

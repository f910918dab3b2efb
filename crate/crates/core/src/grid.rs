//! Nested fine/coarse rectangular meshes on the unit square.
//!
//! Nodes are numbered row-major by `(y, x)`: node `(i, j)` (column `i`, row `j`)
//! has id `j * (nx + 1) + i`. Coarse elements are numbered the same way.

use crate::error::{Error, Result};

/// A fine grid nested inside a coarse grid on `[0, 1]²`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StructuredGridPair {
    pub nx_fine: usize,
    pub ny_fine: usize,
    pub nx_coarse: usize,
    pub ny_coarse: usize,
}

/// Fine-node rectangle `[i0, i1] × [j0, j1]` (inclusive node indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl NodeRect {
    pub fn width(&self) -> usize {
        self.i1 - self.i0 + 1
    }

    pub fn height(&self) -> usize {
        self.j1 - self.j0 + 1
    }

    pub fn len(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.i0..=self.i1).contains(&i) && (self.j0..=self.j1).contains(&j)
    }

    /// Position of node `(i, j)` in row-major order within the rectangle.
    pub fn local(&self, i: usize, j: usize) -> Option<usize> {
        self.contains(i, j)
            .then(|| (j - self.j0) * self.width() + (i - self.i0))
    }

    pub fn intersect(&self, other: &NodeRect) -> Option<NodeRect> {
        let r = NodeRect {
            i0: self.i0.max(other.i0),
            i1: self.i1.min(other.i1),
            j0: self.j0.max(other.j0),
            j1: self.j1.min(other.j1),
        };
        (r.i0 <= r.i1 && r.j0 <= r.j1).then_some(r)
    }

    /// Nodes in row-major order as `(i, j)`.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.j0..=self.j1).flat_map(move |j| (self.i0..=self.i1).map(move |i| (i, j)))
    }
}

impl StructuredGridPair {
    pub fn new(nx_fine: usize, ny_fine: usize, nx_coarse: usize, ny_coarse: usize) -> Result<Self> {
        if nx_fine == 0 || ny_fine == 0 || nx_coarse == 0 || ny_coarse == 0 {
            return Err(Error::config(format!(
                "grid counts must be >= 1, got fine {nx_fine}x{ny_fine}, coarse {nx_coarse}x{ny_coarse}"
            )));
        }
        if nx_fine % nx_coarse != 0 {
            return Err(Error::config(format!(
                "nx_fine={nx_fine} is not divisible by nx_coarse={nx_coarse}"
            )));
        }
        if ny_fine % ny_coarse != 0 {
            return Err(Error::config(format!(
                "ny_fine={ny_fine} is not divisible by ny_coarse={ny_coarse}"
            )));
        }
        Ok(StructuredGridPair {
            nx_fine,
            ny_fine,
            nx_coarse,
            ny_coarse,
        })
    }

    /// Fine mesh size `h = 1 / nx_fine`.
    pub fn h(&self) -> f64 {
        1.0 / self.nx_fine as f64
    }

    /// Coarse mesh size `H = 1 / nx_coarse`.
    pub fn coarse_h(&self) -> f64 {
        1.0 / self.nx_coarse as f64
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx_fine as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny_fine as f64
    }

    /// Fine cells per coarse cell in x and y.
    pub fn ratio(&self) -> (usize, usize) {
        (self.nx_fine / self.nx_coarse, self.ny_fine / self.ny_coarse)
    }

    pub fn num_fine_nodes(&self) -> usize {
        (self.nx_fine + 1) * (self.ny_fine + 1)
    }

    pub fn num_fine_cells(&self) -> usize {
        self.nx_fine * self.ny_fine
    }

    pub fn num_coarse_nodes(&self) -> usize {
        (self.nx_coarse + 1) * (self.ny_coarse + 1)
    }

    pub fn num_coarse_elements(&self) -> usize {
        self.nx_coarse * self.ny_coarse
    }

    #[inline]
    pub fn fine_node(&self, i: usize, j: usize) -> usize {
        j * (self.nx_fine + 1) + i
    }

    #[inline]
    pub fn fine_node_ij(&self, id: usize) -> (usize, usize) {
        (id % (self.nx_fine + 1), id / (self.nx_fine + 1))
    }

    pub fn fine_coords(&self, id: usize) -> (f64, f64) {
        let (i, j) = self.fine_node_ij(id);
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    pub fn coarse_node(&self, ci: usize, cj: usize) -> usize {
        cj * (self.nx_coarse + 1) + ci
    }

    pub fn coarse_node_ij(&self, id: usize) -> (usize, usize) {
        (id % (self.nx_coarse + 1), id / (self.nx_coarse + 1))
    }

    pub fn coarse_coords(&self, id: usize) -> (f64, f64) {
        let (ci, cj) = self.coarse_node_ij(id);
        (
            ci as f64 / self.nx_coarse as f64,
            cj as f64 / self.ny_coarse as f64,
        )
    }

    pub fn coarse_element_ij(&self, id: usize) -> (usize, usize) {
        (id % self.nx_coarse, id / self.nx_coarse)
    }

    /// Vertices of coarse element `(ei, ej)` ordered SW, SE, NW, NE.
    pub fn coarse_element_vertices(&self, id: usize) -> [usize; 4] {
        let (ei, ej) = self.coarse_element_ij(id);
        [
            self.coarse_node(ei, ej),
            self.coarse_node(ei + 1, ej),
            self.coarse_node(ei, ej + 1),
            self.coarse_node(ei + 1, ej + 1),
        ]
    }

    /// Fine-node rectangle covering coarse element `id`.
    pub fn coarse_element_rect(&self, id: usize) -> NodeRect {
        let (ei, ej) = self.coarse_element_ij(id);
        let (rx, ry) = self.ratio();
        NodeRect {
            i0: ei * rx,
            i1: (ei + 1) * rx,
            j0: ej * ry,
            j1: (ej + 1) * ry,
        }
    }

    /// Fine nodes of fine cell `(ci, cj)` ordered SW, SE, NW, NE.
    #[inline]
    pub fn cell_nodes(&self, ci: usize, cj: usize) -> [usize; 4] {
        let sw = self.fine_node(ci, cj);
        let w = self.nx_fine + 1;
        [sw, sw + 1, sw + w, sw + w + 1]
    }

    pub fn is_boundary_node(&self, id: usize) -> bool {
        let (i, j) = self.fine_node_ij(id);
        i == 0 || j == 0 || i == self.nx_fine || j == self.ny_fine
    }

    /// Trapezoidal quadrature weights on fine nodes; they sum to 1.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let cell = self.hx() * self.hy();
        (0..self.num_fine_nodes())
            .map(|id| {
                let (i, j) = self.fine_node_ij(id);
                let wx = if i == 0 || i == self.nx_fine { 0.5 } else { 1.0 };
                let wy = if j == 0 || j == self.ny_fine { 0.5 } else { 1.0 };
                cell * wx * wy
            })
            .collect()
    }

    /// Bilinear interpolation of a nodal field at `(x, y)`.
    pub fn interpolate(&self, field: &[f64], x: f64, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::config(format!("point ({x}, {y}) lies outside the unit square")));
        }
        let fx = x * self.nx_fine as f64;
        let fy = y * self.ny_fine as f64;
        let ci = (fx.floor() as usize).min(self.nx_fine - 1);
        let cj = (fy.floor() as usize).min(self.ny_fine - 1);
        let (s, t) = (fx - ci as f64, fy - cj as f64);
        let [a, b, c, d] = self.cell_nodes(ci, cj);
        Ok(field[a] * (1.0 - s) * (1.0 - t)
            + field[b] * s * (1.0 - t)
            + field[c] * (1.0 - s) * t
            + field[d] * s * t)
    }

    /// One neighborhood per coarse node, in coarse-node order.
    pub fn neighborhoods(&self) -> Vec<Neighborhood> {
        (0..self.num_coarse_nodes())
            .map(|i| Neighborhood::new(self, i))
            .collect()
    }
}

/// Union of the coarse elements sharing coarse node `coarse_node_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub coarse_node_index: usize,
    pub member_coarse_elements: Vec<usize>,
    /// Sorted global fine-node ids (row-major over `rect`).
    pub fine_nodes: Vec<usize>,
    /// True for fine nodes strictly inside ω_i.
    pub interior_mask: Vec<bool>,
    pub rect: NodeRect,
}

impl Neighborhood {
    fn new(grid: &StructuredGridPair, node: usize) -> Self {
        let (ci, cj) = grid.coarse_node_ij(node);
        let (rx, ry) = grid.ratio();
        let ex = ci.saturating_sub(1)..(ci + 1).min(grid.nx_coarse);
        let ey = cj.saturating_sub(1)..(cj + 1).min(grid.ny_coarse);
        let member_coarse_elements: Vec<usize> = ey
            .clone()
            .flat_map(|ej| ex.clone().map(move |ei| ej * grid.nx_coarse + ei))
            .collect();
        let rect = NodeRect {
            i0: ex.start * rx,
            i1: ex.end * rx,
            j0: ey.start * ry,
            j1: ey.end * ry,
        };
        let fine_nodes: Vec<usize> = rect.nodes().map(|(i, j)| grid.fine_node(i, j)).collect();
        let interior_mask = rect
            .nodes()
            .map(|(i, j)| i > rect.i0 && i < rect.i1 && j > rect.j0 && j < rect.j1)
            .collect();
        Neighborhood {
            coarse_node_index: node,
            member_coarse_elements,
            fine_nodes,
            interior_mask,
            rect,
        }
    }

    pub fn len(&self) -> usize {
        self.fine_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_nodes.is_empty()
    }

    /// Local position of global fine node `id`, if it lies in ω_i.
    pub fn local_index(&self, grid: &StructuredGridPair, id: usize) -> Option<usize> {
        let (i, j) = grid.fine_node_ij(id);
        self.rect.local(i, j)
    }

    /// Fine cells `(ci, cj)` inside ω_i.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.rect.j0..self.rect.j1)
            .flat_map(move |cj| (self.rect.i0..self.rect.i1).map(move |ci| (ci, cj)))
    }

    /// Local node positions (SW, SE, NW, NE) of the cell with lower-left node `(ci, cj)`.
    pub fn cell_local_nodes(&self, ci: usize, cj: usize) -> [usize; 4] {
        let w = self.rect.width();
        let sw = (cj - self.rect.j0) * w + (ci - self.rect.i0);
        [sw, sw + 1, sw + w, sw + w + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn table_grid_sizes() {
        let g = StructuredGridPair::new(50, 50, 5, 5).unwrap();
        assert!((g.coarse_h() - 0.2).abs() < 1e-15);
        assert!((g.h() - 0.02).abs() < 1e-15);
        assert_eq!(g.num_fine_nodes(), 2601);
        assert_eq!(g.num_coarse_nodes(), 36);
    }

    #[test]
    fn smallest_nested_pair() {
        let g = StructuredGridPair::new(2, 2, 1, 1).unwrap();
        assert_eq!(g.num_coarse_elements(), 1);
        assert_eq!(g.num_fine_nodes(), 9);
        assert_eq!(g.num_coarse_nodes(), 4);
    }

    #[test]
    fn interior_node_owns_four_elements() {
        let g = StructuredGridPair::new(4, 4, 2, 2).unwrap();
        assert_eq!(g.num_coarse_nodes(), 9);
        let nb = g.neighborhoods();
        assert_eq!(nb[4].member_coarse_elements.len(), 4);
        assert_eq!(nb[0].member_coarse_elements.len(), 1);
        assert_eq!(nb[1].member_coarse_elements.len(), 2);
    }

    #[test]
    fn non_divisible_names_the_pair() {
        let err = StructuredGridPair::new(50, 50, 7, 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nx_fine=50") && msg.contains("nx_coarse=7"), "{msg}");
        let err = StructuredGridPair::new(50, 48, 5, 5).unwrap_err();
        assert!(err.to_string().contains("ny_fine=48"));
        assert!(StructuredGridPair::new(0, 4, 1, 1).is_err());
    }

    #[test]
    fn neighborhood_geometry_50_by_5() {
        let g = StructuredGridPair::new(50, 50, 5, 5).unwrap();
        let nb = g.neighborhoods();
        let interior = &nb[g.coarse_node(2, 2)];
        assert_eq!(interior.member_coarse_elements.len(), 4);
        assert_eq!(interior.len(), 21 * 21);
        assert_eq!(interior.interior_mask.iter().filter(|&&b| b).count(), 19 * 19);
        let corner = &nb[g.coarse_node(5, 5)];
        assert_eq!(corner.member_coarse_elements, vec![24]);
        assert_eq!(corner.len(), 11 * 11);
    }

    #[test]
    fn coverage_and_multiplicity() {
        for (nf, nc) in [(50, 5), (12, 3), (6, 6), (8, 1)] {
            let g = StructuredGridPair::new(nf, nf, nc, nc).unwrap();
            let nb = g.neighborhoods();
            let covered: BTreeSet<usize> = nb.iter().flat_map(|n| n.fine_nodes.iter().copied()).collect();
            assert_eq!(covered.len(), g.num_fine_nodes());
            let total: usize = nb.iter().map(|n| n.member_coarse_elements.len()).sum();
            assert_eq!(total, 4 * g.num_coarse_elements());
            let mut count = vec![0; g.num_coarse_elements()];
            for n in &nb {
                for &e in &n.member_coarse_elements {
                    count[e] += 1;
                    assert!(g.coarse_element_vertices(e).contains(&n.coarse_node_index));
                }
                let mut sorted = n.fine_nodes.clone();
                sorted.dedup();
                assert_eq!(sorted.len(), n.fine_nodes.len());
                assert!(n.fine_nodes.windows(2).all(|w| w[0] < w[1]));
            }
            assert!(count.iter().all(|&c| c == 4));
        }
    }

    #[test]
    fn deterministic_ordering() {
        let a = StructuredGridPair::new(20, 20, 4, 4).unwrap().neighborhoods();
        let b = StructuredGridPair::new(20, 20, 4, 4).unwrap().neighborhoods();
        assert_eq!(a, b);
        let g = StructuredGridPair::new(20, 20, 4, 4).unwrap();
        let (x, y) = g.fine_coords(g.fine_node(3, 5));
        assert!((x - 0.15).abs() < 1e-15 && (y - 0.25).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_weights_sum_to_area() {
        let g = StructuredGridPair::new(10, 6, 5, 3).unwrap();
        let s: f64 = g.trapezoid_weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
    }

    #[test]
    fn interpolation_reproduces_bilinear_fields() {
        let g = StructuredGridPair::new(10, 10, 2, 2).unwrap();
        let field: Vec<f64> = (0..g.num_fine_nodes())
            .map(|id| {
                let (x, y) = g.fine_coords(id);
                1.0 + 2.0 * x - y + 3.0 * x * y
            })
            .collect();
        for (x, y) in [(0.25, 0.5), (0.33, 0.77), (1.0, 1.0), (0.0, 0.0)] {
            let v = g.interpolate(&field, x, y).unwrap();
            assert!((v - (1.0 + 2.0 * x - y + 3.0 * x * y)).abs() < 1e-13);
        }
        assert!(g.interpolate(&field, 1.5, 0.2).is_err());
    }
}

//! Bilinear finite elements for `-div(k ∇u) = f` on the unit square, plus the
//! dense generalized symmetric eigensolver used by the local spectral problems.
//!
//! Coefficients live at fine nodes and are bilinearly interpolated to the
//! 2×2 Gauss points of each cell.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::grid::StructuredGridPair;
use crate::linalg::{norm2, BandMatrix, CsrMatrix};

const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Right-hand side `f`.
#[derive(Debug, Clone, Copy)]
pub enum Source {
    Constant(f64),
    Function(fn(f64, f64) -> f64),
}

impl Source {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Function(f) => f(x, y),
        }
    }
}

/// Dirichlet data `g`, defined on the whole square so it doubles as a lift.
#[derive(Debug, Clone, Copy)]
pub enum BoundaryData {
    /// `g(x) = x₁`.
    LinearX1,
    /// `g(x) = x₂`.
    LinearX2,
    Constant(f64),
    Function(fn(f64, f64) -> f64),
}

impl BoundaryData {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            BoundaryData::LinearX1 => x,
            BoundaryData::LinearX2 => y,
            BoundaryData::Constant(c) => *c,
            BoundaryData::Function(f) => f(x, y),
        }
    }

    pub fn name(&self) -> String {
        match self {
            BoundaryData::LinearX1 => "x1".into(),
            BoundaryData::LinearX2 => "x2".into(),
            BoundaryData::Constant(c) => format!("const:{c}"),
            BoundaryData::Function(_) => "function".into(),
        }
    }
}

/// Per-cell quadrature tables for a uniform `hx × hy` cell.
#[derive(Debug, Clone)]
pub(crate) struct CellKernels {
    /// Shape values `N_a(q)`.
    shape: [[f64; 4]; 4],
    /// `w_q |J| ∇N_a(q)·∇N_b(q)`.
    grad: [[[f64; 4]; 4]; 4],
    /// `w_q |J| N_a(q) N_b(q)`.
    mass: [[[f64; 4]; 4]; 4],
    /// `w_q |J|`.
    jw: f64,
}

impl CellKernels {
    pub(crate) fn new(hx: f64, hy: f64) -> Self {
        let jw = 0.25 * hx * hy;
        let mut shape = [[0.0; 4]; 4];
        let mut grad = [[[0.0; 4]; 4]; 4];
        let mut mass = [[[0.0; 4]; 4]; 4];
        let mut q = 0;
        for &t in &GAUSS {
            for &s in &GAUSS {
                let n = [(1.0 - s) * (1.0 - t), s * (1.0 - t), (1.0 - s) * t, s * t];
                let dx = [-(1.0 - t) / hx, (1.0 - t) / hx, -t / hx, t / hx];
                let dy = [-(1.0 - s) / hy, -s / hy, (1.0 - s) / hy, s / hy];
                for a in 0..4 {
                    for b in 0..4 {
                        grad[q][a][b] = jw * (dx[a] * dx[b] + dy[a] * dy[b]);
                        mass[q][a][b] = jw * n[a] * n[b];
                    }
                }
                shape[q] = n;
                q += 1;
            }
        }
        CellKernels {
            shape,
            grad,
            mass,
            jw,
        }
    }

    /// Reference coordinates of quadrature point `q`.
    pub(crate) fn point(q: usize) -> (f64, f64) {
        (GAUSS[q % 2], GAUSS[q / 2])
    }

    /// `∫ c ∇φ_a·∇φ_b` with nodal coefficient values `c`.
    #[inline]
    pub(crate) fn stiffness(&self, c: [f64; 4]) -> [[f64; 4]; 4] {
        let mut k = [[0.0; 4]; 4];
        for q in 0..4 {
            let cq: f64 = (0..4).map(|a| self.shape[q][a] * c[a]).sum();
            for a in 0..4 {
                for b in 0..4 {
                    k[a][b] += cq * self.grad[q][a][b];
                }
            }
        }
        k
    }

    /// `∫ c φ_a φ_b` with nodal coefficient values `c`.
    #[inline]
    pub(crate) fn mass(&self, c: [f64; 4]) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for q in 0..4 {
            let cq: f64 = (0..4).map(|a| self.shape[q][a] * c[a]).sum();
            for a in 0..4 {
                for b in 0..4 {
                    m[a][b] += cq * self.mass[q][a][b];
                }
            }
        }
        m
    }

    /// `∫ f φ_a` with `f` evaluated at the physical quadrature points.
    pub(crate) fn load(&self, f_at: [f64; 4]) -> [f64; 4] {
        let mut r = [0.0; 4];
        for q in 0..4 {
            for a in 0..4 {
                r[a] += self.jw * f_at[q] * self.shape[q][a];
            }
        }
        r
    }
}

/// Assembled fine-grid system before Dirichlet elimination.
#[derive(Debug, Clone)]
pub struct FineSystem {
    pub grid: StructuredGridPair,
    pub stiffness: CsrMatrix,
    pub load: Vec<f64>,
    pub dirichlet_nodes: Vec<usize>,
    /// `g` evaluated at every fine node; equals the prescribed values on the boundary.
    pub lift: Vec<f64>,
    pub is_dirichlet: Vec<bool>,
}

pub(crate) fn check_positive(field: &[f64], what: &str) -> Result<()> {
    if let Some((p, v)) = field.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("{what} must be positive and finite; node {p} has {v}")));
    }
    Ok(())
}

/// Assembles stiffness and load for nodal `permeability`.
pub fn assemble_fine(
    grid: &StructuredGridPair,
    permeability: &[f64],
    source: Source,
    boundary: BoundaryData,
) -> Result<FineSystem> {
    let n = grid.num_fine_nodes();
    if permeability.len() != n {
        return Err(Error::config(format!(
            "permeability has {} values, grid has {n} fine nodes",
            permeability.len()
        )));
    }
    check_positive(permeability, "permeability")?;
    let cells = cell_stiffness(grid, permeability);
    Ok(fine_system_from_cells(grid, &cells, source, boundary))
}

/// Element stiffness matrices `∫ k ∇φ_a·∇φ_b` for every fine cell, row-major by cell.
pub(crate) fn cell_stiffness(grid: &StructuredGridPair, coef: &[f64]) -> Vec<[[f64; 4]; 4]> {
    let kern = CellKernels::new(grid.hx(), grid.hy());
    let mut out = Vec::with_capacity(grid.num_fine_cells());
    for cj in 0..grid.ny_fine {
        for ci in 0..grid.nx_fine {
            out.push(kern.stiffness(grid.cell_nodes(ci, cj).map(|p| coef[p])));
        }
    }
    out
}

/// Element mass matrices `∫ c φ_a φ_b` for every fine cell.
pub(crate) fn cell_mass(grid: &StructuredGridPair, coef: &[f64]) -> Vec<[[f64; 4]; 4]> {
    let kern = CellKernels::new(grid.hx(), grid.hy());
    let mut out = Vec::with_capacity(grid.num_fine_cells());
    for cj in 0..grid.ny_fine {
        for ci in 0..grid.nx_fine {
            out.push(kern.mass(grid.cell_nodes(ci, cj).map(|p| coef[p])));
        }
    }
    out
}

pub(crate) fn fine_system_from_cells(
    grid: &StructuredGridPair,
    cells: &[[[f64; 4]; 4]],
    source: Source,
    boundary: BoundaryData,
) -> FineSystem {
    let n = grid.num_fine_nodes();
    let kern = CellKernels::new(grid.hx(), grid.hy());
    let mut trip = Vec::with_capacity(16 * grid.num_fine_cells());
    let mut load = vec![0.0; n];
    for cj in 0..grid.ny_fine {
        for ci in 0..grid.nx_fine {
            let nodes = grid.cell_nodes(ci, cj);
            let ke = &cells[cj * grid.nx_fine + ci];
            let x0 = ci as f64 * grid.hx();
            let y0 = cj as f64 * grid.hy();
            let fq = [0, 1, 2, 3].map(|q| {
                let (s, t) = CellKernels::point(q);
                source.eval(x0 + s * grid.hx(), y0 + t * grid.hy())
            });
            let fe = kern.load(fq);
            for a in 0..4 {
                load[nodes[a]] += fe[a];
                for b in 0..4 {
                    trip.push((nodes[a], nodes[b], ke[a][b]));
                }
            }
        }
    }
    let stiffness = CsrMatrix::from_triplets(n, trip);
    let is_dirichlet: Vec<bool> = (0..n).map(|p| grid.is_boundary_node(p)).collect();
    let dirichlet_nodes = (0..n).filter(|&p| is_dirichlet[p]).collect();
    let lift = (0..n)
        .map(|p| {
            let (x, y) = grid.fine_coords(p);
            boundary.eval(x, y)
        })
        .collect();
    FineSystem {
        grid: grid.clone(),
        stiffness,
        load,
        dirichlet_nodes,
        lift,
        is_dirichlet,
    }
}

impl FineSystem {
    pub fn num_nodes(&self) -> usize {
        self.load.len()
    }

    /// Position of every free node in the eliminated system.
    fn free_index(&self) -> (Vec<Option<usize>>, usize) {
        let mut count = 0;
        let idx = self
            .is_dirichlet
            .iter()
            .map(|&d| {
                (!d).then(|| {
                    count += 1;
                    count - 1
                })
            })
            .collect();
        (idx, count)
    }

    /// `F - A u_g`, the load seen by the homogeneous part `u - u_g`.
    pub fn lifted_load(&self) -> Vec<f64> {
        let au = self.stiffness.matvec(&self.lift);
        self.load.iter().zip(&au).map(|(f, a)| f - a).collect()
    }

    /// Solves with Dirichlet elimination; returns nodal pressure on all nodes.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let (idx, nf) = self.free_index();
        let mut u = self.lift.clone();
        if nf == 0 {
            return Ok(u);
        }
        let nodes: Vec<usize> = (0..self.num_nodes()).filter(|&p| idx[p].is_some()).collect();
        let bw = (0..self.num_nodes())
            .filter_map(|p| idx[p].map(|i| (p, i)))
            .flat_map(|(p, i)| {
                let (cols, _) = self.stiffness.row(p);
                cols.iter().filter_map(|&c| idx[c]).map(move |j| i.abs_diff(j)).collect::<Vec<_>>()
            })
            .max()
            .unwrap_or(0);
        let mut band = BandMatrix::zeros(nf, bw);
        let rhs_full = self.lifted_load();
        let mut rhs = vec![0.0; nf];
        for (i, &p) in nodes.iter().enumerate() {
            rhs[i] = rhs_full[p];
            let (cols, vals) = self.stiffness.row(p);
            for (&c, &v) in cols.iter().zip(vals) {
                if let Some(j) = idx[c] {
                    if j <= i {
                        band.add(i, j, v);
                    }
                }
            }
        }
        let sys = band.clone();
        let x = band.cholesky()?.solve(&rhs);
        let r: Vec<f64> = sys.matvec(&x).iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let rel = norm2(&r) / norm2(&rhs).max(f64::MIN_POSITIVE);
        if norm2(&rhs) > 0.0 && rel > 1e-10 {
            return Err(Error::numerical(format!("fine solve residual {rel:e} exceeds 1e-10")));
        }
        for (i, &p) in nodes.iter().enumerate() {
            u[p] += x[i];
        }
        Ok(u)
    }

    /// `‖A u - F‖ / ‖F‖` over free nodes.
    pub fn relative_residual(&self, u: &[f64]) -> f64 {
        let au = self.stiffness.matvec(u);
        let mut r2 = 0.0;
        let mut f2 = 0.0;
        for p in 0..self.num_nodes() {
            if !self.is_dirichlet[p] {
                r2 += (au[p] - self.load[p]).powi(2);
                f2 += self.load[p].powi(2);
            }
        }
        (r2 / f2.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Energy norm `sqrt(vᵀ A v)`.
    pub fn energy_norm(&self, v: &[f64]) -> f64 {
        let av = self.stiffness.matvec(v);
        v.iter().zip(&av).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }
}

/// Lowest eigenpairs of a symmetric pencil.
#[derive(Debug, Clone)]
pub struct EigArtifacts {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// One column per eigenvalue, S-orthonormal.
    pub eigenvectors: DMatrix<f64>,
    /// `max |VᵀSV - I|`.
    pub orthogonality_residual: f64,
}

impl EigArtifacts {
    /// Largest `‖A v - λ S v‖` over the returned pairs.
    pub fn max_residual(&self, a: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
        (0..self.eigenvalues.len())
            .map(|k| {
                let v = self.eigenvectors.column(k);
                (a * v - s * v * self.eigenvalues[k]).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
pub(crate) fn fix_sign_largest(mut v: nalgebra::DVectorViewMut<f64>) {
    let amax = v.amax();
    if let Some(x) = v.iter().find(|x| x.abs() >= amax * (1.0 - 1e-8)) {
        if *x < 0.0 {
            v.neg_mut();
        }
    }
}

/// The `m` smallest eigenpairs of `A v = λ S v` with `S` symmetric positive definite.
pub fn generalized_symmetric_eig(a: &DMatrix<f64>, s: &DMatrix<f64>, m: usize) -> Result<EigArtifacts> {
    let n = a.nrows();
    if a.ncols() != n || s.nrows() != n || s.ncols() != n {
        return Err(Error::config(format!(
            "pencil shapes differ: A {}x{}, S {}x{}",
            a.nrows(),
            a.ncols(),
            s.nrows(),
            s.ncols()
        )));
    }
    if m > n {
        return Err(Error::config(format!("requested {m} eigenpairs of a {n}-dimensional pencil")));
    }
    let chol = Cholesky::new(s.clone()).ok_or_else(|| {
        Error::numerical("mass matrix is not positive definite (Cholesky failed); raise the κ̃ floor")
    })?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let x = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    let mut c = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues: Vec<f64> = order[..m].iter().map(|&i| eig.eigenvalues[i]).collect();
    let y = DMatrix::from_fn(n, m, |r, k| eig.eigenvectors[(r, order[k])]);
    let mut v = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
    for k in 0..m {
        fix_sign_largest(v.column_mut(k));
    }
    let gram = v.transpose() * s * &v;
    let orthogonality_residual = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    Ok(EigArtifacts {
        eigenvalues,
        eigenvectors: v,
        orthogonality_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(grid: &StructuredGridPair) -> Vec<f64> {
        vec![1.0; grid.num_fine_nodes()]
    }

    #[test]
    fn linear_data_reproduced_exactly() {
        let g = StructuredGridPair::new(12, 8, 3, 2).unwrap();
        let sys = assemble_fine(&g, &unit(&g), Source::Constant(0.0), BoundaryData::LinearX1).unwrap();
        let u = sys.solve().unwrap();
        for p in 0..g.num_fine_nodes() {
            assert!((u[p] - g.fine_coords(p).0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_sums_vanish_for_constant_field() {
        let g = StructuredGridPair::new(10, 10, 2, 2).unwrap();
        let k: Vec<f64> = vec![3.7; g.num_fine_nodes()];
        let sys = assemble_fine(&g, &k, Source::Constant(1.0), BoundaryData::Constant(0.0)).unwrap();
        let ones = vec![1.0; g.num_fine_nodes()];
        let r = sys.stiffness.matvec(&ones);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        assert!(sys.stiffness.asymmetry() < 1e-14);
    }

    #[test]
    fn nonpositive_permeability_names_node() {
        let g = StructuredGridPair::new(4, 4, 1, 1).unwrap();
        let mut k = unit(&g);
        k[7] = 0.0;
        let err = assemble_fine(&g, &k, Source::Constant(1.0), BoundaryData::LinearX1).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("node 7")));
    }

    #[test]
    fn mirrored_permeability_mirrored_solution() {
        let g = StructuredGridPair::new(20, 20, 4, 4).unwrap();
        let k: Vec<f64> = (0..g.num_fine_nodes())
            .map(|p| {
                let (x, y) = g.fine_coords(p);
                1.0 + 0.8 * ((x - 0.5).powi(2) * 10.0).sin().abs() + y
            })
            .collect();
        let sys = assemble_fine(&g, &k, Source::Constant(1.0), BoundaryData::Constant(0.0)).unwrap();
        let u = sys.solve().unwrap();
        for j in 0..=20 {
            for i in 0..=20 {
                let a = u[g.fine_node(i, j)];
                let b = u[g.fine_node(20 - i, j)];
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(sys.relative_residual(&u) < 1e-10);
    }

    #[test]
    fn random_fields_solve_to_tolerance() {
        let g = StructuredGridPair::new(16, 16, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let k: Vec<f64> = (0..g.num_fine_nodes()).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
            let sys = assemble_fine(&g, &k, Source::Constant(1.0), BoundaryData::LinearX1).unwrap();
            let u = sys.solve().unwrap();
            assert!(sys.relative_residual(&u) <= 1e-10);
        }
    }

    #[test]
    fn identity_pencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let s = &b * b.transpose() + DMatrix::identity(6, 6) * 6.0;
        let e = generalized_symmetric_eig(&s, &s, 6).unwrap();
        assert!(e.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert!(e.orthogonality_residual < 1e-8);
    }

    #[test]
    fn diagonal_pencil() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let s = DMatrix::identity(3, 3);
        let e = generalized_symmetric_eig(&a, &s, 2).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-14 && (e.eigenvalues[1] - 2.0).abs() < 1e-14);
        assert!((e.eigenvectors[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((e.eigenvectors[(1, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_pencil_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose();
        let s = &c * c.transpose() + DMatrix::identity(20, 20);
        let e = generalized_symmetric_eig(&a, &s, 20).unwrap();
        assert!(e.max_residual(&a, &s) <= 1e-8);
        assert!(e.orthogonality_residual <= 1e-8);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn indefinite_mass_is_numerical_error() {
        let a = DMatrix::identity(2, 2);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(generalized_symmetric_eig(&a, &s, 1), Err(Error::Numerical(_))));
        assert!(matches!(generalized_symmetric_eig(&a, &a, 3), Err(Error::Config(_))));
    }
}

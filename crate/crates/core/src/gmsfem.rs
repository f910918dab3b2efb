//! Generalized multiscale spaces and the coarse Galerkin solve.
//!
//! Offline: for each coarse neighborhood ω_i, Neumann eigenproblems
//! `A(μ_j) ψ = λ S(μ_j) ψ` over a handful of parameter samples give a
//! snapshot space; a second eigenproblem with parameter-averaged
//! coefficients compresses it to an offline space.
//!
//! Online: for a given μ the projected pencil `(R_offᵀ A(μ) R_off, R_offᵀ S(μ) R_off)`
//! selects the online functions, which are multiplied by the κ-harmonic
//! partition of unity χ_i to form a conforming global basis `R`. The coarse
//! system is `Rᵀ A^f R`, assembled block-by-block from overlapping
//! neighborhoods.
//!
//! `S` is always the κ̃-weighted mass matrix with
//! `κ̃ = κ Σ_i H² |∇χ_i|²`, which ties the local spectral problems to the
//! partition of unity.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fem::{self, BoundaryData, FineSystem, Source};
use crate::grid::{Neighborhood, StructuredGridPair};
use crate::linalg::{BandMatrix, CsrMatrix};
use crate::randfield::{sample_permeability, KLModel, ParameterVector};

/// Relative diagonal shift applied to every κ̃-weighted mass matrix.
pub const MASS_FLOOR: f64 = 1e-12;

/// Relative threshold below which directions of the projected snapshot mass matrix are dropped.
const SNAPSHOT_RANK_TOL: f64 = 1e-10;

/// χ_i for every coarse node, stored on the fine nodes of ω_i.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOfUnity {
    pub values: Vec<Vec<f64>>,
}

/// Solves `-div(κ∇χ) = 0` in every coarse element with bilinear hat traces.
pub fn build_partition_of_unity(
    grid: &StructuredGridPair,
    neighborhoods: &[Neighborhood],
    kappa: &[f64],
) -> Result<PartitionOfUnity> {
    fem::check_positive(kappa, "permeability")?;
    let cells = fem::cell_stiffness(grid, kappa);
    partition_from_cells(grid, neighborhoods, &cells)
}

fn partition_from_cells(
    grid: &StructuredGridPair,
    neighborhoods: &[Neighborhood],
    cells: &[[[f64; 4]; 4]],
) -> Result<PartitionOfUnity> {
    let (rx, ry) = grid.ratio();
    let mut values: Vec<Vec<f64>> = neighborhoods.iter().map(|n| vec![0.0; n.len()]).collect();
    let w = rx + 1;
    let local = |i: usize, j: usize| j * w + i;
    let nloc = (rx + 1) * (ry + 1);
    // interior unknown numbering inside the element
    let mut interior = vec![None; nloc];
    let mut count = 0;
    for j in 1..ry {
        for i in 1..rx {
            interior[local(i, j)] = Some(count);
            count += 1;
        }
    }
    for e in 0..grid.num_coarse_elements() {
        let rect = grid.coarse_element_rect(e);
        let mut band = BandMatrix::zeros(count, rx.max(1));
        // coupling of each interior unknown to the boundary nodes of the element
        let mut coupling: Vec<Vec<(usize, f64)>> = vec![Vec::new(); count];
        for cj in rect.j0..rect.j1 {
            for ci in rect.i0..rect.i1 {
                let ke = &cells[cj * grid.nx_fine + ci];
                let (li, lj) = (ci - rect.i0, cj - rect.j0);
                let ln = [local(li, lj), local(li + 1, lj), local(li, lj + 1), local(li + 1, lj + 1)];
                for x in 0..4 {
                    if let Some(r) = interior[ln[x]] {
                        for y in 0..4 {
                            match interior[ln[y]] {
                                Some(c) if c <= r => band.add(r, c, ke[x][y]),
                                Some(_) => {}
                                None => coupling[r].push((ln[y], ke[x][y])),
                            }
                        }
                    }
                }
            }
        }
        let chol = if count > 0 { Some(band.cholesky()?) } else { None };
        let verts = grid.coarse_element_vertices(e);
        for (vpos, &v) in verts.iter().enumerate() {
            // bilinear hat of vertex `vpos` on the element, in local coordinates
            let hat = |i: usize, j: usize| {
                let s = i as f64 / rx as f64;
                let t = j as f64 / ry as f64;
                let sx = if vpos % 2 == 0 { 1.0 - s } else { s };
                let ty = if vpos / 2 == 0 { 1.0 - t } else { t };
                sx * ty
            };
            let mut chi = vec![0.0; nloc];
            for j in 0..=ry {
                for i in 0..=rx {
                    if interior[local(i, j)].is_none() {
                        chi[local(i, j)] = hat(i, j);
                    }
                }
            }
            if let Some(chol) = &chol {
                let rhs: Vec<f64> = coupling
                    .iter()
                    .map(|row| -row.iter().map(|&(p, a)| a * chi[p]).sum::<f64>())
                    .collect();
                let x = chol.solve(&rhs);
                for j in 1..ry {
                    for i in 1..rx {
                        chi[local(i, j)] = x[interior[local(i, j)].unwrap()];
                    }
                }
            }
            let nb = &neighborhoods[v];
            for j in 0..=ry {
                for i in 0..=rx {
                    let pos = nb
                        .rect
                        .local(rect.i0 + i, rect.j0 + j)
                        .expect("coarse element lies inside its vertex neighborhoods");
                    values[v][pos] = chi[local(i, j)];
                }
            }
        }
    }
    Ok(PartitionOfUnity { values })
}

impl PartitionOfUnity {
    /// `Σ_i χ_i` at every fine node.
    pub fn sum(&self, grid: &StructuredGridPair, neighborhoods: &[Neighborhood]) -> Vec<f64> {
        let mut s = vec![0.0; grid.num_fine_nodes()];
        for (nb, vals) in neighborhoods.iter().zip(&self.values) {
            for (&p, v) in nb.fine_nodes.iter().zip(vals) {
                s[p] += v;
            }
        }
        s
    }

    /// Smallest and largest value over all χ_i.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Nodal `κ̃ = κ Σ_i H² |∇χ_i|²`; gradients are taken at fine-cell centers and averaged to nodes.
pub fn build_ktilde(
    grid: &StructuredGridPair,
    neighborhoods: &[Neighborhood],
    kappa: &[f64],
    pu: &PartitionOfUnity,
) -> Vec<f64> {
    let (rx, ry) = grid.ratio();
    let h2 = grid.coarse_h().powi(2);
    let (hx, hy) = (grid.hx(), grid.hy());
    let mut acc = vec![0.0; grid.num_fine_nodes()];
    let mut cnt = vec![0u32; grid.num_fine_nodes()];
    for cj in 0..grid.ny_fine {
        for ci in 0..grid.nx_fine {
            let e = (cj / ry) * grid.nx_coarse + ci / rx;
            let mut energy = 0.0;
            for &v in &grid.coarse_element_vertices(e) {
                let nb = &neighborhoods[v];
                let c = nb.cell_local_nodes(ci, cj).map(|p| pu.values[v][p]);
                let gx = ((c[1] - c[0]) + (c[3] - c[2])) / (2.0 * hx);
                let gy = ((c[2] - c[0]) + (c[3] - c[1])) / (2.0 * hy);
                energy += h2 * (gx * gx + gy * gy);
            }
            for p in grid.cell_nodes(ci, cj) {
                acc[p] += energy;
                cnt[p] += 1;
            }
        }
    }
    acc.iter()
        .zip(&cnt)
        .zip(kappa)
        .map(|((a, &c), k)| k * a / c as f64)
        .collect()
}

/// Coefficients derived from one permeability field.
#[derive(Debug, Clone)]
pub struct ParameterFields {
    pub kappa: Vec<f64>,
    pub pu: PartitionOfUnity,
    pub ktilde: Vec<f64>,
    stiff_cells: Vec<[[f64; 4]; 4]>,
    mass_cells: Vec<[[f64; 4]; 4]>,
}

impl ParameterFields {
    pub fn from_kappa(grid: &StructuredGridPair, neighborhoods: &[Neighborhood], kappa: Vec<f64>) -> Result<Self> {
        fem::check_positive(&kappa, "permeability")?;
        let stiff_cells = fem::cell_stiffness(grid, &kappa);
        let pu = partition_from_cells(grid, neighborhoods, &stiff_cells)?;
        let ktilde = build_ktilde(grid, neighborhoods, &kappa, &pu);
        let mass_cells = fem::cell_mass(grid, &ktilde);
        Ok(ParameterFields {
            kappa,
            pu,
            ktilde,
            stiff_cells,
            mass_cells,
        })
    }

    pub fn from_parameter(
        grid: &StructuredGridPair,
        neighborhoods: &[Neighborhood],
        kl: &KLModel,
        eta: &ParameterVector,
    ) -> Result<Self> {
        Self::from_kappa(grid, neighborhoods, sample_permeability(kl, eta)?)
    }

    fn cells(&self, kind: Operator) -> &[[[f64; 4]; 4]] {
        match kind {
            Operator::Stiffness => &self.stiff_cells,
            Operator::Mass => &self.mass_cells,
        }
    }

    /// Dense Neumann matrix of `kind` on ω_i; mass matrices include the floor shift.
    pub fn local_dense(&self, grid: &StructuredGridPair, nb: &Neighborhood, kind: Operator) -> DMatrix<f64> {
        let n = nb.len();
        let mut m = DMatrix::zeros(n, n);
        let cells = self.cells(kind);
        for (ci, cj) in nb.cells() {
            let ke = &cells[cj * grid.nx_fine + ci];
            let ln = nb.cell_local_nodes(ci, cj);
            for a in 0..4 {
                for b in 0..4 {
                    m[(ln[a], ln[b])] += ke[a][b];
                }
            }
        }
        if kind == Operator::Mass {
            let shift = MASS_FLOOR * m.trace();
            for i in 0..n {
                m[(i, i)] += shift;
            }
        }
        m
    }

    /// `M x` for the Neumann matrix of `kind` on ω_i, without forming `M`.
    fn local_apply(
        &self,
        grid: &StructuredGridPair,
        nb: &Neighborhood,
        kind: Operator,
        x: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let m = x.ncols();
        let mut y = DMatrix::zeros(x.nrows(), m);
        let cells = self.cells(kind);
        let mut diag = 0.0;
        for (ci, cj) in nb.cells() {
            let ke = &cells[cj * grid.nx_fine + ci];
            let ln = nb.cell_local_nodes(ci, cj);
            for a in 0..4 {
                diag += ke[a][a];
            }
            for c in 0..m {
                let xc = [x[(ln[0], c)], x[(ln[1], c)], x[(ln[2], c)], x[(ln[3], c)]];
                for a in 0..4 {
                    y[(ln[a], c)] += ke[a][0] * xc[0] + ke[a][1] * xc[1] + ke[a][2] * xc[2] + ke[a][3] * xc[3];
                }
            }
        }
        if kind == Operator::Mass {
            y += x * (MASS_FLOOR * diag);
        }
        y
    }

    /// `Xᵀ M X` for the Neumann matrix of `kind` on ω_i.
    pub fn project(&self, grid: &StructuredGridPair, nb: &Neighborhood, kind: Operator, x: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.local_apply(grid, nb, kind, x);
        let p = x.tr_mul(&y);
        (&p + p.transpose()) * 0.5
    }

    pub fn fine_system(&self, grid: &StructuredGridPair, source: Source, boundary: BoundaryData) -> FineSystem {
        fem::fine_system_from_cells(grid, &self.stiff_cells, source, boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Stiffness,
    Mass,
}

/// Snapshot vectors of one neighborhood.
#[derive(Debug, Clone)]
pub struct SnapshotSpace {
    /// `n_i × (J · L_i)`, blocks ordered by parameter sample.
    pub r_snap: DMatrix<f64>,
    pub per_parameter: usize,
    pub eigenvalues: Vec<Vec<f64>>,
    /// Largest eigenpair residual over all samples.
    pub max_residual: f64,
}

/// Lowest `l_i` Neumann eigenpairs of `(A(μ_j), S(μ_j))` on ω_i for every sample.
pub fn build_snapshot_space(
    grid: &StructuredGridPair,
    nb: &Neighborhood,
    samples: &[ParameterFields],
    l_i: usize,
) -> Result<SnapshotSpace> {
    if samples.is_empty() || l_i == 0 {
        return Err(Error::config("snapshot space needs J >= 1 samples and L_i >= 1"));
    }
    let n = nb.len();
    if l_i > n {
        return Err(Error::config(format!(
            "L_i={l_i} exceeds the {n} fine nodes of neighborhood {}",
            nb.coarse_node_index
        )));
    }
    let mut r_snap = DMatrix::zeros(n, samples.len() * l_i);
    let mut eigenvalues = Vec::with_capacity(samples.len());
    let mut max_residual = 0.0f64;
    for (j, fields) in samples.iter().enumerate() {
        let a = fields.local_dense(grid, nb, Operator::Stiffness);
        let s = fields.local_dense(grid, nb, Operator::Mass);
        let eig = fem::generalized_symmetric_eig(&a, &s, l_i).map_err(|e| {
            Error::numerical(format!("snapshot eigenproblem (i={}, j={j}): {e}", nb.coarse_node_index))
        })?;
        max_residual = max_residual.max(eig.max_residual(&a, &s));
        r_snap.columns_mut(j * l_i, l_i).copy_from(&eig.eigenvectors);
        eigenvalues.push(eig.eigenvalues);
    }
    Ok(SnapshotSpace {
        r_snap,
        per_parameter: l_i,
        eigenvalues,
        max_residual,
    })
}

/// Offline basis of one neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineSpace {
    /// `n_i × M_off`, S̄-orthonormal columns on the fine nodes of ω_i.
    pub r_off: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl OfflineSpace {
    pub fn dim(&self) -> usize {
        self.r_off.ncols()
    }
}

/// Spectral compression of a snapshot space with averaged coefficients.
///
/// The projected mass matrix is singular whenever snapshots repeat (the
/// constant mode appears once per sample), so it is first reduced to its
/// numerically nonsingular range.
pub fn build_offline_space(
    grid: &StructuredGridPair,
    nb: &Neighborhood,
    snapshot: &SnapshotSpace,
    averaged: &ParameterFields,
    m_off: usize,
) -> Result<OfflineSpace> {
    let r = &snapshot.r_snap;
    if m_off == 0 || m_off > r.ncols() {
        return Err(Error::config(format!(
            "M_off={m_off} must be in [1, M_snap={}]",
            r.ncols()
        )));
    }
    let a_off = averaged.project(grid, nb, Operator::Stiffness, r);
    let s_off = averaged.project(grid, nb, Operator::Mass, r);
    let se = s_off.clone().symmetric_eigen();
    let smax = se.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let keep: Vec<usize> = (0..se.eigenvalues.len())
        .filter(|&k| se.eigenvalues[k] > SNAPSHOT_RANK_TOL * smax)
        .collect();
    let m_off = if keep.len() < m_off {
        log::warn!(
            "snapshot space of neighborhood {} has numerical rank {}; M_off clamped from {m_off}",
            nb.coarse_node_index,
            keep.len()
        );
        keep.len()
    } else {
        m_off
    };
    let q = DMatrix::from_fn(r.ncols(), keep.len(), |i, c| {
        se.eigenvectors[(i, keep[c])] / se.eigenvalues[keep[c]].sqrt()
    });
    let c = q.tr_mul(&(&a_off * &q));
    let c = (&c + c.transpose()) * 0.5;
    let ident = DMatrix::identity(keep.len(), keep.len());
    let eig = fem::generalized_symmetric_eig(&c, &ident, m_off)?;
    let mut r_off = r * (q * eig.eigenvectors);
    for k in 0..m_off {
        fem::fix_sign_largest(r_off.column_mut(k));
    }
    Ok(OfflineSpace {
        r_off,
        eigenvalues: eig.eigenvalues,
    })
}

/// Parameter-specific multiscale basis (all offline modes, ascending), ready for any prefix.
#[derive(Debug, Clone)]
pub struct OnlineSpace {
    pub grid: StructuredGridPair,
    pub neighborhoods: Vec<Neighborhood>,
    /// Per neighborhood: `n_i × M_off` matrix of `χ_i ψ_k^on` columns.
    pub basis: Vec<DMatrix<f64>>,
    pub eigenvalues: Vec<Vec<f64>>,
    pub fine: FineSystem,
}

/// Online eigenproblems for one parameter, multiplied by the partition of unity.
pub fn build_online_space(
    grid: &StructuredGridPair,
    neighborhoods: &[Neighborhood],
    offline: &[OfflineSpace],
    fields: &ParameterFields,
    source: Source,
    boundary: BoundaryData,
) -> Result<OnlineSpace> {
    let mut basis = Vec::with_capacity(offline.len());
    let mut eigenvalues = Vec::with_capacity(offline.len());
    for ((nb, off), chi) in neighborhoods.iter().zip(offline).zip(&fields.pu.values) {
        let a_on = fields.project(grid, nb, Operator::Stiffness, &off.r_off);
        let s_on = fields.project(grid, nb, Operator::Mass, &off.r_off);
        let eig = fem::generalized_symmetric_eig(&a_on, &s_on, off.dim()).map_err(|e| {
            Error::numerical(format!("online eigenproblem (i={}): {e}", nb.coarse_node_index))
        })?;
        let mut psi = &off.r_off * &eig.eigenvectors;
        for k in 0..psi.ncols() {
            fem::fix_sign_largest(psi.column_mut(k));
        }
        for k in 0..psi.ncols() {
            for (p, c) in chi.iter().enumerate() {
                psi[(p, k)] *= c;
            }
        }
        basis.push(psi);
        eigenvalues.push(eig.eigenvalues);
    }
    Ok(OnlineSpace {
        grid: grid.clone(),
        neighborhoods: neighborhoods.to_vec(),
        basis,
        eigenvalues,
        fine: fields.fine_system(grid, source, boundary),
    })
}

/// What happens to basis functions of coarse nodes on `∂D`.
///
/// The homogeneous part `u - u_g` vanishes on `∂D`, so every basis function
/// has its Dirichlet rows zeroed. `Truncate` keeps the resulting functions of
/// boundary coarse nodes as near-boundary corrections; `Exclude` drops them,
/// which for `κ ≡ 1` and one mode per node gives the classical MsFEM space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryBasis {
    #[default]
    Truncate,
    Exclude,
}

/// Coarse solution prolongated to the fine grid.
#[derive(Debug, Clone)]
pub struct CoarseSolution {
    pub coefficients: Vec<f64>,
    pub pressure: Vec<f64>,
    /// Columns kept after the Dirichlet constraint, as `(neighborhood, mode)`.
    pub active: Vec<(usize, usize)>,
}

/// Assembled coarse system `Rᵀ A^f R c = Rᵀ (F - A^f u_g)`.
#[derive(Debug, Clone)]
pub struct CoarseSystem {
    pub matrix: BandMatrix,
    pub rhs: Vec<f64>,
    pub active: Vec<(usize, usize)>,
}

impl OnlineSpace {
    pub fn max_dim(&self) -> usize {
        self.basis.iter().map(|b| b.ncols()).min().unwrap_or(0)
    }

    /// Global basis columns for `m_on` modes per neighborhood, with rows at
    /// Dirichlet nodes zeroed.
    fn constrained_blocks(&self, m_on: usize) -> Result<Vec<DMatrix<f64>>> {
        if m_on == 0 || m_on > self.max_dim() {
            return Err(Error::config(format!(
                "online dimension {m_on} must be in [1, M_off={}]",
                self.max_dim()
            )));
        }
        Ok(self
            .neighborhoods
            .iter()
            .zip(&self.basis)
            .map(|(nb, b)| {
                let mut blk = b.columns(0, m_on).into_owned();
                for (p, &g) in nb.fine_nodes.iter().enumerate() {
                    if self.fine.is_dirichlet[g] {
                        blk.row_mut(p).fill(0.0);
                    }
                }
                blk
            })
            .collect())
    }

    /// Dense global basis matrix `R` (fine nodes × N_c), unconstrained.
    pub fn global_basis(&self, m_on: usize) -> Result<DMatrix<f64>> {
        if m_on == 0 || m_on > self.max_dim() {
            return Err(Error::config(format!("online dimension {m_on} out of range")));
        }
        let n = self.grid.num_fine_nodes();
        let mut r = DMatrix::zeros(n, m_on * self.basis.len());
        for (i, (nb, b)) in self.neighborhoods.iter().zip(&self.basis).enumerate() {
            for k in 0..m_on {
                for (p, &g) in nb.fine_nodes.iter().enumerate() {
                    r[(g, i * m_on + k)] = b[(p, k)];
                }
            }
        }
        Ok(r)
    }

    pub fn assemble_coarse(&self, m_on: usize, treatment: BoundaryBasis) -> Result<CoarseSystem> {
        let mut blocks = self.constrained_blocks(m_on)?;
        if treatment == BoundaryBasis::Exclude {
            for (i, b) in blocks.iter_mut().enumerate() {
                if self.is_boundary_coarse_node(i) {
                    b.fill(0.0);
                }
            }
        }
        let grid = &self.grid;
        let a = &self.fine.stiffness;
        let rhs_fine = self.fine.lifted_load();

        let col_norm_max = blocks
            .iter()
            .flat_map(|b| b.column_iter().map(|c| c.norm()).collect::<Vec<_>>())
            .fold(0.0f64, f64::max);
        let mut active = Vec::new();
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut kept: Vec<Vec<usize>> = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            offsets.push(active.len());
            let cols: Vec<usize> = (0..m_on)
                .filter(|&k| b.column(k).norm() > 1e-12 * col_norm_max)
                .collect();
            active.extend(cols.iter().map(|&k| (i, k)));
            kept.push(cols);
        }
        let blocks: Vec<DMatrix<f64>> = blocks
            .iter()
            .zip(&kept)
            .map(|(b, cols)| b.select_columns(cols))
            .collect();

        let neighbors = |i: usize| -> Vec<usize> {
            let (ci, cj) = grid.coarse_node_ij(i);
            let mut out = Vec::new();
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (x, y) = (ci as i64 + di, cj as i64 + dj);
                    if x >= 0 && y >= 0 && x <= grid.nx_coarse as i64 && y <= grid.ny_coarse as i64 {
                        out.push(grid.coarse_node(x as usize, y as usize));
                    }
                }
            }
            out
        };
        let mut bw = 0;
        for i in 0..blocks.len() {
            for j in neighbors(i) {
                if j <= i && blocks[i].ncols() > 0 && blocks[j].ncols() > 0 {
                    bw = bw.max(offsets[i] + blocks[i].ncols() - 1 - offsets[j]);
                }
            }
        }
        let mut matrix = BandMatrix::zeros(active.len(), bw);
        let mut rhs = vec![0.0; active.len()];
        for (i, nb) in self.neighborhoods.iter().enumerate() {
            let bi = &blocks[i];
            if bi.ncols() == 0 {
                continue;
            }
            // Y = A^f B_i restricted to ω_i (B_i vanishes on ∂ω_i away from ∂D)
            let mut y = DMatrix::zeros(nb.len(), bi.ncols());
            for (p, &g) in nb.fine_nodes.iter().enumerate() {
                let (cols, vals) = a.row(g);
                for (&c, &v) in cols.iter().zip(vals) {
                    if let Some(q) = nb.local_index(grid, c) {
                        for k in 0..bi.ncols() {
                            y[(p, k)] += v * bi[(q, k)];
                        }
                    }
                }
            }
            for k in 0..bi.ncols() {
                rhs[offsets[i] + k] = nb
                    .fine_nodes
                    .iter()
                    .enumerate()
                    .map(|(p, &g)| bi[(p, k)] * rhs_fine[g])
                    .sum();
            }
            for j in neighbors(i) {
                if j > i || blocks[j].ncols() == 0 {
                    continue;
                }
                let nj = &self.neighborhoods[j];
                let Some(ov) = nb.rect.intersect(&nj.rect) else { continue };
                let rows_i: Vec<usize> = ov.nodes().map(|(x, z)| nb.rect.local(x, z).unwrap()).collect();
                let rows_j: Vec<usize> = ov.nodes().map(|(x, z)| nj.rect.local(x, z).unwrap()).collect();
                let yi = y.select_rows(&rows_i);
                let bj = blocks[j].select_rows(&rows_j);
                let blk = bj.tr_mul(&yi); // (cols_j × cols_i)
                for r in 0..blk.nrows() {
                    for c in 0..blk.ncols() {
                        let (gi, gj) = (offsets[i] + c, offsets[j] + r);
                        if j == i && gj > gi {
                            continue;
                        }
                        matrix.add(gi, gj, blk[(r, c)]);
                    }
                }
            }
        }
        Ok(CoarseSystem { matrix, rhs, active })
    }

    fn is_boundary_coarse_node(&self, i: usize) -> bool {
        let (ci, cj) = self.grid.coarse_node_ij(i);
        ci == 0 || cj == 0 || ci == self.grid.nx_coarse || cj == self.grid.ny_coarse
    }

    /// Coarse Galerkin solve with `m_on` online functions per neighborhood.
    pub fn solve(&self, m_on: usize) -> Result<CoarseSolution> {
        self.solve_with(m_on, BoundaryBasis::Truncate)
    }

    pub fn solve_with(&self, m_on: usize, treatment: BoundaryBasis) -> Result<CoarseSolution> {
        let sys = self.assemble_coarse(m_on, treatment)?;
        let chol = sys.matrix.cholesky().map_err(|e| {
            Error::numerical(format!(
                "coarse matrix not positive definite at M_on={m_on} (basis truncated too far?): {e}"
            ))
        })?;
        let coefficients = chol.solve(&sys.rhs);
        let mut pressure = self.fine.lift.clone();
        for (c, &(i, k)) in coefficients.iter().zip(&sys.active) {
            let nb = &self.neighborhoods[i];
            for (p, &g) in nb.fine_nodes.iter().enumerate() {
                if !self.fine.is_dirichlet[g] {
                    pressure[g] += c * self.basis[i][(p, k)];
                }
            }
        }
        Ok(CoarseSolution {
            coefficients,
            pressure,
            active: sys.active,
        })
    }
}

/// Galerkin solve in the span of arbitrary fine-grid basis columns `r`
/// (diagnostic mode; `r = I` reproduces the fine solve).
pub fn solve_with_basis(fine: &FineSystem, r: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut r0 = r.clone();
    for &g in &fine.dirichlet_nodes {
        r0.row_mut(g).fill(0.0);
    }
    let norms: Vec<f64> = r0.column_iter().map(|c| c.norm()).collect();
    let max = norms.iter().fold(0.0f64, |a, &b| a.max(b));
    let cols: Vec<usize> = (0..r0.ncols()).filter(|&k| norms[k] > 1e-12 * max).collect();
    let r0 = r0.select_columns(&cols);
    let a = sparse_times_dense(&fine.stiffness, &r0);
    let k = r0.tr_mul(&a);
    let k = (&k + k.transpose()) * 0.5;
    let f = nalgebra::DVector::from_vec(fine.lifted_load());
    let rhs = r0.tr_mul(&f);
    let chol = nalgebra::Cholesky::new(k).ok_or_else(|| Error::numerical("coarse matrix not positive definite"))?;
    let c = chol.solve(&rhs);
    let u = &r0 * c;
    Ok(fine.lift.iter().zip(u.iter()).map(|(g, v)| g + v).collect())
}

fn sparse_times_dense(a: &CsrMatrix, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..a.dim() {
        let (cols, vals) = a.row(i);
        for k in 0..x.ncols() {
            y[(i, k)] = cols.iter().zip(vals).map(|(&j, &v)| v * x[(j, k)]).sum();
        }
    }
    y
}

/// Knobs of the offline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfflineConfig {
    /// Number of prior draws `μ_j` used for snapshots (J).
    pub n_parameters: usize,
    /// Snapshots kept per draw and neighborhood (L_i).
    pub per_parameter: usize,
    /// Offline functions per neighborhood (M_off).
    pub m_off: usize,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            n_parameters: 10,
            per_parameter: 10,
            m_off: 32,
            seed: 7,
        }
    }
}

/// Parameter-independent part of the multiscale hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineHierarchy {
    pub grid: StructuredGridPair,
    pub neighborhoods: Vec<Neighborhood>,
    pub config: OfflineConfig,
    pub snapshot_parameters: Vec<ParameterVector>,
    pub spaces: Vec<OfflineSpace>,
    /// Largest snapshot eigenpair residual seen while building.
    pub max_snapshot_residual: f64,
}

impl OfflineHierarchy {
    /// Smallest offline dimension over all neighborhoods; the largest admissible level.
    pub fn max_level_dim(&self) -> usize {
        self.spaces.iter().map(|s| s.dim()).min().unwrap_or(0)
    }
}

/// Snapshot and offline spaces for every neighborhood.
pub fn build_offline(
    grid: &StructuredGridPair,
    kl: &KLModel,
    config: &OfflineConfig,
    workers: usize,
) -> Result<OfflineHierarchy> {
    if config.n_parameters == 0 || config.per_parameter == 0 || config.m_off == 0 {
        return Err(Error::config("offline J, L_i and M_off must all be >= 1"));
    }
    if config.m_off > config.n_parameters * config.per_parameter {
        return Err(Error::config(format!(
            "M_off={} exceeds M_snap={}",
            config.m_off,
            config.n_parameters * config.per_parameter
        )));
    }
    let neighborhoods = grid.neighborhoods();
    let family = crate::rng::StreamFamily::new(config.seed, crate::rng::StreamTag::Snapshot);
    let snapshot_parameters: Vec<ParameterVector> = (0..config.n_parameters)
        .map(|j| crate::randfield::prior_draw(&family, j as u64, kl.n_modes()))
        .collect();
    let samples = crate::exec::try_par_map(snapshot_parameters.len(), workers, |j| {
        ParameterFields::from_parameter(grid, &neighborhoods, kl, &snapshot_parameters[j])
    })?;
    let n = grid.num_fine_nodes();
    let mut kbar = vec![0.0; n];
    for s in &samples {
        for (a, b) in kbar.iter_mut().zip(&s.kappa) {
            *a += b;
        }
    }
    kbar.iter_mut().for_each(|a| *a /= samples.len() as f64);
    let averaged = ParameterFields::from_kappa(grid, &neighborhoods, kbar)?;
    let built = crate::exec::try_par_map(neighborhoods.len(), workers, |i| {
        let nb = &neighborhoods[i];
        let snap = build_snapshot_space(grid, nb, &samples, config.per_parameter.min(nb.len()))?;
        let off = build_offline_space(grid, nb, &snap, &averaged, config.m_off.min(snap.r_snap.ncols()))?;
        Ok::<_, Error>((off, snap.max_residual))
    })?;
    let max_snapshot_residual = built.iter().map(|b| b.1).fold(0.0, f64::max);
    Ok(OfflineHierarchy {
        grid: grid.clone(),
        neighborhoods,
        config: *config,
        snapshot_parameters,
        spaces: built.into_iter().map(|b| b.0).collect(),
        max_snapshot_residual,
    })
}

/// What the forward model reports.
#[derive(Debug, Clone, PartialEq)]
pub enum QoiSpec {
    /// Pressure at every fine node.
    FullField,
    /// Pressure at the given points, bilinearly interpolated.
    Points(Vec<(f64, f64)>),
}

impl QoiSpec {
    pub fn validate(&self) -> Result<()> {
        if let QoiSpec::Points(pts) = self {
            for &(x, y) in pts {
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::config(format!("QoI point ({x}, {y}) lies outside the unit square")));
                }
            }
        }
        Ok(())
    }

    pub fn extract(&self, grid: &StructuredGridPair, pressure: &[f64]) -> Result<Vec<f64>> {
        match self {
            QoiSpec::FullField => Ok(pressure.to_vec()),
            QoiSpec::Points(pts) => pts.iter().map(|&(x, y)| grid.interpolate(pressure, x, y)).collect(),
        }
    }
}

/// Parameter-to-QoI map at any level of the hierarchy.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub kl: KLModel,
    pub offline: std::sync::Arc<OfflineHierarchy>,
    pub source: Source,
    pub boundary: BoundaryData,
    pub qoi: QoiSpec,
}

impl ForwardModel {
    pub fn new(
        kl: KLModel,
        offline: std::sync::Arc<OfflineHierarchy>,
        source: Source,
        boundary: BoundaryData,
        qoi: QoiSpec,
    ) -> Result<Self> {
        qoi.validate()?;
        if kl.grid != offline.grid {
            return Err(Error::config("KLE and offline spaces were built on different grids"));
        }
        Ok(ForwardModel {
            kl,
            offline,
            source,
            boundary,
            qoi,
        })
    }

    pub fn grid(&self) -> &StructuredGridPair {
        &self.offline.grid
    }

    pub fn fields(&self, eta: &ParameterVector) -> Result<ParameterFields> {
        ParameterFields::from_parameter(self.grid(), &self.offline.neighborhoods, &self.kl, eta)
    }

    /// Online basis for `eta`, holding every offline mode so any level can be read off it.
    pub fn online(&self, eta: &ParameterVector) -> Result<OnlineSpace> {
        let fields = self.fields(eta)?;
        build_online_space(
            self.grid(),
            &self.offline.neighborhoods,
            &self.offline.spaces,
            &fields,
            self.source,
            self.boundary,
        )
    }

    pub fn qoi_from(&self, online: &OnlineSpace, m_on: usize) -> Result<Vec<f64>> {
        let sol = online.solve(m_on)?;
        self.qoi.extract(self.grid(), &sol.pressure)
    }

    pub fn evaluate(&self, eta: &ParameterVector, m_on: usize) -> Result<Vec<f64>> {
        self.qoi_from(&self.online(eta)?, m_on)
    }

    /// QoI at each online dimension in `dims`, sharing one online basis.
    pub fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
        let online = self.online(eta)?;
        dims.iter().map(|&m| self.qoi_from(&online, m)).collect()
    }

    /// QoI of the fine-grid solve; the reference every level approximates.
    pub fn evaluate_fine(&self, eta: &ParameterVector) -> Result<Vec<f64>> {
        let fields = self.fields(eta)?;
        let u = fields.fine_system(self.grid(), self.source, self.boundary).solve()?;
        self.qoi.extract(self.grid(), &u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randfield::{truncated_kle, CovarianceSpec};
    use crate::rng::{StreamFamily, StreamTag};
    use std::sync::Arc;

    fn small_grid() -> StructuredGridPair {
        StructuredGridPair::new(20, 20, 4, 4).unwrap()
    }

    fn kle(grid: &StructuredGridPair, sigma2: f64) -> KLModel {
        truncated_kle(grid, &CovarianceSpec::new(sigma2, 0.1, 0.1).unwrap(), 5).unwrap()
    }

    fn model(grid: &StructuredGridPair, sigma2: f64, source: Source, cfg: OfflineConfig) -> ForwardModel {
        let kl = kle(grid, sigma2);
        let off = build_offline(grid, &kl, &cfg, 2).unwrap();
        ForwardModel::new(kl, Arc::new(off), source, BoundaryData::LinearX1, QoiSpec::FullField).unwrap()
    }

    fn small_cfg() -> OfflineConfig {
        OfflineConfig {
            n_parameters: 4,
            per_parameter: 6,
            m_off: 12,
            seed: 3,
        }
    }

    fn random_eta(i: u64) -> ParameterVector {
        crate::randfield::prior_draw(&StreamFamily::new(99, StreamTag::Custom(1)), i, 5)
    }

    fn hat(grid: &StructuredGridPair, node: usize, x: f64, y: f64) -> f64 {
        let (cx, cy) = grid.coarse_coords(node);
        let h = grid.coarse_h();
        (1.0 - (x - cx).abs() / h).max(0.0) * (1.0 - (y - cy).abs() / h).max(0.0)
    }

    #[test]
    fn partition_sums_to_one_and_stays_in_range() {
        let grid = small_grid();
        let kl = kle(&grid, 2.0);
        let nbs = grid.neighborhoods();
        for i in 0..5 {
            let k = sample_permeability(&kl, &random_eta(i)).unwrap();
            let pu = build_partition_of_unity(&grid, &nbs, &k).unwrap();
            let s = pu.sum(&grid, &nbs);
            assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
            let (lo, hi) = pu.range();
            assert!(lo >= -1e-10 && hi <= 1.0 + 1e-10, "{lo} {hi}");
        }
    }

    #[test]
    fn constant_permeability_gives_bilinear_hats() {
        let grid = small_grid();
        let nbs = grid.neighborhoods();
        let pu = build_partition_of_unity(&grid, &nbs, &vec![3.0; grid.num_fine_nodes()]).unwrap();
        for (nb, vals) in nbs.iter().zip(&pu.values) {
            for (&p, v) in nb.fine_nodes.iter().zip(vals) {
                let (x, y) = grid.fine_coords(p);
                assert!((v - hat(&grid, nb.coarse_node_index, x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ktilde_matches_analytic_hat_energy() {
        let grid = small_grid();
        let nbs = grid.neighborhoods();
        let n = grid.num_fine_nodes();
        let ones = vec![1.0; n];
        let pu = build_partition_of_unity(&grid, &nbs, &ones).unwrap();
        let kt = build_ktilde(&grid, &nbs, &ones, &pu);
        let h = grid.coarse_h();
        // |∇hat|² at a point, summed over all coarse nodes, from the closed-form hat
        let energy_at = |x: f64, y: f64| -> f64 {
            (0..grid.num_coarse_nodes())
                .map(|c| {
                    let (cx, cy) = grid.coarse_coords(c);
                    let (ax, ay) = ((x - cx).abs() / h, (y - cy).abs() / h);
                    if ax >= 1.0 || ay >= 1.0 {
                        return 0.0;
                    }
                    let gx = (1.0 - ay) / h;
                    let gy = (1.0 - ax) / h;
                    gx * gx + gy * gy
                })
                .sum::<f64>()
                * h
                * h
        };
        for &(i, j) in &[(10usize, 10usize), (7, 3), (0, 0), (13, 20)] {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for cj in j.saturating_sub(1)..(j + 1).min(grid.ny_fine) {
                for ci in i.saturating_sub(1)..(i + 1).min(grid.nx_fine) {
                    acc += energy_at((ci as f64 + 0.5) * grid.hx(), (cj as f64 + 0.5) * grid.hy());
                    cnt += 1.0;
                }
            }
            let p = grid.fine_node(i, j);
            assert!((kt[p] - acc / cnt).abs() < 1e-10, "node ({i},{j}): {} vs {}", kt[p], acc / cnt);
            assert!(kt[p] > 0.0);
        }
        let kt2 = build_ktilde(&grid, &nbs, &vec![2.0; n], &pu);
        assert!(kt.iter().zip(&kt2).all(|(a, b)| (2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0)));
    }

    #[test]
    fn snapshot_of_constant_field_starts_with_constant() {
        let grid = small_grid();
        let nbs = grid.neighborhoods();
        let fields = ParameterFields::from_kappa(&grid, &nbs, vec![1.0; grid.num_fine_nodes()]).unwrap();
        for nb in [&nbs[0], &nbs[6]] {
            let snap = build_snapshot_space(&grid, nb, std::slice::from_ref(&fields), 4).unwrap();
            assert_eq!(snap.r_snap.ncols(), 4);
            assert!(snap.eigenvalues[0][0].abs() < 1e-8);
            let c = snap.r_snap.column(0);
            assert!((c.max() - c.min()).abs() < 1e-8 * c.amax());
            assert!(snap.max_residual < 1e-8);
        }
    }

    #[test]
    fn full_retention_spans_snapshots() {
        let grid = small_grid();
        let nbs = grid.neighborhoods();
        let kl = kle(&grid, 2.0);
        let samples: Vec<_> = (0..2)
            .map(|i| ParameterFields::from_parameter(&grid, &nbs, &kl, &random_eta(i)).unwrap())
            .collect();
        let nb = &nbs[7];
        let snap = build_snapshot_space(&grid, nb, &samples, 3).unwrap();
        // the two constant modes coincide, so only five directions survive
        let off = build_offline_space(&grid, nb, &snap, &samples[0], 6).unwrap();
        assert_eq!(off.dim(), 5);
        let q = off.r_off.clone().qr().q();
        for c in snap.r_snap.column_iter() {
            let r = &c - &q * (q.transpose() * c);
            assert!(r.norm() <= 1e-8 * c.norm());
        }
    }

    #[test]
    fn offline_vectors_are_orthonormal_and_ascending() {
        let grid = small_grid();
        let nbs = grid.neighborhoods();
        let kl = kle(&grid, 2.0);
        let samples: Vec<_> = (0..3)
            .map(|i| ParameterFields::from_parameter(&grid, &nbs, &kl, &random_eta(i)).unwrap())
            .collect();
        let nb = &nbs[12];
        let snap = build_snapshot_space(&grid, nb, &samples, 5).unwrap();
        let off = build_offline_space(&grid, nb, &snap, &samples[1], 8).unwrap();
        let g = samples[1].project(&grid, nb, Operator::Mass, &off.r_off);
        assert!((g - DMatrix::identity(8, 8)).amax() < 1e-8);
        assert!(off.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        // J = 1 averaging is the identity
        let snap1 = build_snapshot_space(&grid, nb, &samples[..1], 5).unwrap();
        let off1 = build_offline_space(&grid, nb, &snap1, &samples[0], 5).unwrap();
        for (a, b) in off1.eigenvalues.iter().zip(&snap1.eigenvalues[0]) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn online_spaces_are_nested() {
        let grid = small_grid();
        let fm = model(&grid, 2.0, Source::Constant(1.0), small_cfg());
        let online = fm.online(&random_eta(4)).unwrap();
        let r4 = online.global_basis(4).unwrap();
        let r8 = online.global_basis(8).unwrap();
        for i in 0..online.basis.len() {
            for k in 0..4 {
                assert_eq!(r4.column(i * 4 + k), r8.column(i * 8 + k));
            }
        }
    }

    #[test]
    fn energy_error_decreases_with_online_dimension() {
        let grid = small_grid();
        let fm = model(&grid, 2.0, Source::Constant(1.0), small_cfg());
        for s in 0..4 {
            let eta = random_eta(10 + s);
            let online = fm.online(&eta).unwrap();
            let uf = online.fine.solve().unwrap();
            let mut last = f64::INFINITY;
            for m in [1, 2, 4, 8] {
                let u = online.solve(m).unwrap().pressure;
                let d: Vec<f64> = uf.iter().zip(&u).map(|(a, b)| a - b).collect();
                let e = online.fine.energy_norm(&d);
                assert!(e <= last + 1e-12, "m={m}: {e} > {last}");
                last = e;
            }
        }
    }

    #[test]
    fn banded_assembly_matches_dense_product() {
        let grid = small_grid();
        let fm = model(&grid, 2.0, Source::Constant(1.0), small_cfg());
        let online = fm.online(&random_eta(1)).unwrap();
        let m = 3;
        let sys = online.assemble_coarse(m, BoundaryBasis::Truncate).unwrap();
        let mut r = online.global_basis(m).unwrap();
        for &g in &online.fine.dirichlet_nodes {
            r.row_mut(g).fill(0.0);
        }
        let cols: Vec<usize> = sys.active.iter().map(|&(i, k)| i * m + k).collect();
        let r = r.select_columns(&cols);
        let dense = r.transpose() * online.fine.stiffness.to_dense() * &r;
        let band = sys.matrix.to_dense();
        assert!((&dense - &band).amax() < 1e-12 * dense.amax());
        assert!((&dense - dense.transpose()).amax() <= 1e-12 * dense.amax());
        let u_band = online.solve(m).unwrap().pressure;
        let u_dense = solve_with_basis(&online.fine, &r).unwrap();
        assert!(u_band.iter().zip(&u_dense).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn full_space_reproduces_fine_solve() {
        let grid = small_grid();
        let kl = kle(&grid, 2.0);
        let nbs = grid.neighborhoods();
        let fields = ParameterFields::from_parameter(&grid, &nbs, &kl, &random_eta(2)).unwrap();
        let fine = fields.fine_system(&grid, Source::Constant(1.0), BoundaryData::LinearX1);
        let n = grid.num_fine_nodes();
        let u = solve_with_basis(&fine, &DMatrix::identity(n, n)).unwrap();
        let uf = fine.solve().unwrap();
        assert!(u.iter().zip(&uf).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn linear_data_reproduced() {
        let grid = small_grid();
        let fm = model(&grid, 0.0, Source::Constant(0.0), small_cfg());
        let eta = ParameterVector::zeros(5);
        for m in [1, 4] {
            let u = fm.evaluate(&eta, m).unwrap();
            for (p, v) in u.iter().enumerate() {
                assert!((v - grid.fine_coords(p).0).abs() < 1e-12);
            }
        }
    }

    /// Classical Q1 coarse-grid finite elements for `κ ≡ 1`, prolongated bilinearly.
    fn classical_msfem(grid: &StructuredGridPair, f: f64) -> Vec<f64> {
        let nc = grid.num_coarse_nodes();
        let h = grid.coarse_h();
        let ke = [
            [4.0, -1.0, -1.0, -2.0],
            [-1.0, 4.0, -2.0, -1.0],
            [-1.0, -2.0, 4.0, -1.0],
            [-2.0, -1.0, -1.0, 4.0],
        ];
        let mut a = DMatrix::zeros(nc, nc);
        let mut b = nalgebra::DVector::zeros(nc);
        for e in 0..grid.nx_coarse * grid.ny_coarse {
            let v = grid.coarse_element_vertices(e);
            for x in 0..4 {
                b[v[x]] += f * h * h / 4.0;
                for y in 0..4 {
                    a[(v[x], v[y])] += ke[x][y] / 6.0;
                }
            }
        }
        let on_bdry = |c: usize| {
            let (i, j) = grid.coarse_node_ij(c);
            i == 0 || j == 0 || i == grid.nx_coarse || j == grid.ny_coarse
        };
        let mut u = nalgebra::DVector::zeros(nc);
        for c in 0..nc {
            if on_bdry(c) {
                u[c] = grid.coarse_coords(c).0;
            }
        }
        let free: Vec<usize> = (0..nc).filter(|&c| !on_bdry(c)).collect();
        let rhs = b - &a * &u;
        let aff = a.select_rows(&free).select_columns(&free);
        let x = aff.cholesky().unwrap().solve(&rhs.select_rows(&free));
        for (k, &c) in free.iter().enumerate() {
            u[c] = x[k];
        }
        (0..grid.num_fine_nodes())
            .map(|p| {
                let (x, y) = grid.fine_coords(p);
                (0..nc).map(|c| u[c] * hat(grid, c, x, y)).sum()
            })
            .collect()
    }

    #[test]
    fn one_mode_constant_field_is_classical_msfem() {
        let grid = small_grid();
        let fm = model(&grid, 0.0, Source::Constant(1.0), small_cfg());
        let online = fm.online(&ParameterVector::zeros(5)).unwrap();
        let u = online.solve_with(1, BoundaryBasis::Exclude).unwrap().pressure;
        let oracle = classical_msfem(&grid, 1.0);
        let err = u.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "max deviation {err:e}");
    }

    #[test]
    fn forward_is_deterministic_and_points_interpolate() {
        let grid = small_grid();
        let mut fm = model(&grid, 2.0, Source::Constant(1.0), small_cfg());
        let eta = random_eta(8);
        let a = fm.evaluate(&eta, 4).unwrap();
        let b = fm.evaluate(&eta, 4).unwrap();
        assert_eq!(a, b);
        fm.qoi = QoiSpec::Points(vec![(0.5, 0.5), (0.25, 0.75)]);
        let pts = fm.evaluate(&eta, 4).unwrap();
        assert_eq!(pts[0], a[grid.fine_node(10, 10)]);
        assert!(QoiSpec::Points(vec![(1.5, 0.5)]).validate().is_err());
        let levels = fm.evaluate_levels(&eta, &[2, 4]).unwrap();
        assert_eq!(levels[1], pts);
    }
}

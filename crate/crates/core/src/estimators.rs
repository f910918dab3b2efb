//! Plain and multilevel Monte Carlo over the prior.
//!
//! Levels are online dimensions `N_1 < … < N_L`. Sample `m` uses the same
//! prior draw η^m at every level it reaches, so the correction
//! `X_l^m - X_{l-1}^m` is evaluated on one permeability field and the draws at
//! level `l` are the first `M_l` draws of level `l-1`.
//!
//! All reductions use a fixed tree (chunks of [`CHUNK`] samples, pairwise
//! inside), so results are bitwise independent of the worker count.

use crate::error::{Error, Result};
use crate::exec::try_par_map;
use crate::gmsfem::ForwardModel;
use crate::linalg::pairwise_sum;
use crate::randfield::{prior_draw, ParameterVector};
use crate::rng::StreamFamily;

/// Samples evaluated between two reductions.
pub const CHUNK: usize = 256;

/// Anything that maps a parameter to QoIs at several online dimensions.
pub trait LevelForward: Sync {
    fn n_params(&self) -> usize;
    /// One QoI vector per entry of `dims`, all for the same `eta`.
    fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl LevelForward for ForwardModel {
    fn n_params(&self) -> usize {
        self.kl.n_modes()
    }

    fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
        ForwardModel::evaluate_levels(self, eta, dims)
    }
}

/// Online dimensions and sample counts per level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPlan {
    pub dims: Vec<usize>,
    pub samples: Vec<usize>,
}

impl LevelPlan {
    pub fn new(dims: Vec<usize>, samples: Vec<usize>) -> Result<Self> {
        let plan = LevelPlan { dims, samples };
        plan.validate()?;
        Ok(plan)
    }

    /// Like [`LevelPlan::new`] but allows repeated dimensions (degenerate hierarchies in tests).
    pub fn new_unchecked_dims(dims: Vec<usize>, samples: Vec<usize>) -> Result<Self> {
        let plan = LevelPlan { dims, samples };
        plan.validate_samples()?;
        Ok(plan)
    }

    fn validate_samples(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.samples.len() {
            return Err(Error::config(format!(
                "level plan needs matching non-empty N_l and M_l lists, got {} and {}",
                self.dims.len(),
                self.samples.len()
            )));
        }
        if self.samples.iter().any(|&m| m == 0) || self.samples.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config(format!(
                "M_l must be >= 1 and nonincreasing, got {:?}",
                self.samples
            )));
        }
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::config("online dimensions must be >= 1"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_samples()?;
        if self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "N_l must be strictly increasing, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }

    pub fn finest_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Cost units `N_l² M_l` of level `l` (0-based).
    pub fn cost_units(&self, l: usize) -> f64 {
        (self.dims[l] as f64).powi(2) * self.samples[l] as f64
    }

    pub fn total_cost(&self) -> f64 {
        (0..self.levels()).map(|l| self.cost_units(l)).sum()
    }
}

/// `M̂ = round(Σ N_l² M_l / N_L²)`: plain MC samples at the finest level with the same cost.
pub fn cost_matched_mc_samples(plan: &LevelPlan) -> usize {
    let nl = (plan.finest_dim() as f64).powi(2);
    (plan.total_cost() / nl).round() as usize
}

/// Componentwise sample moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
}

impl Moments {
    /// Unbiased componentwise variance; zero for a single sample.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|v| v / (self.count - 1) as f64).collect()
    }

    /// `Σ_p w_p Var[X_p]`, the expected squared weighted norm of the fluctuation.
    pub fn weighted_variance(&self, weights: &[f64]) -> f64 {
        pairwise_sum(&self.variance().iter().zip(weights).map(|(v, w)| v * w).collect::<Vec<_>>())
    }
}

/// Chunked moment accumulation with a fixed reduction order.
struct MomentAccumulator {
    count: usize,
    sums: Vec<Vec<f64>>,
    // (count, chunk mean, chunk m2) per chunk, merged in order at the end
    chunks: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl MomentAccumulator {
    fn new() -> Self {
        MomentAccumulator {
            count: 0,
            sums: Vec::new(),
            chunks: Vec::new(),
        }
    }

    fn push_chunk(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.is_empty() {
            return Ok(());
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) || self.chunks.first().is_some_and(|c| c.1.len() != dim) {
            return Err(Error::numerical("forward returned QoI vectors of differing length"));
        }
        let n = values.len();
        let mut col = vec![0.0; n];
        let mut sum = vec![0.0; dim];
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for p in 0..dim {
            for (c, v) in col.iter_mut().zip(values) {
                *c = v[p];
            }
            sum[p] = pairwise_sum(&col);
            mean[p] = sum[p] / n as f64;
            for c in col.iter_mut() {
                *c = (*c - mean[p]).powi(2);
            }
            m2[p] = pairwise_sum(&col);
        }
        self.count += n;
        self.sums.push(sum);
        self.chunks.push((n, mean, m2));
        Ok(())
    }

    fn finish(self) -> Moments {
        let dim = self.chunks.first().map(|c| c.1.len()).unwrap_or(0);
        let total = self.count as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|p| pairwise_sum(&self.sums.iter().map(|s| s[p]).collect::<Vec<_>>()) / total)
            .collect();
        let mut m2 = vec![0.0; dim];
        for (n, cm, c2) in &self.chunks {
            for p in 0..dim {
                m2[p] += c2[p] + *n as f64 * (cm[p] - mean[p]).powi(2);
            }
        }
        Moments {
            count: self.count,
            mean,
            m2,
        }
    }
}

/// Plain Monte Carlo result.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub dim: usize,
    pub moments: Moments,
}

impl McEstimate {
    pub fn mean(&self) -> &[f64] {
        &self.moments.mean
    }
}

/// Arithmetic mean of the QoI at online dimension `dim` over prior draws `0..m` of `family`.
pub fn mc_estimate<F: LevelForward + ?Sized>(
    forward: &F,
    dim: usize,
    m: usize,
    family: &StreamFamily,
    workers: usize,
) -> Result<McEstimate> {
    if m == 0 {
        return Err(Error::config("Monte Carlo needs M >= 1 samples"));
    }
    let mut acc = MomentAccumulator::new();
    for start in (0..m).step_by(CHUNK) {
        let n = CHUNK.min(m - start);
        let values = try_par_map(n, workers, |k| {
            let idx = (start + k) as u64;
            let eta = prior_draw(family, idx, forward.n_params());
            forward
                .evaluate_levels(&eta, &[dim])
                .map(|mut v| v.remove(0))
                .map_err(|e| e.context(format!("sample {idx} (seed {}, N={dim})", family.seed())))
        })?;
        acc.push_chunk(&values)?;
    }
    Ok(McEstimate {
        dim,
        moments: acc.finish(),
    })
}

/// Per-level correction statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    pub dim: usize,
    /// Moments of `X_l - X_{l-1}` (with `X_0 = 0`).
    pub correction: Moments,
}

/// Multilevel Monte Carlo result.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEstimate {
    pub plan: LevelPlan,
    pub levels: Vec<LevelStats>,
    /// `E^L = Σ_l E_{M_l}(X_l - X_{l-1})`.
    pub combined: Vec<f64>,
}

impl LevelEstimate {
    /// Largest relative deviation between `combined` and the sum of level means.
    pub fn telescoping_residual(&self) -> f64 {
        let dim = self.combined.len();
        (0..dim)
            .map(|p| {
                let s: f64 = self.levels.iter().map(|l| l.correction.mean[p]).sum();
                (s - self.combined[p]).abs() / self.combined[p].abs().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

/// Multilevel estimate with nested draws `0..M_l` of `family` at level `l`.
pub fn mlmc_estimate<F: LevelForward + ?Sized>(
    forward: &F,
    plan: &LevelPlan,
    family: &StreamFamily,
    workers: usize,
) -> Result<LevelEstimate> {
    plan.validate_samples()?;
    let nl = plan.levels();
    let m1 = plan.samples[0];
    let mut accs: Vec<MomentAccumulator> = (0..nl).map(|_| MomentAccumulator::new()).collect();
    for start in (0..m1).step_by(CHUNK) {
        let n = CHUNK.min(m1 - start);
        let per_sample = try_par_map(n, workers, |k| {
            let idx = start + k;
            let top = plan.samples.iter().take_while(|&&m| idx < m).count();
            let eta = prior_draw(family, idx as u64, forward.n_params());
            let x = forward.evaluate_levels(&eta, &plan.dims[..top]).map_err(|e| {
                e.context(format!(
                    "sample {idx} (seed {}, levels 1..={top}, N={:?})",
                    family.seed(),
                    &plan.dims[..top]
                ))
            })?;
            let mut corr = Vec::with_capacity(top);
            for l in 0..top {
                if l == 0 {
                    corr.push(x[0].clone());
                } else {
                    corr.push(x[l].iter().zip(&x[l - 1]).map(|(a, b)| a - b).collect::<Vec<f64>>());
                }
            }
            Ok::<_, Error>(corr)
        })?;
        for (l, acc) in accs.iter_mut().enumerate() {
            let vals: Vec<Vec<f64>> = per_sample
                .iter()
                .filter(|c| c.len() > l)
                .map(|c| c[l].clone())
                .collect();
            acc.push_chunk(&vals)?;
        }
    }
    let levels: Vec<LevelStats> = accs
        .into_iter()
        .enumerate()
        .map(|(l, acc)| LevelStats {
            level: l + 1,
            dim: plan.dims[l],
            correction: acc.finish(),
        })
        .collect();
    let dim = levels[0].correction.mean.len();
    let mut combined = levels[0].correction.mean.clone();
    for lv in &levels[1..] {
        for p in 0..dim {
            combined[p] += lv.correction.mean[p];
        }
    }
    Ok(LevelEstimate {
        plan: plan.clone(),
        levels,
        combined,
    })
}

/// Sample counts equating the error terms of the MLMC bound.
///
/// `M_1 = M E[X²]/δ_L²` and `M_l = M (δ_{l-1}/δ_L)²` for `l ≥ 2`, rounded up
/// and made nonincreasing by a running maximum from the right.
pub fn allocate_samples(delta: &[f64], m: usize, e_x2: f64) -> Result<Vec<usize>> {
    if delta.is_empty() || m == 0 || !(e_x2 >= 0.0) {
        return Err(Error::config("allocation needs at least one δ, M >= 1 and E[X²] >= 0"));
    }
    if delta.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::config(format!("δ_l must be positive, got {delta:?}")));
    }
    if delta.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::config(format!("δ_l must decrease with the level, got {delta:?}")));
    }
    if delta.windows(2).any(|w| w[0] == w[1]) {
        log::warn!("δ_l has equal neighbours {delta:?}; the hierarchy gains nothing there");
    }
    let dl = *delta.last().unwrap();
    let mf = m as f64;
    // ceiling with a little slack so exact products are not bumped by round-off
    let up = |x: f64| (x * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(delta.len());
    out.push(up(mf * e_x2 / (dl * dl)));
    for l in 1..delta.len() {
        out.push(up(mf * (delta[l - 1] / dl).powi(2)));
    }
    for l in (0..out.len() - 1).rev() {
        out[l] = out[l].max(out[l + 1]);
    }
    Ok(out)
}

/// Right-hand side `(2L+1) δ_L / √M` of the MLMC error bound under [`allocate_samples`].
pub fn mlmc_error_bound(delta: &[f64], m: usize) -> f64 {
    (2 * delta.len() + 1) as f64 * delta.last().copied().unwrap_or(0.0) / (m as f64).sqrt()
}

/// `‖v‖_w = sqrt(Σ_p w_p v_p²)`.
pub fn weighted_norm(v: &[f64], weights: &[f64]) -> f64 {
    pairwise_sum(&v.iter().zip(weights).map(|(x, w)| w * x * x).collect::<Vec<_>>()).sqrt()
}

/// `‖ref - est‖ / ‖ref‖` under nodal quadrature weights.
pub fn relative_l2_error(estimate: &[f64], reference: &[f64], weights: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() || reference.len() != weights.len() {
        return Err(Error::config(format!(
            "field lengths differ: estimate {}, reference {}, weights {}",
            estimate.len(),
            reference.len(),
            weights.len()
        )));
    }
    let den = weighted_norm(reference, weights);
    if den == 0.0 {
        return Err(Error::Domain("reference field has zero L2 norm".into()));
    }
    let diff: Vec<f64> = reference.iter().zip(estimate).map(|(r, e)| r - e).collect();
    Ok(weighted_norm(&diff, weights) / den)
}

/// Error proxies `δ_l = mean ‖X_l - X_ref‖_w` from `n` pilot draws, where
/// `reference` produces the QoI the levels approximate.
pub fn pilot_deltas<F, R>(
    forward: &F,
    dims: &[usize],
    reference: R,
    n: usize,
    family: &StreamFamily,
    weights: &[f64],
    workers: usize,
) -> Result<Vec<f64>>
where
    F: LevelForward + ?Sized,
    R: Fn(&ParameterVector) -> Result<Vec<f64>> + Sync,
{
    if n == 0 {
        return Err(Error::config("pilot needs at least one sample"));
    }
    let per = try_par_map(n, workers, |k| {
        let eta = prior_draw(family, k as u64, forward.n_params());
        let x = forward.evaluate_levels(&eta, dims)?;
        let r = reference(&eta)?;
        Ok::<_, Error>(
            x.iter()
                .map(|xl| {
                    let d: Vec<f64> = xl.iter().zip(&r).map(|(a, b)| a - b).collect();
                    weighted_norm(&d, weights)
                })
                .collect::<Vec<f64>>(),
        )
    })?;
    Ok((0..dims.len())
        .map(|l| pairwise_sum(&per.iter().map(|p| p[l]).collect::<Vec<_>>()) / n as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamTag;

    /// `X_l(η) = a(η) + b(η) 2^{-N_l}`, so level differences shrink geometrically.
    struct Toy;

    impl LevelForward for Toy {
        fn n_params(&self) -> usize {
            2
        }

        fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
            let e = eta.as_slice();
            Ok(dims
                .iter()
                .map(|&n| {
                    let s = 0.5f64.powi(n as i32);
                    vec![1.0 + e[0] + s * e[1], e[0] * e[1] + s]
                })
                .collect())
        }
    }

    struct Constant(f64);

    impl LevelForward for Constant {
        fn n_params(&self) -> usize {
            1
        }

        fn evaluate_levels(&self, _: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
            Ok(dims.iter().map(|_| vec![self.0, -self.0]).collect())
        }
    }

    fn fam(seed: u64) -> StreamFamily {
        StreamFamily::new(seed, StreamTag::Mlmc)
    }

    #[test]
    fn constant_qoi_has_zero_variance() {
        let est = mc_estimate(&Constant(0.3), 1, 50, &fam(1), 2).unwrap();
        assert!((est.mean()[0] - 0.3).abs() < 1e-15);
        assert!(est.moments.variance().iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn single_sample_mean_is_the_evaluation() {
        let f = fam(4);
        let est = mc_estimate(&Toy, 3, 1, &f, 1).unwrap();
        let x = Toy.evaluate_levels(&prior_draw(&f, 0, 2), &[3]).unwrap();
        assert_eq!(est.mean(), &x[0][..]);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let plan = LevelPlan::new(vec![1, 2, 4], vec![600, 300, 20]).unwrap();
        let a = mlmc_estimate(&Toy, &plan, &fam(2), 1).unwrap();
        let b = mlmc_estimate(&Toy, &plan, &fam(2), 4).unwrap();
        assert_eq!(a, b);
        let c = mc_estimate(&Toy, 4, 700, &fam(2), 1).unwrap();
        let d = mc_estimate(&Toy, 4, 700, &fam(2), 3).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn one_level_is_plain_mc() {
        let plan = LevelPlan::new(vec![5], vec![77]).unwrap();
        let ml = mlmc_estimate(&Toy, &plan, &fam(3), 2).unwrap();
        let mc = mc_estimate(&Toy, 5, 77, &fam(3), 2).unwrap();
        assert_eq!(ml.combined, mc.moments.mean);
    }

    #[test]
    fn identical_levels_collapse_to_mc() {
        let plan = LevelPlan::new_unchecked_dims(vec![3, 3, 3], vec![40, 40, 40]).unwrap();
        let ml = mlmc_estimate(&Toy, &plan, &fam(5), 2).unwrap();
        for lv in &ml.levels[1..] {
            assert!(lv.correction.mean.iter().all(|&v| v == 0.0));
        }
        let mc = mc_estimate(&Toy, 3, 40, &fam(5), 1).unwrap();
        assert_eq!(ml.combined, mc.moments.mean);
        assert!(ml.telescoping_residual() <= 1e-14);
    }

    #[test]
    fn draws_are_nested_across_levels() {
        // a forward that records the draws it sees per level
        struct Echo;
        impl LevelForward for Echo {
            fn n_params(&self) -> usize {
                1
            }
            fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
                Ok(dims.iter().map(|&n| vec![eta.0[0] * n as f64]).collect())
            }
        }
        let plan = LevelPlan::new(vec![1, 2], vec![10, 4]).unwrap();
        let ml = mlmc_estimate(&Echo, &plan, &fam(6), 1).unwrap();
        // correction at level 2 is η^m(2 - 1) over the first four draws
        let first4: f64 = (0..4).map(|m| prior_draw(&fam(6), m, 1).0[0]).sum::<f64>() / 4.0;
        assert!((ml.levels[1].correction.mean[0] - first4).abs() < 1e-15);
    }

    #[test]
    fn cost_matched_counts() {
        let plan = LevelPlan::new(vec![4, 8, 16], vec![128, 32, 8]).unwrap();
        assert_eq!(cost_matched_mc_samples(&plan), 24);
        assert_eq!(cost_matched_mc_samples(&LevelPlan::new(vec![7], vec![13]).unwrap()), 13);
        assert_eq!(cost_matched_mc_samples(&LevelPlan::new(vec![2, 4], vec![16, 4]).unwrap()), 8);
    }

    #[test]
    fn plan_validation() {
        assert!(LevelPlan::new(vec![4, 4], vec![2, 1]).is_err());
        assert!(LevelPlan::new(vec![4, 8], vec![1, 2]).is_err());
        assert!(LevelPlan::new(vec![4, 8], vec![2]).is_err());
        assert!(LevelPlan::new(vec![4, 8], vec![2, 0]).is_err());
    }

    #[test]
    fn allocation_worked_example() {
        let m = allocate_samples(&[0.4, 0.2, 0.1], 2, 0.0).unwrap();
        assert_eq!(&m[1..], &[32, 8]);
        assert!(m[0] >= 32);
        let eq = allocate_samples(&[0.3, 0.3, 0.3], 5, 0.09).unwrap();
        assert_eq!(eq, vec![5, 5, 5]);
        assert!(allocate_samples(&[0.1, 0.2], 2, 1.0).is_err());
    }

    #[test]
    fn allocation_bound_holds_on_gaussian_toy() {
        // X = Z, X_l = Z + ε_l W with W independent: δ_l = ε_l exactly
        struct Gauss;
        impl LevelForward for Gauss {
            fn n_params(&self) -> usize {
                2
            }
            fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
                Ok(dims.iter().map(|&n| vec![eta.0[0] + eta.0[1] / n as f64]).collect())
            }
        }
        let dims = [2usize, 4, 8];
        let delta: Vec<f64> = dims.iter().map(|&n| 1.0 / n as f64).collect();
        let big_m = 4;
        let alloc = allocate_samples(&delta, big_m, 1.0).unwrap();
        let plan = LevelPlan::new(dims.to_vec(), alloc).unwrap();
        let reps = 200;
        let mse: f64 = (0..reps)
            .map(|r| {
                let est = mlmc_estimate(&Gauss, &plan, &fam(9).replicate(r), 1).unwrap();
                est.combined[0].powi(2)
            })
            .sum::<f64>()
            / reps as f64;
        assert!(mse.sqrt() <= mlmc_error_bound(&delta, big_m), "{} vs {}", mse.sqrt(), mlmc_error_bound(&delta, big_m));
    }

    #[test]
    fn relative_error_cases() {
        let w = vec![0.25, 0.5, 0.25];
        let r = vec![1.0, -2.0, 3.0];
        assert_eq!(relative_l2_error(&r, &r, &w).unwrap(), 0.0);
        assert!((relative_l2_error(&[0.0; 3], &r, &w).unwrap() - 1.0).abs() < 1e-15);
        let s: Vec<f64> = r.iter().map(|v| v * (1.0 + 1e-3)).collect();
        assert!((relative_l2_error(&s, &r, &w).unwrap() - 1e-3).abs() < 1e-12);
        assert!(matches!(relative_l2_error(&r, &[0.0; 3], &w), Err(Error::Domain(_))));
    }

    #[test]
    fn variance_matches_two_pass_formula() {
        let est = mc_estimate(&Toy, 2, 600, &fam(8), 2).unwrap();
        let xs: Vec<f64> = (0..600)
            .map(|m| Toy.evaluate_levels(&prior_draw(&fam(8), m, 2), &[2]).unwrap()[0][1])
            .collect();
        let mean = xs.iter().sum::<f64>() / 600.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 599.0;
        assert!((est.moments.variance()[1] - var).abs() < 1e-12 * var);
    }
}

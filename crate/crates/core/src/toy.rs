//! An enumerable posterior for checking samplers against exact answers.
//!
//! One parameter on a uniform grid of states, `F_l(η) = tanh η + 0.3·2^{-l} η²`
//! (1-based `l`), Gaussian likelihood around a scalar datum and a standard
//! normal prior. The proposal is a symmetric index walk of ±1..±`max_step`;
//! steps off the grid land outside the support and are rejected.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::Result;
use crate::samplers::{
    batch_means_stderr, metropolis_hastings, mlmcmc_estimate, mlmcmc_screen, screened_acceptance,
    screened_acceptance_composed, LevelTarget, MlmcmcConfig, ProposalAnchor, RunLength,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteToy {
    pub levels: usize,
    pub observation: f64,
    /// σ at the finest level; level `l` uses `2^{(L-l)/2}` times this.
    pub sigma_finest: f64,
    pub states: usize,
    pub max_step: usize,
}

impl Default for DiscreteToy {
    fn default() -> Self {
        DiscreteToy {
            levels: 3,
            observation: 0.3,
            sigma_finest: 0.2,
            states: 101,
            max_step: 5,
        }
    }
}

/// Outcome of a multilevel run on the toy.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelCheck {
    pub estimate: f64,
    pub oracle: f64,
    pub stderr: f64,
    pub funnel_holds: bool,
    pub acceptance_rates: Vec<f64>,
}

impl DiscreteToy {
    /// States span [-5, 5].
    pub fn eta(&self, i: usize) -> f64 {
        -5.0 + 10.0 * i as f64 / (self.states - 1) as f64
    }

    pub fn forward(&self, level: usize, i: usize) -> f64 {
        let e = self.eta(i);
        e.tanh() + 0.3 * 0.5f64.powi((level + 1) as i32) * e * e
    }

    pub fn sigma(&self, level: usize) -> f64 {
        2f64.powf((self.levels - 1 - level) as f64 / 2.0) * self.sigma_finest
    }

    pub fn log_pi(&self, level: usize, i: usize) -> f64 {
        let r = self.observation - self.forward(level, i);
        -r * r / (2.0 * self.sigma(level).powi(2)) - 0.5 * self.eta(i).powi(2)
    }

    /// Like [`Self::log_pi`] but `-∞` off the grid.
    pub fn log_pi_state(&self, level: usize, s: i64) -> f64 {
        if s < 0 || s as usize >= self.states {
            f64::NEG_INFINITY
        } else {
            self.log_pi(level, s as usize)
        }
    }

    pub fn log_pi_table(&self) -> Vec<Vec<f64>> {
        (0..self.levels)
            .map(|l| (0..self.states).map(|i| self.log_pi(l, i)).collect())
            .collect()
    }

    /// Proposal probabilities between grid states; mass leaving the grid is not shown.
    pub fn proposal_matrix(&self) -> DMatrix<f64> {
        let p = 1.0 / (2 * self.max_step) as f64;
        DMatrix::from_fn(self.states, self.states, |a, b| {
            let d = a.abs_diff(b);
            if (1..=self.max_step).contains(&d) {
                p
            } else {
                0.0
            }
        })
    }

    pub fn step(s: &i64, rng: &mut ChaCha8Rng) -> i64 {
        Self::step_with(s, 5, rng)
    }

    fn step_with(s: &i64, max_step: usize, rng: &mut ChaCha8Rng) -> i64 {
        let k = rng.random_range(1..=max_step as i64);
        if rng.random::<bool>() {
            s + k
        } else {
            s - k
        }
    }

    /// Normalized posterior at `level` by brute-force enumeration.
    pub fn posterior(&self, level: usize) -> Vec<f64> {
        let lp: Vec<f64> = (0..self.states).map(|i| self.log_pi(level, i)).collect();
        let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lp.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|v| v / z).collect()
    }

    /// Exact posterior mean of `F_L` under `π_L`.
    pub fn posterior_mean(&self) -> f64 {
        let l = self.levels - 1;
        self.posterior(l)
            .iter()
            .enumerate()
            .map(|(i, p)| p * self.forward(l, i))
            .sum()
    }

    fn start(&self) -> i64 {
        (self.states / 2) as i64
    }

    /// Total-variation distance between a finest-level MH histogram and the exact posterior.
    pub fn metropolis_tv(&self, steps: usize, seed: u64) -> Result<f64> {
        let l = self.levels - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = metropolis_hastings(
            self.start(),
            |s| Ok(self.log_pi_state(l, *s)),
            |s, r| Self::step_with(s, self.max_step, r),
            RunLength::Steps(steps),
            steps / 100,
            &mut rng,
        )?;
        let mut hist = vec![0.0; self.states];
        for s in &run.states {
            hist[*s as usize] += 1.0;
        }
        let n = run.states.len() as f64;
        Ok(0.5
            * hist
                .iter()
                .zip(self.posterior(l))
                .map(|(h, p)| (h / n - p).abs())
                .sum::<f64>())
    }

    /// Runs the multilevel sampler to `final_accepts` and compares `F̂_L` with the exact mean.
    pub fn multilevel_check(&self, anchor: ProposalAnchor, final_accepts: usize, seed: u64) -> Result<MultilevelCheck> {
        let cfg = MlmcmcConfig {
            burn_in: 300,
            final_accepts,
            anchor,
            max_iterations: 100 * final_accepts,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let run = mlmcmc_screen(self, self.start(), &cfg, &mut rng)?;
        let est = mlmcmc_estimate(&run.stores)?;
        let series: Vec<f64> = run.stores[self.levels - 1].iter().map(|v| v[0]).collect();
        Ok(MultilevelCheck {
            estimate: est.combined[0],
            oracle: self.posterior_mean(),
            stderr: batch_means_stderr(&series, 25),
            funnel_holds: run.chain.funnel_holds(),
            acceptance_rates: run.chain.acceptance_rates(),
        })
    }
}

impl LevelTarget for DiscreteToy {
    type State = i64;
    type Prepared = ();

    fn levels(&self) -> usize {
        self.levels
    }

    fn prepare(&self, _: &i64) -> Result<()> {
        Ok(())
    }

    fn evaluate(&self, s: &i64, _: &(), level: usize) -> Result<(f64, Vec<f64>)> {
        let lp = self.log_pi_state(level, *s);
        let f = if lp == f64::NEG_INFINITY {
            f64::NAN
        } else {
            self.forward(level, *s as usize)
        };
        Ok((lp, vec![f]))
    }

    fn propose(&self, s: &i64, rng: &mut ChaCha8Rng) -> i64 {
        Self::step_with(s, self.max_step, rng)
    }
}

/// Counts random power-of-two quadruples (plus proposal pairs) on which the composed and
/// simplified screening probabilities differ. Powers of two keep every product exact.
pub fn acceptance_mismatches(n: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut bad = 0;
    for _ in 0..n {
        let mut p2 = || 2f64.powi(rng.random_range(-20..=20));
        let (pl_a, pl_k, pn_a, pn_k, q_ak, q_ka) = (p2(), p2(), p2(), p2(), p2(), p2());
        let simple = (pl_a * pn_k / (pl_k * pn_a)).min(1.0);
        let composed = screened_acceptance_composed(pl_a, pl_k, pn_a, pn_k, q_ak, q_ka);
        let logs = screened_acceptance(pl_a.ln(), pl_k.ln(), pn_a.ln(), pn_k.ln());
        if composed != simple || (logs - simple).abs() > 1e-13 * simple {
            bad += 1;
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_is_normalized_and_levels_differ() {
        let t = DiscreteToy::default();
        for l in 0..3 {
            assert!((t.posterior(l).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        assert_ne!(t.posterior(0), t.posterior(2));
        assert_eq!(t.eta(0), -5.0);
        assert_eq!(t.eta(100), 5.0);
    }

    #[test]
    fn proposal_is_symmetric_and_substochastic() {
        let q = DiscreteToy::default().proposal_matrix();
        assert_eq!(q, q.transpose());
        assert!((q.row(50).sum() - 1.0).abs() < 1e-15);
        assert!(q.row(0).sum() < 1.0);
    }
}

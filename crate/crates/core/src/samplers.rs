//! Posterior sampling: Metropolis-Hastings and multilevel screened MCMC.
//!
//! Level `l` has the density
//! `π_l(η) ∝ exp(-‖F_obs - F_l(η)‖² / (2σ_l²)) · exp(-‖η‖²/2)`.
//! All acceptance tests run in log space, so misfits of any size are safe.
//!
//! The multilevel sampler screens a single proposal through the levels. At
//! level 1 it is an ordinary random-walk step; at level `l+1` the proposal
//! that survived level `l` is accepted with
//! `ρ_{l+1} = min{1, π_l(k_{l+1}) π_{l+1}(k) / (π_l(k) π_{l+1}(k_{l+1}))}`,
//! where `k_{l+1}` is the current state of level `l+1`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gmsfem::{ForwardModel, OnlineSpace, QoiSpec};
use crate::linalg::pairwise_sum;
use crate::randfield::ParameterVector;

/// Random walk `η' = η + δ ε` with i.i.d. standard normal `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalSpec {
    pub delta: f64,
}

impl ProposalSpec {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::config(format!("proposal step must be positive, got {delta}")));
        }
        Ok(ProposalSpec { delta })
    }

    pub fn propose(&self, eta: &ParameterVector, rng: &mut ChaCha8Rng) -> ParameterVector {
        ParameterVector(
            eta.0
                .iter()
                .map(|x| x + self.delta * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }
}

/// Data, noise levels and measurement points of the inverse problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSpec {
    pub observations: Vec<f64>,
    /// `σ_l` per level, coarsest first; nonincreasing.
    pub sigmas: Vec<f64>,
    pub points: Vec<(f64, f64)>,
}

impl PosteriorSpec {
    pub fn new(observations: Vec<f64>, sigmas: Vec<f64>, points: Vec<(f64, f64)>) -> Result<Self> {
        let spec = PosteriorSpec {
            observations,
            sigmas,
            points,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.points.len() {
            return Err(Error::config(format!(
                "{} observations for {} measurement points",
                self.observations.len(),
                self.points.len()
            )));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("σ_l must be positive, got {:?}", self.sigmas)));
        }
        if self.sigmas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::config(format!(
                "σ_l must not increase towards finer levels, got {:?}",
                self.sigmas
            )));
        }
        for &(x, y) in &self.points {
            if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
                return Err(Error::config(format!("measurement point ({x}, {y}) is not strictly interior")));
            }
        }
        Ok(())
    }

    /// `σ_L = rel ‖F_obs‖ / √n` and `σ_l = 2^{(L-l)/2} σ_L`.
    pub fn sigma_schedule(observations: &[f64], levels: usize, rel: f64) -> Vec<f64> {
        let n = observations.len().max(1) as f64;
        let sl = rel * crate::linalg::norm2(observations) / n.sqrt();
        (1..=levels)
            .map(|l| 2f64.powf((levels - l) as f64 / 2.0) * sl)
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    /// `‖F_obs - f‖`.
    pub fn misfit(&self, f: &[f64]) -> f64 {
        self.observations
            .iter()
            .zip(f)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `-‖η‖²/2`, the standard normal prior up to a constant.
pub fn log_prior(eta: &ParameterVector) -> f64 {
    -0.5 * eta.0.iter().map(|x| x * x).sum::<f64>()
}

/// `-‖F_obs - f‖² / (2σ²)`.
pub fn log_likelihood(observations: &[f64], f: &[f64], sigma: f64) -> f64 {
    let r2: f64 = observations.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    -r2 / (2.0 * sigma * sigma)
}

/// Unnormalized log posterior at `level` (0-based) for the forward value `f_l = F_l(η)`.
pub fn log_posterior(spec: &PosteriorSpec, level: usize, eta: &ParameterVector, f_l: &[f64]) -> Result<f64> {
    let sigma = *spec
        .sigmas
        .get(level)
        .ok_or_else(|| Error::config(format!("level {level} has no σ")))?;
    if f_l.len() != spec.observations.len() {
        return Err(Error::config(format!(
            "forward returned {} values for {} observations",
            f_l.len(),
            spec.observations.len()
        )));
    }
    Ok(log_likelihood(&spec.observations, f_l, sigma) + log_prior(eta))
}

/// `min{1, exp(log_ratio)}`; NaN (from `-∞ - -∞`) counts as rejection.
pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        0.0
    } else {
        log_ratio.min(0.0).exp()
    }
}

/// Screened acceptance `ρ_{l+1}` from the four log densities.
pub fn screened_acceptance(
    log_pi_l_current: f64,
    log_pi_l_proposal: f64,
    log_pi_next_current: f64,
    log_pi_next_proposal: f64,
) -> f64 {
    acceptance_probability(
        (log_pi_l_current + log_pi_next_proposal) - (log_pi_l_proposal + log_pi_next_current),
    )
}

/// `ρ_{l+1}` written through the screened proposal `q_l(b|a) = ρ_l(a,b) q(b|a)`
/// instead of the simplified four-density form; `q_ak` is `q(k|a)`, `q_ka` is `q(a|k)`.
/// Densities are in linear scale. Used to check [`screened_acceptance`].
pub fn screened_acceptance_composed(pl_a: f64, pl_k: f64, pn_a: f64, pn_k: f64, q_ak: f64, q_ka: f64) -> f64 {
    let rho = |pi_from: f64, pi_to: f64, q_fwd: f64, q_back: f64| (q_back * pi_to / (q_fwd * pi_from)).min(1.0);
    let ql_k_from_a = rho(pl_a, pl_k, q_ak, q_ka) * q_ak;
    let ql_a_from_k = rho(pl_k, pl_a, q_ka, q_ak) * q_ka;
    (ql_a_from_k * pn_k / (ql_k_from_a * pn_a)).min(1.0)
}

/// Stopping rule of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunLength {
    /// Total proposals, burn-in included.
    Steps(usize),
    /// Total accepted proposals, burn-in included.
    Accepted(usize),
}

/// Output of [`metropolis_hastings`].
#[derive(Debug, Clone)]
pub struct MhRun<S> {
    /// Chain state after every post-burn-in step (repeats included).
    pub states: Vec<S>,
    pub log_density: Vec<f64>,
    pub proposals: usize,
    pub accepted: usize,
}

impl<S> MhRun<S> {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.proposals.max(1) as f64
    }
}

/// Random-walk Metropolis-Hastings with a symmetric proposal.
///
/// `burn_in` is counted in the unit of `length` (steps or acceptances).
pub fn metropolis_hastings<S, T, P>(
    init: S,
    mut log_target: T,
    mut propose: P,
    length: RunLength,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MhRun<S>>
where
    S: Clone,
    T: FnMut(&S) -> Result<f64>,
    P: FnMut(&S, &mut ChaCha8Rng) -> S,
{
    let mut cur = init;
    let mut lp = log_target(&cur)?;
    if lp == f64::NEG_INFINITY {
        return Err(Error::config("chain starts outside the support of the target"));
    }
    let mut run = MhRun {
        states: Vec::new(),
        log_density: Vec::new(),
        proposals: 0,
        accepted: 0,
    };
    loop {
        let progress = match length {
            RunLength::Steps(n) => (run.proposals, n),
            RunLength::Accepted(n) => (run.accepted, n),
        };
        if progress.0 >= progress.1 {
            break;
        }
        let cand = propose(&cur, rng);
        let lc = log_target(&cand)?;
        run.proposals += 1;
        let u: f64 = rng.random();
        if u < acceptance_probability(lc - lp) {
            cur = cand;
            lp = lc;
            run.accepted += 1;
        }
        let done = match length {
            RunLength::Steps(_) => run.proposals,
            RunLength::Accepted(_) => run.accepted,
        };
        if done > burn_in {
            run.states.push(cur.clone());
            run.log_density.push(lp);
        }
    }
    Ok(run)
}

/// A hierarchy of targets `π_1, …, π_L` sharing a state space and a symmetric proposal.
pub trait LevelTarget {
    type State: Clone;
    /// Work shared by all levels for one state (e.g. the online basis).
    type Prepared;

    fn levels(&self) -> usize;
    fn prepare(&self, s: &Self::State) -> Result<Self::Prepared>;
    /// `(log π_l, F_l)` at 0-based level `l`.
    fn evaluate(&self, s: &Self::State, p: &Self::Prepared, level: usize) -> Result<(f64, Vec<f64>)>;
    fn propose(&self, s: &Self::State, rng: &mut ChaCha8Rng) -> Self::State;
}

/// Which state the multilevel proposal is centred on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProposalAnchor {
    /// Every level keeps its own state; proposals come from the level-1 chain.
    /// The finer chains are then not reversible w.r.t. their targets and the
    /// estimate drifts towards the coarse posterior; kept for comparison.
    InitialLevel,
    /// One state for all levels; a rejection anywhere leaves every level unchanged.
    #[default]
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmcmcConfig {
    /// Final-level acceptances discarded before stores are filled.
    pub burn_in: usize,
    /// Run ends once this many proposals (burn-in included) pass the last level.
    pub final_accepts: usize,
    pub anchor: ProposalAnchor,
    /// Safety cap on proposals.
    pub max_iterations: usize,
}

impl Default for MlmcmcConfig {
    fn default() -> Self {
        MlmcmcConfig {
            burn_in: 300,
            final_accepts: 1000,
            anchor: ProposalAnchor::Shared,
            max_iterations: 1_000_000,
        }
    }
}

/// Current state of one level together with what is known about it.
#[derive(Debug, Clone)]
pub struct LevelState<S> {
    pub state: S,
    /// `log π_0 … log π_l` of `state`.
    pub log_pi: Vec<f64>,
    /// `F_l(state)`.
    pub qoi: Vec<f64>,
}

/// Chain bookkeeping.
#[derive(Debug, Clone)]
pub struct ChainState<S> {
    pub levels: Vec<LevelState<S>>,
    /// `P_1 … P_{L+1}`: proposals reaching each level, and past the last.
    pub reached: Vec<u64>,
    pub iterations: u64,
}

impl<S> ChainState<S> {
    pub fn final_accepts(&self) -> u64 {
        *self.reached.last().unwrap()
    }

    /// `P_{l+1}/P_l` for each level.
    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.reached
            .windows(2)
            .map(|w| if w[0] == 0 { 0.0 } else { w[1] as f64 / w[0] as f64 })
            .collect()
    }

    pub fn funnel_holds(&self) -> bool {
        self.reached.windows(2).all(|w| w[0] >= w[1])
    }
}

/// One proposal's path through the levels.
#[derive(Debug, Clone)]
pub struct IterationRecord<S> {
    pub iteration: u64,
    /// Number of levels the proposal passed (0..=L).
    pub passed: usize,
    /// Log densities of the proposal at the levels it was evaluated on.
    pub log_pi: Vec<f64>,
    pub proposal: S,
}

/// Output of [`mlmcmc_screen`].
#[derive(Debug, Clone)]
pub struct MlmcmcRun<S> {
    pub chain: ChainState<S>,
    /// `stores[l][m] = F_l(k_l^m)` for every post-burn-in iteration `m`.
    pub stores: Vec<Vec<Vec<f64>>>,
    pub trace: Vec<IterationRecord<S>>,
    /// Proposals accepted at the final level, in order, with their final-level QoI.
    pub final_accepted: Vec<(u64, S, Vec<f64>)>,
}

/// Multilevel screened Metropolis-Hastings.
pub fn mlmcmc_screen<T: LevelTarget>(
    target: &T,
    init: T::State,
    config: &MlmcmcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MlmcmcRun<T::State>> {
    let nl = target.levels();
    if nl == 0 {
        return Err(Error::config("multilevel chain needs at least one level"));
    }
    if config.burn_in >= config.final_accepts {
        return Err(Error::config(format!(
            "burn-in {} leaves no samples out of {} final acceptances",
            config.burn_in, config.final_accepts
        )));
    }
    let prep = target.prepare(&init)?;
    let mut log_pi = Vec::with_capacity(nl);
    let mut qois = Vec::with_capacity(nl);
    for l in 0..nl {
        let (lp, f) = target.evaluate(&init, &prep, l)?;
        log_pi.push(lp);
        qois.push(f);
    }
    if log_pi.iter().any(|&v| v == f64::NEG_INFINITY) {
        return Err(Error::config("chain starts outside the support of a level"));
    }
    let mut chain = ChainState {
        levels: (0..nl)
            .map(|l| LevelState {
                state: init.clone(),
                log_pi: log_pi[..=l].to_vec(),
                qoi: qois[l].clone(),
            })
            .collect(),
        reached: vec![0; nl + 1],
        iterations: 0,
    };
    let mut stores: Vec<Vec<Vec<f64>>> = vec![Vec::new(); nl];
    let mut trace = Vec::new();
    let mut final_accepted = Vec::new();
    while chain.final_accepts() < config.final_accepts as u64 {
        if chain.iterations >= config.max_iterations as u64 {
            return Err(Error::numerical(format!(
                "multilevel chain hit the iteration cap {} with {} final acceptances",
                config.max_iterations,
                chain.final_accepts()
            )));
        }
        let anchor = match config.anchor {
            ProposalAnchor::InitialLevel => &chain.levels[0].state,
            ProposalAnchor::Shared => &chain.levels[nl - 1].state,
        };
        let k = target.propose(anchor, rng);
        let prep = target.prepare(&k)?;
        chain.reached[0] += 1;
        let mut lps: Vec<f64> = Vec::with_capacity(nl);
        let mut fs: Vec<Vec<f64>> = Vec::with_capacity(nl);
        let mut passed = 0;
        for l in 0..nl {
            let (lp, f) = target.evaluate(&k, &prep, l)?;
            lps.push(lp);
            fs.push(f);
            let cur = &chain.levels[l];
            let rho = if l == 0 {
                acceptance_probability(lp - cur.log_pi[0])
            } else {
                screened_acceptance(cur.log_pi[l - 1], lps[l - 1], cur.log_pi[l], lp)
            };
            let u: f64 = rng.random();
            if u < rho {
                passed += 1;
                chain.reached[l + 1] += 1;
                if config.anchor == ProposalAnchor::InitialLevel {
                    chain.levels[l] = LevelState {
                        state: k.clone(),
                        log_pi: lps.clone(),
                        qoi: fs[l].clone(),
                    };
                }
            } else {
                break;
            }
        }
        if passed == nl {
            if config.anchor == ProposalAnchor::Shared {
                for l in 0..nl {
                    chain.levels[l] = LevelState {
                        state: k.clone(),
                        log_pi: lps[..=l].to_vec(),
                        qoi: fs[l].clone(),
                    };
                }
            }
            final_accepted.push((chain.iterations, k.clone(), fs[nl - 1].clone()));
        }
        trace.push(IterationRecord {
            iteration: chain.iterations,
            passed,
            log_pi: lps,
            proposal: k,
        });
        chain.iterations += 1;
        if chain.final_accepts() > config.burn_in as u64 {
            for (l, store) in stores.iter_mut().enumerate() {
                store.push(chain.levels[l].qoi.clone());
            }
        }
    }
    Ok(MlmcmcRun {
        chain,
        stores,
        trace,
        final_accepted,
    })
}

/// `F̂_L = F̂_0 + Σ_l Q̂_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelPosteriorEstimate {
    pub f0: Vec<f64>,
    pub corrections: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
    pub samples: usize,
}

/// Telescoping estimate from same-iteration coupled stores.
pub fn mlmcmc_estimate(stores: &[Vec<Vec<f64>>]) -> Result<MultilevelPosteriorEstimate> {
    if stores.is_empty() || stores.iter().any(|s| s.is_empty()) {
        return Err(Error::config("multilevel estimate needs non-empty stores at every level"));
    }
    let m = stores[0].len();
    if stores.iter().any(|s| s.len() != m) {
        return Err(Error::config("stores of adjacent levels must pair up iteration by iteration"));
    }
    let dim = stores[0][0].len();
    let mean_of = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        (0..dim)
            .map(|p| pairwise_sum(&(0..m).map(|i| f(i, p)).collect::<Vec<_>>()) / m as f64)
            .collect()
    };
    let f0 = mean_of(&|i, p| stores[0][i][p]);
    let corrections: Vec<Vec<f64>> = (1..stores.len())
        .map(|l| mean_of(&|i, p| stores[l][i][p] - stores[l - 1][i][p]))
        .collect();
    let mut combined = f0.clone();
    for q in &corrections {
        for (c, v) in combined.iter_mut().zip(q) {
            *c += v;
        }
    }
    Ok(MultilevelPosteriorEstimate {
        f0,
        corrections,
        combined,
        samples: m,
    })
}

/// Standard error of a chain mean by non-overlapping batch means.
pub fn batch_means_stderr(series: &[f64], batches: usize) -> f64 {
    let b = batches.max(2);
    let len = series.len() / b;
    if len == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b)
        .map(|i| series[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Exact screened kernel `Q_level` on a finite state space.
///
/// `log_pi[l][a]` is `log π_{l+1}` at state `a` (coarsest first) and
/// `q0[(a, b)]` the proposal probability of `b` from `a`. Off the diagonal,
/// `Q_1 = ρ_1 q_0` and `Q_{l+1} = ρ_{l+1} Q_l` with the simplified `ρ_{l+1}`;
/// the diagonal holds the rejection mass.
pub fn screened_kernel(log_pi: &[Vec<f64>], q0: &DMatrix<f64>, level: usize) -> DMatrix<f64> {
    let n = q0.nrows();
    let mut q = DMatrix::zeros(n, n);
    for a in 0..n {
        let mut off = 0.0;
        for b in 0..n {
            if a == b {
                continue;
            }
            let mut p = q0[(a, b)];
            if p > 0.0 {
                // general MH ratio at level 1, so asymmetric q0 is handled too
                let r = (q0[(b, a)].ln() + log_pi[0][b]) - (q0[(a, b)].ln() + log_pi[0][a]);
                p *= acceptance_probability(r);
                for l in 1..level {
                    p *= screened_acceptance(log_pi[l - 1][a], log_pi[l - 1][b], log_pi[l][a], log_pi[l][b]);
                }
            }
            q[(a, b)] = p;
            off += p;
        }
        q[(a, a)] = 1.0 - off;
    }
    q
}

/// `max_{a,b} |π(a) Q(a,b) - π(b) Q(b,a)|` for the level-`level` screened kernel,
/// with `π` the normalized level density.
pub fn detailed_balance_check(log_pi: &[Vec<f64>], q0: &DMatrix<f64>, level: usize) -> f64 {
    let q = screened_kernel(log_pi, q0, level);
    let lp = &log_pi[level - 1];
    let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let pi: Vec<f64> = w.iter().map(|v| v / z).collect();
    let n = pi.len();
    let mut worst = 0.0f64;
    for a in 0..n {
        for b in 0..n {
            worst = worst.max((pi[a] * q[(a, b)] - pi[b] * q[(b, a)]).abs());
        }
    }
    worst
}

/// Flow posterior over KLE coefficients, with levels given by online dimensions.
#[derive(Debug, Clone)]
pub struct FlowPosterior {
    pub forward: ForwardModel,
    pub spec: PosteriorSpec,
    pub dims: Vec<usize>,
    pub proposal: ProposalSpec,
}

impl FlowPosterior {
    pub fn new(mut forward: ForwardModel, spec: PosteriorSpec, dims: Vec<usize>, proposal: ProposalSpec) -> Result<Self> {
        spec.validate()?;
        if dims.len() != spec.levels() {
            return Err(Error::config(format!(
                "{} online dimensions for {} σ levels",
                dims.len(),
                spec.levels()
            )));
        }
        forward.qoi = QoiSpec::Points(spec.points.clone());
        forward.qoi.validate()?;
        Ok(FlowPosterior {
            forward,
            spec,
            dims,
            proposal,
        })
    }
}

impl LevelTarget for FlowPosterior {
    type State = ParameterVector;
    type Prepared = OnlineSpace;

    fn levels(&self) -> usize {
        self.dims.len()
    }

    fn prepare(&self, s: &ParameterVector) -> Result<OnlineSpace> {
        self.forward.online(s)
    }

    fn evaluate(&self, s: &ParameterVector, p: &OnlineSpace, level: usize) -> Result<(f64, Vec<f64>)> {
        let f = self.forward.qoi_from(p, self.dims[level])?;
        Ok((log_posterior(&self.spec, level, s, &f)?, f))
    }

    fn propose(&self, s: &ParameterVector, rng: &mut ChaCha8Rng) -> ParameterVector {
        self.proposal.propose(s, rng)
    }
}

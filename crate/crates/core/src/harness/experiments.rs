//! End-to-end stages: KLE, offline build, forward solves, MLMC/MC error tables,
//! the multilevel posterior sampler and the toy oracle.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimators::{
    allocate_samples, cost_matched_mc_samples, mc_estimate, mlmc_error_bound, mlmc_estimate, pilot_deltas,
    relative_l2_error, weighted_norm, LevelForward, LevelPlan, LevelStats,
};
use crate::gmsfem::{build_offline, ForwardModel, OfflineHierarchy, QoiSpec};
use crate::harness::cache::{read_offline_cache, write_offline_cache};
use crate::harness::config::{ExperimentConfig, ReferenceLevel};
use crate::harness::output::{fmt_f64, RunRecorder};
use crate::randfield::{energy_ratio, prior_draw, truncated_kle, KLModel, ParameterVector};
use crate::rng::{StreamFamily, StreamTag};
use crate::samplers::{
    mlmcmc_estimate, mlmcmc_screen, FlowPosterior, MlmcmcRun, MultilevelPosteriorEstimate, PosteriorSpec,
    ProposalAnchor, ProposalSpec,
};
use crate::toy::{acceptance_mismatches, DiscreteToy};

pub fn build_kle(cfg: &ExperimentConfig) -> Result<KLModel> {
    truncated_kle(&cfg.grid()?, &cfg.covariance()?, cfg.field.modes)
}

/// Reads the cache when present (refusing a stale one), otherwise builds and writes it.
pub fn load_or_build_offline(
    cfg: &ExperimentConfig,
    workers: usize,
    rec: &mut RunRecorder,
) -> Result<(KLModel, Arc<OfflineHierarchy>)> {
    let path = cfg.cache_path();
    let hash = cfg.offline_hash();
    if path.exists() {
        log::info!("loading offline spaces from {}", path.display());
        let (kl, off) = rec.stage("offline-load", |_| read_offline_cache(&path, Some(&hash)))?;
        return Ok((kl, Arc::new(off)));
    }
    log::info!("no offline cache at {}; building", path.display());
    build_and_write_offline(cfg, workers, rec)
}

pub fn build_and_write_offline(
    cfg: &ExperimentConfig,
    workers: usize,
    rec: &mut RunRecorder,
) -> Result<(KLModel, Arc<OfflineHierarchy>)> {
    let kl = rec.stage("kle", |_| build_kle(cfg))?;
    let off = rec.stage("offline-build", |_| build_offline(&kl.grid, &kl, &cfg.offline_config(), workers))?;
    let path = cfg.cache_path();
    write_offline_cache(&path, &cfg.offline_hash(), &kl, &off)?;
    rec.file(&path)?;
    Ok((kl, Arc::new(off)))
}

pub fn forward_model(cfg: &ExperimentConfig, kl: KLModel, off: Arc<OfflineHierarchy>, qoi: QoiSpec) -> Result<ForwardModel> {
    ForwardModel::new(kl, off, cfg.source(), cfg.boundary(), qoi)
}

/// Fine-grid solves presented as a one-level forward.
struct FineForward<'a>(&'a ForwardModel);

impl LevelForward for FineForward<'_> {
    fn n_params(&self) -> usize {
        self.0.kl.n_modes()
    }

    fn evaluate_levels(&self, eta: &ParameterVector, dims: &[usize]) -> Result<Vec<Vec<f64>>> {
        let u = self.0.evaluate_fine(eta)?;
        Ok(vec![u; dims.len()])
    }
}

/// Reference mean field from `mlmc.reference_samples` draws of the reference stream.
pub fn reference_mean(forward: &ForwardModel, cfg: &ExperimentConfig, workers: usize) -> Result<Vec<f64>> {
    let family = StreamFamily::new(cfg.seeds.reference, StreamTag::Reference);
    let m = cfg.mlmc.reference_samples;
    let est = match cfg.mlmc.reference {
        ReferenceLevel::Finest => mc_estimate(forward, *cfg.mlmc.dims.last().unwrap(), m, &family, workers)?,
        ReferenceLevel::Fine => mc_estimate(&FineForward(forward), 0, m, &family, workers)?,
    };
    Ok(est.moments.mean)
}

/// Pilot-based sample allocation; returns `(δ_l, E‖X_1‖², M_l)`.
pub fn pilot_allocation(
    forward: &ForwardModel,
    cfg: &ExperimentConfig,
    m: usize,
    workers: usize,
) -> Result<(Vec<f64>, f64, Vec<usize>)> {
    let family = StreamFamily::new(cfg.seeds.prior, StreamTag::Pilot);
    let w = forward.grid().trapezoid_weights();
    let n = cfg.mlmc.pilot_samples;
    let delta = pilot_deltas(forward, &cfg.mlmc.dims, |eta| forward.evaluate_fine(eta), n, &family, &w, workers)?;
    let x1 = mc_estimate(forward, cfg.mlmc.dims[0], n, &family, workers)?;
    let var = if n > 1 {
        x1.moments.weighted_variance(&w) * (n - 1) as f64 / n as f64
    } else {
        0.0
    };
    let e_x2 = weighted_norm(&x1.moments.mean, &w).powi(2) + var;
    let samples = allocate_samples(&delta, m, e_x2)?;
    Ok((delta, e_x2, samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Replicate {
    pub replicate: u64,
    pub e_mlmc: f64,
    pub e_mc: f64,
}

impl Table1Replicate {
    pub fn ratio(&self) -> f64 {
        self.e_mc / self.e_mlmc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Summary {
    pub plan: LevelPlan,
    pub mc_samples: usize,
    pub reference_samples: usize,
    pub replicates: Vec<Table1Replicate>,
    /// Level statistics of the first replicate.
    pub levels: Vec<LevelStats>,
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl Table1Summary {
    pub fn ratio_stats(&self) -> (f64, f64) {
        mean_and_stderr(&self.replicates.iter().map(|r| r.ratio()).collect::<Vec<_>>())
    }

    pub fn e_mlmc_stats(&self) -> (f64, f64) {
        mean_and_stderr(&self.replicates.iter().map(|r| r.e_mlmc).collect::<Vec<_>>())
    }

    pub fn e_mc_stats(&self) -> (f64, f64) {
        mean_and_stderr(&self.replicates.iter().map(|r| r.e_mc).collect::<Vec<_>>())
    }
}

/// Relative L² errors of MLMC and cost-matched MC against `reference`, over replicates `0..r`.
pub fn table1_replicates(
    forward: &ForwardModel,
    cfg: &ExperimentConfig,
    plan: &LevelPlan,
    reference: &[f64],
    replicates: usize,
    workers: usize,
) -> Result<Table1Summary> {
    let w = forward.grid().trapezoid_weights();
    let mc_samples = cfg.mlmc.mc_samples.unwrap_or_else(|| cost_matched_mc_samples(plan));
    let mut reps = Vec::with_capacity(replicates);
    let mut levels = Vec::new();
    for r in 0..replicates as u64 {
        let ml_family = StreamFamily::new(cfg.seeds.prior, StreamTag::Mlmc).replicate(r);
        let mc_family = StreamFamily::new(cfg.seeds.prior, StreamTag::Mc).replicate(r);
        let ml = mlmc_estimate(forward, plan, &ml_family, workers)?;
        let mc = mc_estimate(forward, plan.finest_dim(), mc_samples, &mc_family, workers)?;
        let rep = Table1Replicate {
            replicate: r,
            e_mlmc: relative_l2_error(&ml.combined, reference, &w)?,
            e_mc: relative_l2_error(mc.mean(), reference, &w)?,
        };
        log::info!(
            "replicate {r}: e_MLMC={:.4} e_MC={:.4} ratio={:.3}",
            rep.e_mlmc,
            rep.e_mc,
            rep.ratio()
        );
        if r == 0 {
            levels = ml.levels;
        }
        reps.push(rep);
    }
    Ok(Table1Summary {
        plan: plan.clone(),
        mc_samples,
        reference_samples: cfg.mlmc.reference_samples,
        replicates: reps,
        levels,
    })
}

/// Everything the multilevel posterior run produces.
#[derive(Debug, Clone)]
pub struct MlmcmcOutcome {
    pub reference_eta: ParameterVector,
    pub initial: ParameterVector,
    pub spec: PosteriorSpec,
    pub dims: Vec<usize>,
    pub run: MlmcmcRun<ParameterVector>,
    pub estimate: MultilevelPosteriorEstimate,
    /// `(iteration, ‖F_obs - F_k‖)`: the start state first, then each final-level acceptance.
    pub error_trace: Vec<(u64, f64)>,
}

/// Synthetic data at the finest level, then the screened chain to the configured acceptance count.
pub fn run_mlmcmc(forward: &ForwardModel, cfg: &ExperimentConfig) -> Result<MlmcmcOutcome> {
    let m = &cfg.mlmcmc;
    let n = forward.kl.n_modes();
    let mut fwd = forward.clone();
    fwd.qoi = QoiSpec::Points(cfg.points());
    let finest = *m.dims.last().unwrap();
    let reference_eta = match &m.reference_eta {
        Some(v) => ParameterVector(v.clone()),
        None => prior_draw(&StreamFamily::new(cfg.seeds.observation, StreamTag::Observation), 0, n),
    };
    let observations = fwd.evaluate(&reference_eta, finest)?;
    let sigmas = match &m.sigmas {
        Some(s) => s.clone(),
        None => PosteriorSpec::sigma_schedule(&observations, m.dims.len(), m.noise_rel),
    };
    log::info!("σ_l = {sigmas:?}");
    let spec = PosteriorSpec::new(observations, sigmas, cfg.points())?;
    let target = FlowPosterior::new(fwd.clone(), spec.clone(), m.dims.clone(), ProposalSpec::new(m.delta)?)?;
    let initial = ParameterVector(m.initial.clone().unwrap_or_else(|| vec![0.0; n]));
    let e0 = spec.misfit(&fwd.evaluate(&initial, finest)?);
    let mut rng = StreamFamily::new(cfg.seeds.chain, StreamTag::Chain).stream(0);
    let run = mlmcmc_screen(&target, initial.clone(), &cfg.mlmcmc_config()?, &mut rng)?;
    let estimate = mlmcmc_estimate(&run.stores)?;
    let mut error_trace = vec![(0, e0)];
    error_trace.extend(run.final_accepted.iter().map(|(it, _, f)| (it + 1, spec.misfit(f))));
    log::info!(
        "chain: {} proposals, P = {:?}, rates = {:?}",
        run.chain.iterations,
        run.chain.reached,
        run.chain.acceptance_rates()
    );
    Ok(MlmcmcOutcome {
        reference_eta,
        initial,
        spec,
        dims: m.dims.clone(),
        run,
        estimate,
        error_trace,
    })
}

/// One row per oracle check of the samplers on the enumerable toy.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn toy_oracle(seed: u64) -> Result<Vec<OracleCheck>> {
    let toy = DiscreteToy::default();
    let tv = toy.metropolis_tv(100_000, seed)?;
    let ml = toy.multilevel_check(ProposalAnchor::Shared, 30_000, seed)?;
    let table = toy.log_pi_table();
    let q0 = toy.proposal_matrix();
    let db = (1..=toy.levels)
        .map(|l| crate::samplers::detailed_balance_check(&table, &q0, l))
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = acceptance_mismatches(10_000, &mut rng);
    let dev = (ml.estimate - ml.oracle).abs() / ml.stderr;
    Ok(vec![
        OracleCheck {
            name: "mh_total_variation",
            value: tv,
            threshold: 0.05,
            pass: tv <= 0.05,
        },
        OracleCheck {
            name: "mlmcmc_mean_in_stderrs",
            value: dev,
            threshold: 3.0,
            pass: dev <= 3.0,
        },
        OracleCheck {
            name: "detailed_balance_violation",
            value: db,
            threshold: 1e-10,
            pass: db <= 1e-10,
        },
        OracleCheck {
            name: "acceptance_formula_mismatches",
            value: bad as f64,
            threshold: 0.0,
            pass: bad == 0,
        },
    ])
}

/// Reads η for the `forward` stage.
pub fn forward_parameter(cfg: &ExperimentConfig) -> ParameterVector {
    match &cfg.forward.eta {
        Some(v) => ParameterVector(v.clone()),
        None => prior_draw(
            &StreamFamily::new(cfg.seeds.prior, StreamTag::Prior),
            cfg.forward.sample,
            cfg.field.modes,
        ),
    }
}

// --- command bodies; each writes its CSVs through the recorder ---

pub fn cmd_kle(cfg: &ExperimentConfig, rec: &mut RunRecorder) -> Result<()> {
    let kl = rec.stage("kle", |_| build_kle(cfg))?;
    let rows: Vec<Vec<String>> = kl
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, l)| {
            vec![
                (k + 1).to_string(),
                fmt_f64(*l),
                fmt_f64(energy_ratio(&kl.eigenvalues[..=k], kl.full_trace)),
            ]
        })
        .collect();
    rec.csv("kle_eigenvalues.csv", &["mode", "eigenvalue", "energy_ratio"], rows)?;
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend((1..=kl.n_modes()).map(|k| format!("phi_{k}")));
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = (0..kl.grid.num_fine_nodes()).map(|p| {
        let (x, y) = kl.grid.fine_coords(p);
        let mut r = vec![fmt_f64(x), fmt_f64(y)];
        r.extend(kl.eigenfunctions.iter().map(|f| fmt_f64(f[p])));
        r
    });
    rec.csv("kle_modes.csv", &h, rows)?;
    println!(
        "KLE: {} modes, energy ratio {:.6}, orthonormality residual {:.2e}",
        kl.n_modes(),
        kl.energy_ratio(),
        kl.orthonormality_residual()
    );
    Ok(())
}

pub fn cmd_offline(cfg: &ExperimentConfig, workers: usize, rec: &mut RunRecorder) -> Result<()> {
    let (_, off) = build_and_write_offline(cfg, workers, rec)?;
    let rows = off.spaces.iter().enumerate().map(|(i, s)| {
        vec![
            i.to_string(),
            off.neighborhoods[i].len().to_string(),
            s.dim().to_string(),
            fmt_f64(s.eigenvalues.first().copied().unwrap_or(f64::NAN)),
            fmt_f64(s.eigenvalues.last().copied().unwrap_or(f64::NAN)),
        ]
    });
    rec.csv(
        "offline_summary.csv",
        &["neighborhood", "fine_nodes", "offline_dim", "eigenvalue_min", "eigenvalue_max"],
        rows,
    )?;
    println!(
        "offline: {} neighborhoods, smallest offline dimension {}, max snapshot residual {:.2e}",
        off.spaces.len(),
        off.max_level_dim(),
        off.max_snapshot_residual
    );
    Ok(())
}

pub fn cmd_forward(cfg: &ExperimentConfig, workers: usize, rec: &mut RunRecorder) -> Result<()> {
    let (kl, off) = load_or_build_offline(cfg, workers, rec)?;
    let fwd = forward_model(cfg, kl, off, QoiSpec::FullField)?;
    let eta = forward_parameter(cfg);
    let (online, fine, sols) = rec.stage("forward", |_| {
        let online = fwd.online(&eta)?;
        let fine = online.fine.solve()?;
        let sols = cfg
            .forward
            .dims
            .iter()
            .map(|&d| online.solve(d).map(|s| s.pressure))
            .collect::<Result<Vec<_>>>()?;
        Ok((online, fine, sols))
    })?;
    let w = fwd.grid().trapezoid_weights();
    let fine_energy = online.fine.energy_norm(&fine);
    let mut rows = Vec::new();
    for (d, u) in cfg.forward.dims.iter().zip(&sols) {
        let diff: Vec<f64> = fine.iter().zip(u).map(|(a, b)| a - b).collect();
        rows.push(vec![
            d.to_string(),
            fmt_f64(online.fine.energy_norm(&diff) / fine_energy),
            fmt_f64(relative_l2_error(u, &fine, &w)?),
        ]);
    }
    rec.csv("forward_levels.csv", &["online_dim", "energy_error", "l2_error"], rows)?;
    let kappa = fwd.fields(&eta)?.kappa;
    let mut header = vec!["x".to_string(), "y".to_string(), "kappa".to_string(), "fine".to_string()];
    header.extend(cfg.forward.dims.iter().map(|d| format!("p_{d}")));
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let grid = fwd.grid().clone();
    let rows = (0..grid.num_fine_nodes()).map(|p| {
        let (x, y) = grid.fine_coords(p);
        let mut r = vec![fmt_f64(x), fmt_f64(y), fmt_f64(kappa[p]), fmt_f64(fine[p])];
        r.extend(sols.iter().map(|u| fmt_f64(u[p])));
        r
    });
    rec.csv("forward_field.csv", &h, rows)?;
    Ok(())
}

fn resolve_plan(fwd: &ForwardModel, cfg: &ExperimentConfig, workers: usize, rec: &mut RunRecorder) -> Result<LevelPlan> {
    let Some(m) = cfg.mlmc.allocate_m else {
        return cfg.plan();
    };
    let (delta, e_x2, samples) = rec.stage("pilot", |_| pilot_allocation(fwd, cfg, m, workers))?;
    let rows = (0..delta.len()).map(|l| {
        vec![
            (l + 1).to_string(),
            cfg.mlmc.dims[l].to_string(),
            fmt_f64(delta[l]),
            samples[l].to_string(),
        ]
    });
    rec.csv("pilot_allocation.csv", &["level", "N_l", "delta", "M_l"], rows)?;
    log::info!("pilot: δ = {delta:?}, E‖X‖² = {e_x2}, M_l = {samples:?}");
    LevelPlan::new(cfg.mlmc.dims.clone(), samples)
}

fn write_levels(rec: &mut RunRecorder, plan: &LevelPlan, levels: &[LevelStats], w: &[f64]) -> Result<()> {
    let rows = levels.iter().enumerate().map(|(l, s)| {
        vec![
            s.level.to_string(),
            s.dim.to_string(),
            plan.samples[l].to_string(),
            fmt_f64(weighted_norm(&s.correction.mean, w)),
            fmt_f64(s.correction.weighted_variance(w)),
            fmt_f64(plan.cost_units(l)),
        ]
    });
    rec.csv(
        "mlmc_levels.csv",
        &["level", "N_l", "M_l", "mean_norm", "variance", "cost_units"],
        rows,
    )?;
    Ok(())
}

fn write_table1(rec: &mut RunRecorder, cfg: &ExperimentConfig, s: &Table1Summary) -> Result<()> {
    let rows = s.replicates.iter().map(|r| {
        vec![
            r.replicate.to_string(),
            fmt_f64(r.e_mlmc),
            fmt_f64(r.e_mc),
            fmt_f64(r.ratio()),
        ]
    });
    rec.csv("table1_replicates.csv", &["replicate", "e_mlmc", "e_mc", "ratio"], rows)?;
    let (rm, rs) = s.ratio_stats();
    let (em, _) = s.e_mlmc_stats();
    let (ec, _) = s.e_mc_stats();
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
    rec.csv(
        "summary.csv",
        &[
            "l1", "l2", "N_l", "M_l", "mc_samples", "reference_samples", "replicates", "e_mlmc", "e_mc", "ratio",
            "ratio_stderr",
        ],
        [vec![
            fmt_f64(cfg.field.l1),
            fmt_f64(cfg.field.l2),
            join(&s.plan.dims),
            join(&s.plan.samples),
            s.mc_samples.to_string(),
            s.reference_samples.to_string(),
            s.replicates.len().to_string(),
            fmt_f64(em),
            fmt_f64(ec),
            fmt_f64(rm),
            fmt_f64(rs),
        ]],
    )?;
    println!(
        "l1={} l2={}: e_MLMC={em:.4} e_MC={ec:.4} ratio={rm:.3} ± {rs:.3} over {} replicate(s)",
        cfg.field.l1,
        cfg.field.l2,
        s.replicates.len()
    );
    Ok(())
}

/// `mlmc` (one replicate) and `table1` (all replicates).
pub fn cmd_table1(cfg: &ExperimentConfig, replicates: usize, workers: usize, rec: &mut RunRecorder) -> Result<Table1Summary> {
    let (kl, off) = load_or_build_offline(cfg, workers, rec)?;
    let fwd = forward_model(cfg, kl, off, QoiSpec::FullField)?;
    let plan = resolve_plan(&fwd, cfg, workers, rec)?;
    let reference = rec.stage("reference", |_| reference_mean(&fwd, cfg, workers))?;
    let s = rec.stage("replicates", |_| table1_replicates(&fwd, cfg, &plan, &reference, replicates, workers))?;
    let w = fwd.grid().trapezoid_weights();
    write_levels(rec, &plan, &s.levels, &w)?;
    write_table1(rec, cfg, &s)?;
    let delta: Vec<f64> = s.levels.iter().map(|l| weighted_norm(&l.correction.mean, &w)).collect();
    log::info!("level correction norms {delta:?}; bound form (2L+1)δ_L/√M with M=1: {}", mlmc_error_bound(&delta, 1));
    Ok(s)
}

pub fn cmd_mc(cfg: &ExperimentConfig, workers: usize, rec: &mut RunRecorder) -> Result<()> {
    let (kl, off) = load_or_build_offline(cfg, workers, rec)?;
    let fwd = forward_model(cfg, kl, off, QoiSpec::FullField)?;
    let plan = cfg.plan()?;
    let m = cfg.mlmc.mc_samples.unwrap_or_else(|| cost_matched_mc_samples(&plan));
    let reference = rec.stage("reference", |_| reference_mean(&fwd, cfg, workers))?;
    let family = StreamFamily::new(cfg.seeds.prior, StreamTag::Mc);
    let mc = rec.stage("mc", |_| mc_estimate(&fwd, plan.finest_dim(), m, &family, workers))?;
    let w = fwd.grid().trapezoid_weights();
    let e = relative_l2_error(mc.mean(), &reference, &w)?;
    rec.csv(
        "mc_summary.csv",
        &["N", "M", "e_mc", "variance"],
        [vec![
            plan.finest_dim().to_string(),
            m.to_string(),
            fmt_f64(e),
            fmt_f64(mc.moments.weighted_variance(&w)),
        ]],
    )?;
    println!("MC with M={m} at N={}: e_MC={e:.4}", plan.finest_dim());
    Ok(())
}

pub fn cmd_mlmcmc(cfg: &ExperimentConfig, workers: usize, rec: &mut RunRecorder) -> Result<MlmcmcOutcome> {
    let (kl, off) = load_or_build_offline(cfg, workers, rec)?;
    let fwd = forward_model(cfg, kl, off, QoiSpec::FullField)?;
    let out = rec.stage("mlmcmc", |_| run_mlmcmc(&fwd, cfg))?;
    write_mlmcmc(rec, &fwd.kl, cfg, &out)?;
    let rates = out.run.chain.acceptance_rates();
    println!(
        "MLMCMC: {} proposals, P = {:?}, acceptance rates {:?}",
        out.run.chain.iterations,
        out.run.chain.reached,
        rates.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
    );
    Ok(out)
}

fn write_mlmcmc(rec: &mut RunRecorder, kl: &KLModel, cfg: &ExperimentConfig, out: &MlmcmcOutcome) -> Result<()> {
    let nl = out.dims.len();
    let n = kl.n_modes();
    let mut header = vec!["iteration".to_string(), "level_reached".to_string(), "accepted".to_string()];
    header.extend((1..=nl).map(|l| format!("log_pi_{l}")));
    header.extend((1..=n).map(|k| format!("eta_{k}")));
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = out.run.trace.iter().map(|t| {
        let mut r = vec![
            t.iteration.to_string(),
            t.passed.to_string(),
            u8::from(t.passed == nl).to_string(),
        ];
        r.extend((0..nl).map(|l| t.log_pi.get(l).map(|v| fmt_f64(*v)).unwrap_or_default()));
        r.extend(t.proposal.0.iter().map(|v| fmt_f64(*v)));
        r
    });
    rec.csv("mlmcmc_chain.csv", &h, rows)?;

    let reached = &out.run.chain.reached;
    let rates = out.run.chain.acceptance_rates();
    let rows = (0..nl).map(|l| {
        vec![
            (l + 1).to_string(),
            out.dims[l].to_string(),
            fmt_f64(out.spec.sigmas[l]),
            reached[l].to_string(),
            reached[l + 1].to_string(),
            fmt_f64(rates[l]),
        ]
    });
    rec.csv(
        "mlmcmc_levels.csv",
        &["level", "N_l", "sigma", "proposals", "passed", "acceptance_rate"],
        rows,
    )?;

    let rows = out
        .error_trace
        .iter()
        .enumerate()
        .map(|(k, (it, e))| vec![k.to_string(), it.to_string(), fmt_f64(*e)]);
    rec.csv("mlmcmc_error_trace.csv", &["k", "iteration", "error"], rows)?;

    let mut header = vec!["point".to_string(), "x".into(), "y".into(), "observation".into(), "f0".into()];
    header.extend((2..=nl).map(|l| format!("q_{l}")));
    header.push("estimate".into());
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let e = &out.estimate;
    let rows = out.spec.points.iter().enumerate().map(|(p, (x, y))| {
        let mut r = vec![
            p.to_string(),
            fmt_f64(*x),
            fmt_f64(*y),
            fmt_f64(out.spec.observations[p]),
            fmt_f64(e.f0[p]),
        ];
        r.extend(e.corrections.iter().map(|q| fmt_f64(q[p])));
        r.push(fmt_f64(e.combined[p]));
        r
    });
    rec.csv("mlmcmc_estimate.csv", &h, rows)?;

    // evenly spaced accepted fields after burn-in
    let acc = &out.run.final_accepted;
    let post: Vec<_> = acc.iter().skip(cfg.mlmcmc.burn_in).collect();
    let k = cfg.mlmcmc.field_snapshots.min(post.len());
    let picks: Vec<_> = (0..k).map(|i| post[(i + 1) * post.len() / k - 1]).collect();
    let mut fields = vec![kl.log_field(&out.reference_eta)?];
    let mut header = vec!["x".to_string(), "y".to_string(), "log_k_reference".to_string()];
    for (it, eta, _) in &picks {
        fields.push(kl.log_field(eta)?);
        header.push(format!("log_k_iter_{it}"));
    }
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows = (0..kl.grid.num_fine_nodes()).map(|p| {
        let (x, y) = kl.grid.fine_coords(p);
        let mut r = vec![fmt_f64(x), fmt_f64(y)];
        r.extend(fields.iter().map(|f| fmt_f64(f[p])));
        r
    });
    rec.csv("mlmcmc_fields.csv", &h, rows)?;
    Ok(())
}

pub fn cmd_toy_oracle(seed: u64, rec: &mut RunRecorder) -> Result<Vec<OracleCheck>> {
    let checks = rec.stage("toy-oracle", |_| toy_oracle(seed))?;
    let rows = checks.iter().map(|c| {
        vec![
            c.name.to_string(),
            fmt_f64(c.value),
            fmt_f64(c.threshold),
            u8::from(c.pass).to_string(),
        ]
    });
    rec.csv("toy_oracle.csv", &["check", "value", "threshold", "pass"], rows)?;
    for c in &checks {
        println!("{} {} = {:.3e} (threshold {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
    if checks.iter().any(|c| !c.pass) {
        return Err(Error::numerical("toy oracle checks failed"));
    }
    Ok(checks)
}

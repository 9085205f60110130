//! Implementations of the experiment-harness verbs: train, eval, compare,
//! sweep, plotdata, and selftest. The thin binary in `main.rs` only parses
//! arguments and dispatches here, so every verb is callable (and tested) as a
//! library function.

use crate::agent::{compute_gae, uub_check, AgentParams};
use crate::baseline::{
    alternate_allocate, brute_force_pareto, default_lqr_gain, demands_for, event_trigger,
    lqr_gain, min_power_for_rate, nondominated_mask, spectral_radius, DisjointController,
    PeriodicController, RateKind, SmallInstance,
};
use crate::config::{config_from_str, load_config, write_snapshot, AppConfig};
use crate::env::{DeliveryMode, JointEnv};
use crate::error::{Error, Result};
use crate::network::{
    embb_rate, required_urllc_rate, snr, urllc_rate, Allocation, ChannelState, NetworkConfig,
};
use crate::plant::LinearModel;
use crate::train::{evaluate, run_episodes, train, CsdacController, EvalConfig, EvalEpisode};
use crate::trace::{read_trace, read_training_log, write_trace, write_training_log};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn resolve_config(config_path: Option<&Path>, near_checkpoint: Option<&Path>) -> Result<AppConfig> {
    if let Some(p) = config_path {
        return load_config(p);
    }
    if let Some(ck) = near_checkpoint {
        if let Some(parent) = ck.parent() {
            let candidate = parent.join("config.toml");
            if candidate.is_file() {
                return load_config(&candidate);
            }
        }
    }
    config_from_str("", "builtin defaults", std::env::vars())
}

fn load_checkpoint(dir: &Path) -> Result<AgentParams> {
    AgentParams::load(dir).map_err(|e| {
        Error::Checkpoint(format!("cannot load checkpoint at {}: {e}", dir.display()))
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// What `cmd_train` produced and where.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub snapshot_path: PathBuf,
    pub env_steps: usize,
    pub iterations: usize,
    pub elapsed_s: f64,
}

/// Train per the config, then write the checkpoint, the training log, and a
/// resolved-config snapshot under `out_dir`.
pub fn cmd_train(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut config = resolve_config(config_path, None)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    fs::create_dir_all(out_dir)?;
    let mut setup = config.train_setup(None);
    setup.diag_dir = Some(out_dir.to_path_buf());
    let started = Instant::now();
    let output = train(&setup)?;
    let elapsed_s = started.elapsed().as_secs_f64();

    let checkpoint_dir = out_dir.join("checkpoint");
    output.params.save(&checkpoint_dir)?;
    let log_path = out_dir.join("training_log.csv");
    write_training_log(&log_path, &output.log)?;
    let snapshot_path = out_dir.join("config.toml");
    write_snapshot(&snapshot_path, &config)?;
    Ok(TrainOutcome {
        checkpoint_dir,
        log_path,
        snapshot_path,
        env_steps: output.env_steps,
        iterations: output.log.len(),
        elapsed_s,
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Aggregate metrics over one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_episode_len: f64,
    pub mean_updates_requested: f64,
    pub mean_updates_effective: f64,
    pub mean_power_w: f64,
    pub mean_radiated_energy_j: f64,
    pub mean_total_energy_j: f64,
    pub violation_steps: usize,
    pub eval_steps: usize,
    pub violation_fraction: f64,
    pub mean_qos_satisfied: f64,
    pub alloc_violations: usize,
    /// 1 when enough episodes were available to run the boundedness check.
    pub uub_checked: bool,
    pub uub_pass: bool,
    pub uub_fraction_ok: f64,
}

impl EvalSummary {
    fn empty() -> Self {
        EvalSummary {
            episodes: 0,
            mean_episode_len: 0.0,
            mean_updates_requested: 0.0,
            mean_updates_effective: 0.0,
            mean_power_w: 0.0,
            mean_radiated_energy_j: 0.0,
            mean_total_energy_j: 0.0,
            violation_steps: 0,
            eval_steps: 0,
            violation_fraction: 0.0,
            mean_qos_satisfied: 0.0,
            alloc_violations: 0,
            uub_checked: false,
            uub_pass: false,
            uub_fraction_ok: 0.0,
        }
    }
}

/// Column means over a batch of evaluation episodes (no boundedness check).
pub fn summarize(episodes: &[EvalEpisode], control_period_s: f64) -> EvalSummary {
    if episodes.is_empty() {
        return EvalSummary::empty();
    }
    let n = episodes.len() as f64;
    let eval_steps: usize = episodes.iter().map(|e| e.len).sum();
    let violation_steps: usize = episodes.iter().map(|e| e.violation_steps).sum();
    let total_energy: f64 = episodes.iter().map(|e| e.total_energy_j).sum();
    let total_time_s = eval_steps as f64 * control_period_s;
    EvalSummary {
        episodes: episodes.len(),
        mean_episode_len: eval_steps as f64 / n,
        mean_updates_requested: episodes.iter().map(|e| e.updates_requested as f64).sum::<f64>()
            / n,
        mean_updates_effective: episodes.iter().map(|e| e.updates_effective as f64).sum::<f64>()
            / n,
        mean_power_w: if total_time_s > 0.0 {
            total_energy / total_time_s
        } else {
            0.0
        },
        mean_radiated_energy_j: episodes.iter().map(|e| e.radiated_energy_j).sum::<f64>() / n,
        mean_total_energy_j: total_energy / n,
        violation_steps,
        eval_steps,
        violation_fraction: if eval_steps > 0 {
            violation_steps as f64 / eval_steps as f64
        } else {
            0.0
        },
        mean_qos_satisfied: episodes.iter().map(|e| e.mean_qos_satisfied).sum::<f64>() / n,
        alloc_violations: episodes.iter().map(|e| e.alloc_violations).sum(),
        uub_checked: false,
        uub_pass: false,
        uub_fraction_ok: 0.0,
    }
}

const SUMMARY_HEADER: [&str; 15] = [
    "episodes",
    "mean_episode_len",
    "mean_updates_requested",
    "mean_updates_effective",
    "mean_power_w",
    "mean_radiated_energy_j",
    "mean_total_energy_j",
    "violation_steps",
    "eval_steps",
    "violation_fraction",
    "mean_qos_satisfied",
    "alloc_violations",
    "uub_checked",
    "uub_pass",
    "uub_fraction_ok",
];

/// Write a one-row summary CSV (deterministic float formatting).
pub fn write_eval_summary(path: &Path, s: &EvalSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    w.write_record([
        s.episodes.to_string(),
        s.mean_episode_len.to_string(),
        s.mean_updates_requested.to_string(),
        s.mean_updates_effective.to_string(),
        s.mean_power_w.to_string(),
        s.mean_radiated_energy_j.to_string(),
        s.mean_total_energy_j.to_string(),
        s.violation_steps.to_string(),
        s.eval_steps.to_string(),
        s.violation_fraction.to_string(),
        s.mean_qos_satisfied.to_string(),
        s.alloc_violations.to_string(),
        (s.uub_checked as u8).to_string(),
        (s.uub_pass as u8).to_string(),
        s.uub_fraction_ok.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Evaluate a checkpoint deterministically, write per-episode traces and a
/// summary CSV, and run the boundedness check when enough episodes exist.
///
/// `episodes = Some(0)` writes an empty summary and succeeds.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: Option<&Path>,
    episodes: Option<usize>,
    mode: Option<DeliveryMode>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<EvalSummary> {
    let config = resolve_config(config_path, Some(checkpoint))?;
    let params = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out_dir)?;
    let mut eval_cfg = config.eval_config(episodes, mode, seed);
    eval_cfg.record_traces = true;

    let summary = if eval_cfg.episodes == 0 {
        EvalSummary::empty()
    } else {
        let eps = evaluate(&params, &config.plant, &config.network, &config.env.rewards(), &eval_cfg)?;
        for (i, ep) in eps.iter().enumerate() {
            let path = out_dir.join(format!("trace_ep{i:03}.csv"));
            write_trace(&path, &ep.trace, config.network.n_users())?;
        }
        let mut s = summarize(&eps, config.plant.control_period);
        let trajectories: Vec<Vec<f64>> = eps.iter().map(|e| e.constraint.clone()).collect();
        if trajectories.len() >= 30 {
            let report = uub_check(
                &trajectories,
                config.eval.rho,
                config.eval.t_settle,
                config.eval.uub_fraction,
            )?;
            s.uub_checked = true;
            s.uub_pass = report.pass;
            s.uub_fraction_ok = report.episodes_ok as f64 / report.episodes as f64;
        }
        s
    };
    write_eval_summary(&out_dir.join("eval_summary.csv"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// Percentage reduction of `candidate` relative to `baseline`; zero when the
/// baseline is zero or they are equal.
pub fn percent_reduction(baseline: f64, candidate: f64) -> f64 {
    if baseline == 0.0 || baseline == candidate {
        0.0
    } else {
        100.0 * (1.0 - candidate / baseline)
    }
}

/// One arm of the comparison table.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub arm: String,
    pub mean_updates_per_episode: f64,
    pub mean_episode_len: f64,
    pub survival_rate: f64,
    pub mean_radiated_energy_j: f64,
    pub mean_total_energy_j: f64,
    pub updates_reduction_vs_trigger_pct: f64,
    pub energy_reduction_vs_periodic_pct: f64,
}

/// The three-arm comparison.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn row(&self, arm: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }
}

fn compare_row(arm: &str, eps: &[EvalEpisode], episode_len: usize) -> CompareRow {
    let n = eps.len().max(1) as f64;
    let survived = eps.iter().filter(|e| e.len >= episode_len).count();
    CompareRow {
        arm: arm.to_string(),
        mean_updates_per_episode: eps.iter().map(|e| e.updates_effective as f64).sum::<f64>() / n,
        mean_episode_len: eps.iter().map(|e| e.len as f64).sum::<f64>() / n,
        survival_rate: survived as f64 / n,
        mean_radiated_energy_j: eps.iter().map(|e| e.radiated_energy_j).sum::<f64>() / n,
        mean_total_energy_j: eps.iter().map(|e| e.total_energy_j).sum::<f64>() / n,
        updates_reduction_vs_trigger_pct: 0.0,
        energy_reduction_vs_periodic_pct: 0.0,
    }
}

/// Run the trained policy, the LQR+trigger+allocator baseline, and the
/// every-step-update baseline on identical episode seeds; write and return
/// the comparison table.
pub fn cmd_compare(
    checkpoint: &Path,
    config_path: Option<&Path>,
    episodes: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<Comparison> {
    let config = resolve_config(config_path, Some(checkpoint))?;
    let params = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out_dir)?;
    let eval_cfg = config.eval_config(episodes, Some(DeliveryMode::Coupled), seed);

    let gain = default_lqr_gain(&LinearModel::default())?;
    let mut csdac = CsdacController {
        params: &params,
        enforce_cap: Some(config.network.p_bs_max_w),
    };
    let mut trigger = DisjointController::new(gain);
    trigger.sigma = config.baseline.trigger_sigma;
    trigger.eps0 = config.baseline.trigger_eps0;
    let mut periodic = PeriodicController { gain };

    let rewards = config.env.rewards();
    let arms: Vec<(&str, Vec<EvalEpisode>)> = vec![
        (
            "csdac",
            run_episodes(&mut csdac, &config.plant, &config.network, &rewards, &eval_cfg)?,
        ),
        (
            "lqr_trigger",
            run_episodes(&mut trigger, &config.plant, &config.network, &rewards, &eval_cfg)?,
        ),
        (
            "periodic",
            run_episodes(&mut periodic, &config.plant, &config.network, &rewards, &eval_cfg)?,
        ),
    ];

    let mut rows: Vec<CompareRow> = arms
        .iter()
        .map(|(arm, eps)| compare_row(arm, eps, eval_cfg.episode_len))
        .collect();
    let trigger_updates = rows[1].mean_updates_per_episode;
    let periodic_energy = rows[2].mean_radiated_energy_j;
    for row in rows.iter_mut() {
        row.updates_reduction_vs_trigger_pct =
            percent_reduction(trigger_updates, row.mean_updates_per_episode);
        row.energy_reduction_vs_periodic_pct =
            percent_reduction(periodic_energy, row.mean_radiated_energy_j);
    }

    let mut w = csv::Writer::from_path(out_dir.join("compare.csv"))?;
    w.write_record([
        "arm",
        "mean_updates_per_episode",
        "mean_episode_len",
        "survival_rate",
        "mean_radiated_energy_j",
        "mean_total_energy_j",
        "updates_reduction_vs_trigger_pct",
        "energy_reduction_vs_periodic_pct",
    ])?;
    for r in &rows {
        w.write_record([
            r.arm.clone(),
            r.mean_updates_per_episode.to_string(),
            r.mean_episode_len.to_string(),
            r.survival_rate.to_string(),
            r.mean_radiated_energy_j.to_string(),
            r.mean_total_energy_j.to_string(),
            r.updates_reduction_vs_trigger_pct.to_string(),
            r.energy_reduction_vs_periodic_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(Comparison { rows })
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// One ranked grid point of a reward-weight sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub rank: usize,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub mean_return: f64,
}

/// Short training runs over the (mu1, mu2, mu3) grid, `sweep.seeds` seeds
/// each, ranked by mean evaluation return. Grid points run in parallel; every
/// run is self-seeded, so the ranking is deterministic.
pub fn cmd_sweep(config_path: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<Vec<SweepRow>> {
    let mut config = resolve_config(config_path, None)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    fs::create_dir_all(out_dir)?;

    let mut grid = Vec::new();
    for &m1 in &config.sweep.mu1 {
        for &m2 in &config.sweep.mu2 {
            for &m3 in &config.sweep.mu3 {
                grid.push((m1, m2, m3));
            }
        }
    }

    let results: Vec<Result<(usize, f64)>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(m1, m2, m3))| {
            let mut point_cfg = config.clone();
            point_cfg.env.mu1 = m1;
            point_cfg.env.mu2 = m2;
            point_cfg.env.mu3 = m3;
            point_cfg.agent.total_steps = config.sweep.steps;
            let point_dir = out_dir.join(format!("point{i:02}"));
            let mut returns = Vec::new();
            for s in 0..config.sweep.seeds {
                let run_seed = config.seed.wrapping_add(s as u64);
                let setup = point_cfg.train_setup(Some(run_seed));
                let output = train(&setup)?;
                let run_dir = point_dir.join(format!("seed{s}"));
                fs::create_dir_all(&run_dir)?;
                write_training_log(&run_dir.join("training_log.csv"), &output.log)?;
                let eval_cfg = EvalConfig {
                    episodes: config.sweep.eval_episodes,
                    episode_len: config.eval.episode_len,
                    mode: point_cfg.env.mode,
                    seed: run_seed,
                    record_traces: false,
                };
                let eps = evaluate(
                    &output.params,
                    &point_cfg.plant,
                    &point_cfg.network,
                    &point_cfg.env.rewards(),
                    &eval_cfg,
                )?;
                for ep in &eps {
                    returns.push(ep.return_r0 + ep.return_r1);
                }
            }
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            Ok((i, mean))
        })
        .collect();

    let mut scored = Vec::with_capacity(grid.len());
    for r in results {
        let (i, mean) = r?;
        scored.push((i, mean));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let rows: Vec<SweepRow> = scored
        .iter()
        .enumerate()
        .map(|(rank, &(i, mean))| SweepRow {
            rank: rank + 1,
            mu1: grid[i].0,
            mu2: grid[i].1,
            mu3: grid[i].2,
            mean_return: mean,
        })
        .collect();

    let mut w = csv::Writer::from_path(out_dir.join("sweep_ranking.csv"))?;
    w.write_record(["rank", "mu1", "mu2", "mu3", "mean_return"])?;
    for r in &rows {
        w.write_record([
            r.rank.to_string(),
            r.mu1.to_string(),
            r.mu2.to_string(),
            r.mu3.to_string(),
            r.mean_return.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// plotdata
// ---------------------------------------------------------------------------

/// Export plot-ready series from a training log and/or evaluation traces.
/// Returns the paths written. Empty inputs produce header-only files.
pub fn cmd_plotdata(
    log: Option<&Path>,
    traces: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    if let Some(log_path) = log {
        let records = read_training_log(log_path)?;
        let path = out_dir.join("violations_per_iteration.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["iteration", "constraint_violations"])?;
        for r in &records {
            w.write_record([r.iteration.to_string(), r.constraint_violations.to_string()])?;
        }
        w.flush()?;
        written.push(path);

        let path = out_dir.join("reward_per_iteration.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["iteration", "mean_r0", "mean_r1"])?;
        for r in &records {
            w.write_record([
                r.iteration.to_string(),
                r.mean_r0.to_string(),
                r.mean_r1.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }

    if !traces.is_empty() {
        let cumulative_path = out_dir.join("cumulative_power.csv");
        let mut cum_w = csv::Writer::from_path(&cumulative_path)?;
        cum_w.write_record(["trace", "k", "power_w", "cumulative_power_w"])?;
        for (i, trace_path) in traces.iter().enumerate() {
            let steps = read_trace(trace_path)?;

            let path = out_dir.join(format!("state_vs_time_{i}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["k", "x_d", "x_r"])?;
            for s in &steps {
                w.write_record([s.k.to_string(), s.x_d.to_string(), s.x_r.to_string()])?;
            }
            w.flush()?;
            written.push(path);

            let path = out_dir.join(format!("input_vs_time_{i}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["k", "u", "beta", "effective_beta"])?;
            for s in &steps {
                w.write_record([
                    s.k.to_string(),
                    s.u.to_string(),
                    (s.beta as u8).to_string(),
                    (s.effective_beta as u8).to_string(),
                ])?;
            }
            w.flush()?;
            written.push(path);

            let mut running = 0.0;
            for s in &steps {
                running += s.total_power_w;
                cum_w.write_record([
                    i.to_string(),
                    s.k.to_string(),
                    s.total_power_w.to_string(),
                    running.to_string(),
                ])?;
            }
        }
        cum_w.flush()?;
        written.push(cumulative_path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Result of the oracle/property battery.
#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub total: usize,
    pub failures: Vec<(String, String)>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type Check = (&'static str, fn() -> std::result::Result<(), String>);

fn approx(actual: f64, expected: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    let scale = expected.abs().max(1.0);
    if (actual - expected).abs() <= tol * scale {
        Ok(())
    } else {
        Err(format!("{what}: got {actual}, expected {expected}"))
    }
}

fn check_gae() -> std::result::Result<(), String> {
    let adv = compute_gae(&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5], 0.0, 0.9, 0.95);
    let expected = [2.1277625, 1.3775, 0.5];
    for (a, e) in adv.iter().zip(&expected) {
        approx(*a, *e, 1e-12, "gae")?;
    }
    Ok(())
}

fn check_rate_model() -> std::result::Result<(), String> {
    let cfg = NetworkConfig::default();
    approx(snr(0.1, 9e-5, cfg.noise_w), 14263.978699125144, 1e-12, "snr")?;
    approx(
        embb_rate(&[true], &[0.1], &[9e-5], &cfg),
        2484034.1949954825,
        1e-12,
        "embb rate",
    )?;
    approx(
        urllc_rate(&[true], &[0.1], &[9e-5], &cfg),
        2373282.533224022,
        1e-12,
        "urllc rate",
    )?;
    approx(
        required_urllc_rate(&cfg).map_err(|e| e.to_string())?,
        140000.0,
        1e-15,
        "required urllc rate",
    )
}

fn check_min_power() -> std::result::Result<(), String> {
    let cfg = NetworkConfig::default();
    let p = min_power_for_rate(9e-5, 100.0, &cfg, RateKind::Embb).map_err(|e| e.to_string())?;
    approx(p, 2.700199773174922e-9, 1e-12, "embb min power")?;
    let demand = 140000.0;
    let p = min_power_for_rate(9e-5, demand, &cfg, RateKind::Urllc).map_err(|e| e.to_string())?;
    let rate = urllc_rate(&[true], &[p], &[9e-5], &cfg);
    if (rate - demand).abs() < 1.0 {
        Ok(())
    } else {
        Err(format!("urllc round trip off by {} bit/s", rate - demand))
    }
}

fn check_lqr() -> std::result::Result<(), String> {
    let s = |m: f64| DMatrix::from_element(1, 1, m);
    let k = lqr_gain(&s(0.5), &s(1.0), &s(1.0), &s(1.0)).map_err(|e| e.to_string())?;
    approx(k[(0, 0)], 0.2655644370746374, 1e-9, "scalar lqr gain")?;
    let model = LinearModel::default();
    let gain = default_lqr_gain(&model).map_err(|e| e.to_string())?;
    let a = DMatrix::from_fn(4, 4, |i, j| model.a_mat[(i, j)]);
    let b = DMatrix::from_fn(4, 1, |i, _| model.b_mat[i]);
    let kd = DMatrix::from_fn(1, 4, |_, j| gain[j]);
    let rho = spectral_radius(&(a - b * kd)).map_err(|e| e.to_string())?;
    if rho < 1.0 {
        Ok(())
    } else {
        Err(format!("closed loop is not Schur stable: spectral radius {rho}"))
    }
}

fn check_trigger() -> std::result::Result<(), String> {
    let x = [0.2, 0.0, 0.1, 0.0];
    if event_trigger(&x, &x, 0.1, 1e-3) {
        return Err("identical states must not trigger".into());
    }
    let mut y = x;
    y[1] += 1e-9;
    if !event_trigger(&x, &y, 0.0, 0.0) {
        return Err("zero thresholds must trigger on any difference".into());
    }
    Ok(())
}

fn check_allocator() -> std::result::Result<(), String> {
    let cfg = NetworkConfig::default();
    let channel =
        ChannelState::new(vec![20.0; cfg.n_users()], &cfg).map_err(|e| e.to_string())?;
    let empty = alternate_allocate(&channel, &vec![None; cfg.n_users()], &cfg)
        .map_err(|e| e.to_string())?;
    if empty.radiated_power_w() != 0.0 {
        return Err("no demands must yield an empty allocation".into());
    }
    let demands = demands_for(&cfg, true).map_err(|e| e.to_string())?;
    let alloc = alternate_allocate(&channel, &demands, &cfg).map_err(|e| e.to_string())?;
    alloc.validate(&cfg).map_err(|e| e.to_string())?;
    let qos = crate::network::qos_status(&alloc, &channel, true, &cfg).map_err(|e| e.to_string())?;
    if !qos.satisfied[0] {
        return Err("URLLC user must be served".into());
    }
    // Nine demanding users on eight subcarriers: exactly one eMBB user is
    // left out.
    if qos.count() == cfg.subcarriers {
        Ok(())
    } else {
        Err(format!(
            "expected {} of {} users served, got {}",
            cfg.subcarriers,
            cfg.n_users(),
            qos.count()
        ))
    }
}

fn check_pareto() -> std::result::Result<(), String> {
    let mut cfg = NetworkConfig::default();
    cfg.n_embb = 1;
    cfg.n_urllc = 1;
    cfg.subcarriers = 2;
    let inst = SmallInstance {
        config: cfg,
        gains: ndarray::Array2::from_elem((2, 2), 9e-5),
        power_levels: vec![3e-9, 6e-6, 1e-5],
        horizon: 4,
        control_period_s: 1.0 / 12.0,
    };
    if inst.combination_count() != 38_416 {
        return Err(format!("unexpected instance size {}", inst.combination_count()));
    }
    let frontier = brute_force_pareto(&inst).map_err(|e| e.to_string())?;
    if frontier.is_empty() {
        return Err("frontier is empty".into());
    }
    let pts: Vec<(f64, f64)> = frontier.iter().map(|p| (p.updates as f64, p.energy_j)).collect();
    if nondominated_mask(&pts).iter().all(|&m| m) {
        Ok(())
    } else {
        Err("frontier contains a dominated point".into())
    }
}

fn check_uub() -> std::result::Result<(), String> {
    let safe = vec![vec![0.0; 301]; 50];
    let report = uub_check(&safe, 0.05, 100, 0.9).map_err(|e| e.to_string())?;
    if !report.pass {
        return Err("all-zero constraint series must pass".into());
    }
    let mut late = safe;
    for traj in late.iter_mut() {
        traj[200] = 0.06;
    }
    let report = uub_check(&late, 0.05, 100, 0.9).map_err(|e| e.to_string())?;
    if report.pass {
        return Err("late violations in every episode must fail".into());
    }
    Ok(())
}

fn check_env_determinism() -> std::result::Result<(), String> {
    let make = || {
        JointEnv::new(
            crate::plant::PlantParams::default(),
            NetworkConfig::default(),
            crate::env::RewardParams::default(),
            DeliveryMode::Coupled,
            77,
        )
    };
    let mut a = make().map_err(|e| e.to_string())?;
    let mut b = make().map_err(|e| e.to_string())?;
    let alloc = Allocation::empty(
        NetworkConfig::default().n_users(),
        NetworkConfig::default().subcarriers,
    );
    for k in 0..50 {
        let oa = a.step(k % 3 == 0, 1.0, &alloc).map_err(|e| e.to_string())?;
        let ob = b.step(k % 3 == 0, 1.0, &alloc).map_err(|e| e.to_string())?;
        if oa.base_state != ob.base_state || oa.r0.to_bits() != ob.r0.to_bits() {
            return Err(format!("trajectories diverged at step {k}"));
        }
        if oa.done {
            break;
        }
    }
    Ok(())
}

fn check_checkpoint_round_trip() -> std::result::Result<(), String> {
    let dir = std::env::temp_dir().join(format!("csdac_selftest_{}", std::process::id()));
    let cfg = NetworkConfig::default();
    let hyper = crate::agent::Hyper {
        hidden: vec![8],
        ..crate::agent::Hyper::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let params = AgentParams::new(&cfg, 10.0, &hyper, &mut rng);
    let result = (|| -> std::result::Result<(), String> {
        params.save(&dir).map_err(|e| e.to_string())?;
        let loaded = AgentParams::load(&dir).map_err(|e| e.to_string())?;
        if loaded.h0.params() == params.h0.params() && loaded.lambda == params.lambda {
            Ok(())
        } else {
            Err("reloaded checkpoint differs".into())
        }
    })();
    let _ = fs::remove_dir_all(&dir);
    result
}

/// Run the oracle/property battery, printing one PASS/FAIL line per check.
pub fn cmd_selftest() -> SelftestReport {
    let checks: Vec<Check> = vec![
        ("gae_worked_example", check_gae),
        ("rate_model_worked_values", check_rate_model),
        ("min_power_inversions", check_min_power),
        ("lqr_riccati_and_stability", check_lqr),
        ("event_trigger_examples", check_trigger),
        ("alternating_allocator", check_allocator),
        ("pareto_enumeration", check_pareto),
        ("uub_check_behavior", check_uub),
        ("environment_determinism", check_env_determinism),
        ("checkpoint_round_trip", check_checkpoint_round_trip),
    ];
    let total = checks.len();
    let mut failures = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failures.push((name.to_string(), why));
            }
        }
    }
    SelftestReport { total, failures }
}

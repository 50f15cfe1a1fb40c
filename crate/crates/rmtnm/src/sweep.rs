//! Orchestration of (Delta, lambda) parameter sweeps: per-point pipeline with
//! adaptive grid extension, checkpointed persistence, sample-size convergence
//! studies and bootstrap errors for the measures.

use crate::dynamics::{
    accumulate_range, accumulate_with_realizations, default_dt, ChannelTrajectory,
    DynamicsError, EnsembleData, ModelParams, TimeGrid, HEISENBERG_TIME,
};
use crate::measures::{
    ending_time, estimate_derivatives, nm_blp, nm_mdr, nm_rhp, MeasureError, NMReport,
    StateGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("measure evaluation failed: {0}")]
    Measure(#[from] MeasureError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report {path}: {msg}")]
    Report { path: String, msg: String },
}

/// Numerical options shared by every per-point pipeline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Grid points per resolved period, dt = min(2pi/Delta, 2pi) / this.
    pub steps_per_period: u32,
    /// Hard cap on the trajectory horizon, in units of the Heisenberg time.
    pub t_max_over_th: f64,
    /// Invertibility tolerance for the divisibility criteria.
    pub invert_tol: f64,
    pub state_grid: StateGrid,
    /// Bloch-pair length for BLP/MDR (2 = antipodal pure pairs).
    pub blp_r: f64,
    /// Savitzky-Golay half-width for derivative pre-smoothing; 0 = off.
    pub smoothing_half_width: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            steps_per_period: 40,
            t_max_over_th: 200.0,
            invert_tol: 1e-6,
            state_grid: StateGrid::default(),
            blp_r: 2.0,
            smoothing_half_width: 0,
        }
    }
}

impl RunOptions {
    pub fn t_max(&self) -> f64 {
        self.t_max_over_th * HEISENBERG_TIME
    }

    fn n_max(&self, dt: f64) -> usize {
        ((self.t_max() / dt).floor() as usize + 1).max(3)
    }

    /// First-round grid length: a golden-rule guess of the relaxation time,
    /// clamped to [64, n_max]. Undershooting only costs one doubling round.
    fn initial_points(&self, lambda: f64, dt: f64) -> usize {
        let n_max = self.n_max(dt);
        if lambda <= 0.0 {
            return n_max;
        }
        let t_est = 1.5 * 50f64.ln() / (4.0 * std::f64::consts::PI * lambda * lambda);
        (((t_est / dt).ceil() as usize).max(64)).min(n_max)
    }
}

/// Full per-point result: the accumulated trajectory (possibly longer than
/// the process ending time) and the measure report.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub trajectory: ChannelTrajectory,
    pub report: NMReport,
}

/// Measures and criteria for a trajectory: determines the ending time (the
/// full horizon when the purity never crosses), truncates, and evaluates the
/// three measures.
pub fn report_from_trajectory(
    traj: &ChannelTrajectory,
    opts: &RunOptions,
) -> Result<NMReport, SweepError> {
    let (t_end, reached) = match ending_time(traj) {
        Ok(te) => (te, true),
        Err(MeasureError::EndingTimeNotReached { .. }) => {
            (traj.points.last().map(|p| p.t).unwrap_or(0.0), false)
        }
        Err(e) => return Err(e.into()),
    };
    let trunc = traj.truncated(t_end);
    let derivs = estimate_derivatives(&trunc, opts.smoothing_half_width)?;
    let (rhp, _) = nm_rhp(&trunc, &derivs, opts.invert_tol);
    let blp = nm_blp(&trunc, &opts.state_grid, opts.blp_r);
    let mdr = nm_mdr(&trunc, &opts.state_grid, opts.blp_r);
    let p = &traj.params;
    Ok(NMReport {
        delta: p.delta,
        lambda: p.lambda,
        env_dim: p.env_dim,
        n_samples: p.n_samples,
        master_seed: p.master_seed,
        t_end,
        t_end_reached: reached,
        nm_rhp: rhp,
        nm_blp: blp.value,
        nm_mdr: mdr.value,
        blp_argmax: blp.argmax,
        mdr_argmax: mdr.argmax,
        mdr_t_recover: mdr.t_recover,
        mdr_t_min: mdr.t_min,
        blp_r: opts.blp_r,
        state_grid: opts.state_grid,
        invert_tol: opts.invert_tol,
    })
}

/// Accumulate the ensemble, extending the grid in doubling rounds until the
/// purity crosses the ending threshold or the horizon cap is reached, then
/// evaluate all measures up to the ending time.
pub fn run_point(params: &ModelParams, opts: &RunOptions) -> Result<PointOutcome, SweepError> {
    params.validate()?;
    let dt = default_dt(params.delta, opts.steps_per_period);
    let n_max = opts.n_max(dt);
    let mut n = opts.initial_points(params.lambda, dt);
    let mut traj: Option<ChannelTrajectory> = None;
    loop {
        let grid = TimeGrid::uniform(dt, n);
        match traj.as_mut() {
            None => traj = Some(accumulate_range(params, &grid, 0..n)?),
            Some(t) => {
                let done = t.len();
                t.extend_with(accumulate_range(params, &grid, done..n)?);
            }
        }
        let t = traj.as_ref().unwrap();
        match ending_time(t) {
            Ok(_) => break,
            Err(MeasureError::EndingTimeNotReached { .. }) if n >= n_max => break,
            Err(MeasureError::EndingTimeNotReached { .. }) => n = (n * 2).min(n_max),
            Err(e) => return Err(e.into()),
        }
    }
    let trajectory = traj.unwrap();
    let report = report_from_trajectory(&trajectory, opts)?;
    Ok(PointOutcome { trajectory, report })
}

/// Log-spaced Delta values and linearly spaced lambda values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl ParameterGrid {
    pub fn log_linear(
        delta_min: f64,
        delta_max: f64,
        delta_count: usize,
        lambda_min: f64,
        lambda_max: f64,
        lambda_count: usize,
    ) -> Result<Self, SweepError> {
        if !(delta_min > 0.0 && delta_max > delta_min) || delta_count < 2 {
            return Err(SweepError::Config(format!(
                "bad delta range [{delta_min}, {delta_max}] x {delta_count}"
            )));
        }
        if !(lambda_min >= 0.0 && lambda_max > lambda_min) || lambda_count < 2 {
            return Err(SweepError::Config(format!(
                "bad lambda range [{lambda_min}, {lambda_max}] x {lambda_count}"
            )));
        }
        let (l0, l1) = (delta_min.ln(), delta_max.ln());
        let deltas = (0..delta_count)
            .map(|i| (l0 + (l1 - l0) * i as f64 / (delta_count - 1) as f64).exp())
            .collect();
        let lambdas = (0..lambda_count)
            .map(|i| {
                lambda_min + (lambda_max - lambda_min) * i as f64 / (lambda_count - 1) as f64
            })
            .collect();
        Ok(ParameterGrid { deltas, lambdas })
    }
}

/// One sweep-output row.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepRecord {
    pub delta: f64,
    pub lambda: f64,
    pub t_end: f64,
    pub nm_rhp: f64,
    pub nm_blp: f64,
    pub nm_mdr: f64,
    pub n_samples_used: usize,
    pub flags: String,
    /// Wall-clock seconds spent on this point; not persisted, so resumed and
    /// fresh runs emit identical files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// Checkpoint key shared by the trajectory and report files of one point.
pub fn point_key(params: &ModelParams) -> String {
    format!(
        "d{}_l{}_N{}_S{}_seed{}",
        params.delta, params.lambda, params.env_dim, params.n_samples, params.master_seed
    )
}

pub fn trajectory_path(dir: &Path, params: &ModelParams) -> PathBuf {
    dir.join(format!("traj_{}.csv", point_key(params)))
}

pub fn report_path(dir: &Path, params: &ModelParams) -> PathBuf {
    dir.join(format!("report_{}.json", point_key(params)))
}

pub fn write_report_json(path: &Path, report: &NMReport) -> Result<(), SweepError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serialization");
    text.push('\n');
    crate::fsutil::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<NMReport, SweepError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SweepError::Report {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn record_from_report(report: &NMReport, wall_time_s: f64) -> SweepRecord {
    SweepRecord {
        delta: report.delta,
        lambda: report.lambda,
        t_end: report.t_end,
        nm_rhp: report.nm_rhp,
        nm_blp: report.nm_blp,
        nm_mdr: report.nm_mdr,
        n_samples_used: report.n_samples,
        flags: if report.t_end_reached {
            "ok".to_string()
        } else {
            "t_end_not_reached".to_string()
        },
        wall_time_s,
    }
}

/// Sweep output CSV: one row per grid point.
pub fn write_sweep_csv(path: &Path, records: &[SweepRecord]) -> Result<(), SweepError> {
    let mut out = String::from("delta,lambda,t_end,nm_rhp,nm_blp,nm_mdr,n_samples,flags\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(r.delta),
            fmt_f64(r.lambda),
            fmt_f64(r.t_end),
            fmt_f64(r.nm_rhp),
            fmt_f64(r.nm_blp),
            fmt_f64(r.nm_mdr),
            r.n_samples_used,
            r.flags
        )
        .unwrap();
    }
    crate::fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Run every grid point, checkpointing per-point trajectory and report files
/// under `checkpoint_dir`. Completed points (both files present) are loaded
/// instead of recomputed, so an interrupted sweep resumes transparently and
/// produces byte-identical output. Failures of individual points are
/// recorded and the sweep continues.
pub fn run_sweep(
    grid: &ParameterGrid,
    env_dim: usize,
    n_samples: usize,
    master_seed: u64,
    opts: &RunOptions,
    checkpoint_dir: &Path,
) -> Result<Vec<SweepRecord>, SweepError> {
    std::fs::create_dir_all(checkpoint_dir)?;
    let mut records = Vec::with_capacity(grid.deltas.len() * grid.lambdas.len());
    for &delta in &grid.deltas {
        for &lambda in &grid.lambdas {
            let params = ModelParams {
                delta,
                lambda,
                env_dim,
                n_samples,
                master_seed,
            };
            let traj_file = trajectory_path(checkpoint_dir, &params);
            let report_file = report_path(checkpoint_dir, &params);
            if traj_file.exists() && report_file.exists() {
                let report = read_report_json(&report_file)?;
                records.push(record_from_report(&report, 0.0));
                continue;
            }
            let started = std::time::Instant::now();
            match run_point(&params, opts) {
                Ok(outcome) => {
                    crate::dynamics::write_trajectory_csv(&traj_file, &outcome.trajectory)?;
                    write_report_json(&report_file, &outcome.report)?;
                    records.push(record_from_report(
                        &outcome.report,
                        started.elapsed().as_secs_f64(),
                    ));
                }
                Err(e) => {
                    records.push(SweepRecord {
                        delta,
                        lambda,
                        t_end: f64::NAN,
                        nm_rhp: f64::NAN,
                        nm_blp: f64::NAN,
                        nm_mdr: f64::NAN,
                        n_samples_used: n_samples,
                        flags: format!("error:{e}"),
                        wall_time_s: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }
    Ok(records)
}

/// Measures as a function of the ensemble prefix size.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceSeries {
    pub prefix_sizes: Vec<usize>,
    pub t_end: Vec<f64>,
    pub t_end_reached: Vec<bool>,
    pub nm_rhp: Vec<f64>,
    pub nm_blp: Vec<f64>,
    pub nm_mdr: Vec<f64>,
}

/// Recompute the measures on ensemble prefixes, reusing the stored
/// per-realization series (no re-simulation per prefix). Prefix k results
/// are identical to a fresh run with `n_samples = k` and the same seed.
pub fn convergence_study(
    params: &ModelParams,
    opts: &RunOptions,
    prefix_sizes: &[usize],
) -> Result<ConvergenceSeries, SweepError> {
    validate_prefixes(prefix_sizes, params.n_samples)?;
    let data = ensemble_for_prefixes(params, opts, prefix_sizes)?;
    convergence_from_data(&data, opts, prefix_sizes)
}

fn validate_prefixes(prefix_sizes: &[usize], n_samples: usize) -> Result<(), SweepError> {
    if prefix_sizes.is_empty()
        || prefix_sizes[0] == 0
        || prefix_sizes.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(SweepError::Config(format!(
            "prefix sizes must be increasing and positive: {prefix_sizes:?}"
        )));
    }
    if *prefix_sizes.last().unwrap() != n_samples {
        return Err(SweepError::Config(format!(
            "last prefix size {} must equal n_samples {}",
            prefix_sizes.last().unwrap(),
            n_samples
        )));
    }
    Ok(())
}

/// Accumulate with retention, extending the grid until every prefix either
/// crosses the purity threshold or the horizon cap is reached.
pub fn ensemble_for_prefixes(
    params: &ModelParams,
    opts: &RunOptions,
    prefix_sizes: &[usize],
) -> Result<EnsembleData, SweepError> {
    params.validate()?;
    let dt = default_dt(params.delta, opts.steps_per_period);
    let n_max = opts.n_max(dt);
    let mut n = opts.initial_points(params.lambda, dt);
    let mut data = accumulate_with_realizations(params, &TimeGrid::uniform(dt, n))?;
    loop {
        let all_crossed = prefix_sizes
            .iter()
            .all(|&k| ending_time(&data.trajectory_prefix(k)).is_ok());
        if all_crossed || n >= n_max {
            return Ok(data);
        }
        n = (n * 2).min(n_max);
        data.extend_to(&TimeGrid::uniform(dt, n))?;
    }
}

fn convergence_from_data(
    data: &EnsembleData,
    opts: &RunOptions,
    prefix_sizes: &[usize],
) -> Result<ConvergenceSeries, SweepError> {
    let mut out = ConvergenceSeries {
        prefix_sizes: prefix_sizes.to_vec(),
        t_end: Vec::new(),
        t_end_reached: Vec::new(),
        nm_rhp: Vec::new(),
        nm_blp: Vec::new(),
        nm_mdr: Vec::new(),
    };
    for &k in prefix_sizes {
        let traj = data.trajectory_prefix(k);
        let report = report_from_trajectory(&traj, opts)?;
        out.t_end.push(report.t_end);
        out.t_end_reached.push(report.t_end_reached);
        out.nm_rhp.push(report.nm_rhp);
        out.nm_blp.push(report.nm_blp);
        out.nm_mdr.push(report.nm_mdr);
    }
    Ok(out)
}

pub fn write_convergence_csv(
    path: &Path,
    series: &ConvergenceSeries,
) -> Result<(), SweepError> {
    let mut out = String::from("prefix_size,t_end,nm_rhp,nm_blp,nm_mdr,flags\n");
    for i in 0..series.prefix_sizes.len() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            series.prefix_sizes[i],
            fmt_f64(series.t_end[i]),
            fmt_f64(series.nm_rhp[i]),
            fmt_f64(series.nm_blp[i]),
            fmt_f64(series.nm_mdr[i]),
            if series.t_end_reached[i] {
                "ok"
            } else {
                "t_end_not_reached"
            }
        )
        .unwrap();
    }
    crate::fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Bootstrap standard errors of the three measures over realization
/// resampling. Deterministic for a fixed `bootstrap_seed`.
#[derive(Debug, Clone, Copy)]
pub struct BootstrapSe {
    pub nm_rhp: f64,
    pub nm_blp: f64,
    pub nm_mdr: f64,
    pub n_resamples: usize,
}

pub fn bootstrap_measures(
    data: &EnsembleData,
    opts: &RunOptions,
    n_resamples: usize,
    bootstrap_seed: u64,
) -> Result<BootstrapSe, SweepError> {
    use rayon::prelude::*;
    assert!(n_resamples >= 2);
    let n = data.n_realizations();
    let mut rng = ChaCha8Rng::seed_from_u64(bootstrap_seed);
    let index_sets: Vec<Vec<usize>> = (0..n_resamples)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect();
    let values: Result<Vec<(f64, f64, f64)>, SweepError> = index_sets
        .par_iter()
        .map(|indices| {
            let traj = data.trajectory_resampled(indices);
            let report = report_from_trajectory(&traj, opts)?;
            Ok((report.nm_rhp, report.nm_blp, report.nm_mdr))
        })
        .collect();
    let values = values?;
    let sd = |pick: &dyn Fn(&(f64, f64, f64)) -> f64| {
        let m = values.iter().map(|v| pick(v)).sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (pick(v) - m).powi(2)).sum::<f64>()
            / (values.len() - 1) as f64;
        var.sqrt()
    };
    Ok(BootstrapSe {
        nm_rhp: sd(&|v| v.0),
        nm_blp: sd(&|v| v.1),
        nm_mdr: sd(&|v| v.2),
        n_resamples,
    })
}

/// Flat key=value run configuration (defaults target the desk scale).
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub delta: f64,
    pub lambda: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_count: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_count: usize,
    pub env_dim: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub steps_per_period: u32,
    pub t_max_over_th: f64,
    pub invert_tol: f64,
    pub blp_r: f64,
    pub theta_points: usize,
    pub phi_points: usize,
    pub smoothing_half_width: usize,
    pub prefix_sizes: Vec<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            delta: 0.1,
            lambda: 1.0 / 32.0,
            delta_min: 0.016,
            delta_max: 16.0,
            delta_count: 9,
            lambda_min: 1.0 / 32.0,
            lambda_max: 0.5,
            lambda_count: 8,
            env_dim: 64,
            n_samples: 160,
            seed: 12345,
            steps_per_period: 40,
            t_max_over_th: 200.0,
            invert_tol: 1e-6,
            blp_r: 2.0,
            theta_points: 31,
            phi_points: 31,
            smoothing_half_width: 0,
            prefix_sizes: vec![10, 20, 40, 80, 160],
        }
    }
}

impl Config {
    /// Parse `key=value` lines; `#` starts a comment. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Config, SweepError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SweepError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| SweepError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key}: {e}"))
        }
        match key {
            "delta" => self.delta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "delta_min" => self.delta_min = num(key, value)?,
            "delta_max" => self.delta_max = num(key, value)?,
            "delta_count" => self.delta_count = num(key, value)?,
            "lambda_min" => self.lambda_min = num(key, value)?,
            "lambda_max" => self.lambda_max = num(key, value)?,
            "lambda_count" => self.lambda_count = num(key, value)?,
            "env_dim" => self.env_dim = num(key, value)?,
            "n_samples" => self.n_samples = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "steps_per_period" => self.steps_per_period = num(key, value)?,
            "t_max_over_th" => self.t_max_over_th = num(key, value)?,
            "invert_tol" => self.invert_tol = num(key, value)?,
            "blp_R" => self.blp_r = num(key, value)?,
            "theta_points" => self.theta_points = num(key, value)?,
            "phi_points" => self.phi_points = num(key, value)?,
            "smoothing_half_width" => self.smoothing_half_width = num(key, value)?,
            "prefix_sizes" => {
                self.prefix_sizes = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?;
            }
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            steps_per_period: self.steps_per_period,
            t_max_over_th: self.t_max_over_th,
            invert_tol: self.invert_tol,
            state_grid: StateGrid {
                n_theta: self.theta_points,
                n_phi: self.phi_points,
            },
            blp_r: self.blp_r,
            smoothing_half_width: self.smoothing_half_width,
        }
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            delta: self.delta,
            lambda: self.lambda,
            env_dim: self.env_dim,
            n_samples: self.n_samples,
            master_seed: self.seed,
        }
    }

    pub fn parameter_grid(&self) -> Result<ParameterGrid, SweepError> {
        ParameterGrid::log_linear(
            self.delta_min,
            self.delta_max,
            self.delta_count,
            self.lambda_min,
            self.lambda_max,
            self.lambda_count,
        )
    }
}

//! Command-line front end: simulate parameter points, evaluate measures and
//! criteria from stored trajectories, run sweeps and convergence studies.

use crate::dynamics::{read_trajectory_csv, ChannelTrajectory, DynamicsError};
use crate::measures::{criteria_series, ending_time, write_criteria_csv, MeasureError};
use crate::sweep::{
    convergence_study, report_from_trajectory, report_path, run_point, run_sweep,
    trajectory_path, write_convergence_csv, write_report_json, write_sweep_csv, Config,
    SweepError,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Environment variable holding the default config path.
pub const CONFIG_ENV: &str = "RMTNM_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "rmtnm",
    about = "Qubit in a random-matrix environment: channel trajectories and \
             non-Markovianity measures",
    disable_help_subcommand = true
)]
struct Cli {
    /// Flat key=value config file (default: $RMTNM_CONFIG if set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set n_samples=40 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Bloch-pair length convention for BLP/MDR (2 = antipodal pure pairs).
    #[arg(long = "blp-R", global = true)]
    blp_r: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct PointArgs {
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "env-dim")]
    env_dim: Option<usize>,
    #[arg(long = "n-samples")]
    n_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one (delta, lambda) point: trajectory CSV + report JSON.
    Point {
        #[command(flatten)]
        point: PointArgs,
        /// Output directory for the trajectory and report files.
        #[arg(long = "out-dir", default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run the (delta, lambda) grid sweep with checkpoint/resume.
    Sweep {
        /// Directory for per-point trajectory/report checkpoints.
        #[arg(long = "checkpoint-dir", default_value = "checkpoints")]
        checkpoint_dir: PathBuf,
        /// Sweep summary CSV path.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Compute the measure report from a stored trajectory.
    Measures {
        #[arg(long)]
        traj: PathBuf,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the local criterion time series from a stored trajectory.
    Criteria {
        #[arg(long)]
        traj: PathBuf,
        /// Write the criteria CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the process ending time of a stored trajectory.
    Endtime {
        #[arg(long)]
        traj: PathBuf,
    },
    /// Measures as a function of the ensemble prefix size.
    Converge {
        #[command(flatten)]
        point: PointArgs,
        /// Comma-separated prefix sizes (default: config prefix_sizes).
        #[arg(long)]
        prefixes: Option<String>,
        /// Write the convergence CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    User(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Config(_) | SweepError::Io(_) | SweepError::Report { .. } => {
                CliError::User(e.to_string())
            }
            SweepError::Dynamics(d) => d.into(),
            SweepError::Measure(m) => m.into(),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Eigensolver { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<MeasureError> for CliError {
    fn from(e: MeasureError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

/// Parse a trajectory CSV and check its semantic invariants: header keys,
/// uniform strictly increasing time from 0 (enforced by the parser), and a
/// t = 0 row equal to (1, 1, 0) within the declared standard errors.
pub fn validate_trajectory_file(path: &Path) -> Result<ChannelTrajectory, DynamicsError> {
    let traj = read_trajectory_csv(path)?;
    let p0 = &traj.points[0];
    let se0 = &traj.se[0];
    let bad = |what: &str, got: String| DynamicsError::TrajectoryParse {
        path: path.display().to_string(),
        line: 3,
        msg: format!("t=0 row must have {what}, got {got}"),
    };
    let tol = |se: f64| 5.0 * se + 1e-9;
    if (p0.r - 1.0).abs() > tol(se0.r) {
        return Err(bad("r = 1", format!("{}", p0.r)));
    }
    if (p0.z1.re - 1.0).abs() > tol(se0.re_z1) || p0.z1.im.abs() > tol(se0.im_z1) {
        return Err(bad("z1 = 1", format!("{}", p0.z1)));
    }
    if p0.z2.re.abs() > tol(se0.re_z2) || p0.z2.im.abs() > tol(se0.im_z2) {
        return Err(bad("z2 = 0", format!("{}", p0.z2)));
    }
    Ok(traj)
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| {
                CliError::User(format!("cannot read config {}: {e}", p.display()))
            })?;
            Config::parse(&text).map_err(|e| CliError::User(e.to_string()))?
        }
        None => Config::default(),
    };
    for kv in &cli.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::User(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(CliError::User)?;
    }
    if let Some(r) = cli.blp_r {
        cfg.blp_r = r;
    }
    Ok(cfg)
}

fn apply_point_args(cfg: &mut Config, args: &PointArgs) {
    if let Some(v) = args.delta {
        cfg.delta = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.env_dim {
        cfg.env_dim = v;
    }
    if let Some(v) = args.n_samples {
        cfg.n_samples = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => crate::fsutil::write_atomic(p, text.as_bytes())
            .map_err(|e| CliError::User(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let opts = cfg.run_options();
    match &cli.command {
        Command::Point { point, out_dir } => {
            let mut cfg = cfg;
            apply_point_args(&mut cfg, point);
            let params = cfg.model_params();
            let opts = cfg.run_options();
            let outcome = run_point(&params, &opts)?;
            std::fs::create_dir_all(out_dir)
                .map_err(|e| CliError::User(format!("out dir: {e}")))?;
            let tpath = trajectory_path(out_dir, &params);
            let rpath = report_path(out_dir, &params);
            crate::dynamics::write_trajectory_csv(&tpath, &outcome.trajectory)?;
            write_report_json(&rpath, &outcome.report)?;
            println!("{}", tpath.display());
            println!("{}", rpath.display());
            Ok(())
        }
        Command::Sweep {
            checkpoint_dir,
            out,
        } => {
            let grid = cfg.parameter_grid()?;
            let records = run_sweep(
                &grid,
                cfg.env_dim,
                cfg.n_samples,
                cfg.seed,
                &opts,
                checkpoint_dir,
            )?;
            write_sweep_csv(out, &records)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Measures { traj, out } => {
            let trajectory = validate_trajectory_file(traj)?;
            let report = report_from_trajectory(&trajectory, &opts)?;
            let mut text =
                serde_json::to_string_pretty(&report).expect("report serialization");
            text.push('\n');
            emit(out.as_deref(), &text)
        }
        Command::Criteria { traj, out } => {
            let trajectory = validate_trajectory_file(traj)?;
            let (t_end, _) = match ending_time(&trajectory) {
                Ok(te) => (te, true),
                Err(MeasureError::EndingTimeNotReached { .. }) => {
                    (trajectory.points.last().unwrap().t, false)
                }
                Err(e) => return Err(e.into()),
            };
            let trunc = trajectory.truncated(t_end);
            let series = criteria_series(
                &trunc,
                opts.invert_tol,
                &opts.state_grid,
                opts.blp_r,
                opts.smoothing_half_width,
            )?;
            match out {
                Some(p) => {
                    write_criteria_csv(p, &series, opts.blp_r)
                        .map_err(|e| CliError::User(e.to_string()))?;
                    Ok(())
                }
                None => {
                    let tmp = tempfile::NamedTempFile::new()
                        .map_err(|e| CliError::User(e.to_string()))?;
                    write_criteria_csv(tmp.path(), &series, opts.blp_r)
                        .map_err(|e| CliError::User(e.to_string()))?;
                    let text = std::fs::read_to_string(tmp.path())
                        .map_err(|e| CliError::User(e.to_string()))?;
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Endtime { traj } => {
            let trajectory = validate_trajectory_file(traj)?;
            let te = ending_time(&trajectory)?;
            println!("{te:e}");
            Ok(())
        }
        Command::Converge {
            point,
            prefixes,
            out,
        } => {
            let mut cfg = cfg;
            apply_point_args(&mut cfg, point);
            if let Some(p) = prefixes {
                cfg.set("prefix_sizes", p).map_err(CliError::User)?;
            }
            let params = cfg.model_params();
            let opts = cfg.run_options();
            let series = convergence_study(&params, &opts, &cfg.prefix_sizes)?;
            match out {
                Some(p) => {
                    write_convergence_csv(p, &series)?;
                    Ok(())
                }
                None => {
                    let tmp = tempfile::NamedTempFile::new()
                        .map_err(|e| CliError::User(e.to_string()))?;
                    write_convergence_csv(tmp.path(), &series)?;
                    let text = std::fs::read_to_string(tmp.path())
                        .map_err(|e| CliError::User(e.to_string()))?;
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    crate::single_threaded_blas();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("--threads must be at least 1");
            return EXIT_USER;
        }
        // Ignore the error if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line interface: `train`, `sweep`, `accountant` and `synth`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running. Errors are reported on one line as
//! `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{DataSource, RunConfig, OUT_DIR_ENV};
use crate::data::{generate_synthetic, write_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::privacy::{
    calibrate_sigma, compose_and_convert, epsilon_for_sigma, group_privacy, rdp_subsampled_gaussian,
};
use crate::sweep::{run_sweep, write_table};
use crate::train::{train, Seeds};

#[derive(Debug, Parser)]
#[command(
    name = "hybrid-dp",
    version,
    about = "Private training with semi-sensitive features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its report and checkpoint.
    Train(RunArgs),
    /// Run a grid of trainings and write the results tables.
    Sweep(RunArgs),
    /// Privacy accounting queries.
    #[command(subcommand)]
    Accountant(AccountantCmd),
    /// Generate a synthetic dataset with its schema.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config and the HYBRID_DP_OUT variable.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Root seed replacing the configured seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AccountantCmd {
    /// RDP of one subsampled Gaussian step at the given orders.
    Rdp {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long = "order", required = true, value_delimiter = ',')]
        orders: Vec<u32>,
    },
    /// (epsilon, delta) after `steps` subsampled Gaussian steps.
    Convert {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
    /// Noise multiplier meeting an (epsilon, delta) target.
    Calibrate {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
    },
    /// Group privacy for groups of k examples.
    Group {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        k: u32,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic spec (TOML), bare or as the `[data]` table of a run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to HYBRID_DP_OUT, then `synthetic`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed replacing the spec's.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: i32,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) | Error::Parse(_) | Error::Schema(_) | Error::Domain(_) => 1,
            _ => 2,
        };
        Failure { code, error }
    }
}

fn usage(error: Error) -> Failure {
    Failure { code: 1, error }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            let msg = f.error.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {msg}", f.error.kind());
            f.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train(a) => cmd_train(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Accountant(q) => cmd_accountant(&q, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> std::result::Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(usage)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::Config("--parallelism must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|p| p.install(f))
            .map_err(|e| Error::Config(format!("thread pool: {e}"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    report_path: &'a Path,
    checkpoint_path: &'a Path,
    report: &'a crate::train::TrainReport,
}

fn cmd_train(a: &RunArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let mut tc = cfg.train_config();
    if let Some(s) = a.seed {
        tc.seeds = Seeds::from_root(s);
    }
    let dir = cfg.output_dir(a.out.as_deref());
    let (params, report) = with_pool(a.parallelism, || {
        let (tr, te) = cfg.load_split()?;
        train(&tr, &te, &cfg.model, &tc)
    })??;
    create_dir(&dir)?;
    let report_path = dir.join("report.json");
    let checkpoint_path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    Checkpoint::from_params(&params).save(&checkpoint_path)?;
    emit(
        out,
        &TrainOutput {
            report_path: &report_path,
            checkpoint_path: &checkpoint_path,
            report: &report,
        },
    )
}

#[derive(Serialize)]
struct SweepOutput {
    results_path: PathBuf,
    summary_path: PathBuf,
    rows: usize,
    failed: usize,
    baseline_auc: f64,
}

fn cmd_sweep(a: &RunArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let mut grid = cfg.sweep.clone().unwrap_or_default();
    if let Some(s) = a.seed {
        grid.root_seed = s;
    }
    let dir = cfg.output_dir(a.out.as_deref());
    let outcome = with_pool(a.parallelism, || {
        let (tr, te) = cfg.load_split()?;
        run_sweep(
            &tr,
            &te,
            &cfg.model,
            &cfg.train,
            &grid,
            cfg.metrics.baseline_auc,
        )
    })??;
    create_dir(&dir)?;
    let results_path = dir.join("results.csv");
    let summary_path = dir.join("summary.csv");
    write_table(&results_path, &outcome.rows)?;
    write_table(&summary_path, &outcome.summary)?;
    let failed = outcome.rows.iter().filter(|r| r.error.is_some()).count();
    emit(
        out,
        &SweepOutput {
            results_path,
            summary_path,
            rows: outcome.rows.len(),
            failed,
            baseline_auc: outcome.baseline_auc,
        },
    )?;
    if failed == outcome.rows.len() {
        let first = outcome.rows[0].error.clone().unwrap_or_default();
        return Err(Failure {
            code: 2,
            error: Error::Config(format!("every sweep run failed; first error: {first}")),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct RdpPoint {
    order: u32,
    epsilon: f64,
}

fn cmd_accountant(q: &AccountantCmd, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match *q {
        AccountantCmd::Rdp {
            q,
            sigma,
            ref orders,
        } => {
            let c = rdp_subsampled_gaussian(q, sigma, orders).map_err(usage)?;
            let rdp: Vec<RdpPoint> = orders
                .iter()
                .zip(&c.eps)
                .map(|(&order, &epsilon)| RdpPoint { order, epsilon })
                .collect();
            emit(
                out,
                &serde_json::json!({ "q": q, "sigma": sigma, "rdp": rdp }),
            )
        }
        AccountantCmd::Convert {
            q,
            sigma,
            steps,
            delta,
        } => {
            if steps == 0 {
                return Err(usage(Error::Domain("steps must be at least 1".into())));
            }
            let curve = rdp_subsampled_gaussian(q, sigma, &crate::privacy::default_orders())
                .map_err(usage)?;
            let c = compose_and_convert(&curve, steps, delta).map_err(usage)?;
            emit(
                out,
                &serde_json::json!({ "q": q, "sigma": sigma, "steps": steps, "delta": delta,
                                     "epsilon": c.epsilon, "order": c.order }),
            )
        }
        AccountantCmd::Calibrate {
            eps,
            delta,
            q,
            steps,
        } => {
            if steps == 0 {
                return Err(usage(Error::Domain("steps must be at least 1".into())));
            }
            let sigma = calibrate_sigma(eps, delta, q, steps)?;
            let spent = epsilon_for_sigma(sigma, q, steps, delta)?;
            emit(
                out,
                &serde_json::json!({ "target_epsilon": eps, "delta": delta, "q": q, "steps": steps,
                                     "sigma": sigma, "epsilon": spent }),
            )
        }
        AccountantCmd::Group { eps, delta, k } => {
            let b = group_privacy(eps, delta, k).map_err(usage)?;
            emit(
                out,
                &serde_json::json!({ "k": k, "epsilon": b.epsilon, "delta": b.delta }),
            )
        }
    }
}

/// Accepts either a bare generator spec or a run config whose `[data]`
/// table is synthetic.
fn parse_synth_spec(text: &str) -> Result<SyntheticSpec> {
    #[derive(serde::Deserialize)]
    struct Wrapped {
        data: DataSource,
    }
    match toml::from_str::<SyntheticSpec>(text) {
        Ok(spec) => Ok(spec),
        Err(bare) => match toml::from_str::<Wrapped>(text) {
            Ok(Wrapped {
                data: DataSource::Synthetic(spec),
            }) => Ok(spec),
            Ok(_) => Err(Error::Config(
                "synth needs a synthetic [data] section".into(),
            )),
            Err(_) => Err(Error::Config(bare.message().replace('\n', " "))),
        },
    }
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let text = fs::read_to_string(&a.config).map_err(|e| usage(Error::io(&a.config, e)))?;
    let mut spec = parse_synth_spec(&text).map_err(usage)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let dir = a
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("synthetic"));
    let data = generate_synthetic(&spec)?;
    let files = write_synthetic(&data, &dir)?;
    emit(
        out,
        &serde_json::json!({ "data": files.data, "schema": files.schema, "rows": data.len() }),
    )
}

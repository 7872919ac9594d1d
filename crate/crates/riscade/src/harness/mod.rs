//! Command-line experiment harness.
//!
//! Ties the toolkit together behind one binary with subcommands for each
//! phase of an experiment:
//!
//! * `generate` — sample channels, simulate pilots, write the train and
//!   validation patch containers plus per-SNR full-resolution test sets;
//! * `train` — fit the denoiser on the generated patches (optionally
//!   resuming a checkpoint) and write the model plus a loss trace;
//! * `eval` — run every estimator over the test sets and write one CSV of
//!   per-SNR accuracies;
//! * `sweep` — vary one axis (SNR, subframe budget, antenna count, element
//!   count, spatial correlation) with the trained model held fixed;
//! * `direct` — the surface-off experiment on the user-to-receiver link;
//! * `complexity` — closed-form and exact multiply-accumulate counts;
//! * `selftest` — fast invariant battery (orthogonality, noiseless
//!   recovery, gradient fidelity).
//!
//! Configuration resolves in a fixed precedence order: built-in profile,
//! then `--config` file, then `RISCADE_*` environment variables, then
//! explicit flags. The resolved form is echoed into the output directory so
//! every artifact carries its provenance.
//!
//! Exit codes: 0 success, 2 configuration or usage errors, 3 damaged or
//! mismatched containers, 1 everything else (including self-test failures).

mod pipeline;
mod testset;

pub use pipeline::{
    cmd_complexity, cmd_direct, cmd_eval, cmd_generate, cmd_selftest, cmd_sweep, cmd_train,
    fmt_value, test_set_path, write_rows, ComplexityReport, CsvRow, DirectReport, EvalReport,
    GenerateSummary, SelfCheck, SelftestReport, SweepAxis, SweepReport, TrainSummary, CSV_HEADER,
    COMPLEXITY_FILE, DIRECT_FILE, DIRECT_LOSS_FILE, DIRECT_MODEL_FILE, EVAL_FILE, LOSS_FILE,
    MODEL_FILE, TRAIN_FILE, VAL_FILE,
};
pub use testset::{deserialize_test_set, serialize_test_set, TestSet, TESTSET_VERSION};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "riscade",
    version,
    about = "Simulation and learning toolkit for cascaded channel estimation \
             through a reconfigurable reflecting surface"
)]
struct Cli {
    /// Built-in profile the configuration starts from.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Key = value configuration file layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Pin the thread pool to one worker so timings are comparable.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Snr,
    PilotL,
    AntennasM,
    ElementsN,
    Correlation,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Snr => SweepAxis::Snr,
            AxisArg::PilotL => SweepAxis::PilotL,
            AxisArg::AntennasM => SweepAxis::AntennasM,
            AxisArg::ElementsN => SweepAxis::ElementsN,
            AxisArg::Correlation => SweepAxis::Correlation,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train/validation patch containers and per-SNR test sets.
    Generate,
    /// Fit the denoiser on the generated patches.
    Train {
        /// Checkpoint to continue from instead of a fresh network.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score every estimator on the generated test sets.
    Eval {
        /// Model checkpoint (defaults to model.ckpt in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Vary one axis with the trained model held fixed.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Model checkpoint (defaults to model.ckpt in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Surface-off experiment on the user-to-receiver link.
    Direct,
    /// Closed-form and exact multiply-accumulate counts.
    Complexity,
    /// Fast invariant battery.
    Selftest,
}

fn resolve_config(cli: &Cli) -> crate::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::by_name(&cli.profile)?;
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(|name| std::env::var(name).ok())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &ExperimentConfig) -> crate::Result<i32> {
    let default_ckpt = || cfg.out_dir.join(MODEL_FILE);
    match &cli.command {
        Command::Generate => {
            let s = cmd_generate(cfg)?;
            println!(
                "wrote {} training and {} validation patches and {} test sets to {}",
                s.train_patches,
                s.val_patches,
                s.test_files.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train { resume } => {
            let s = cmd_train(cfg, resume.as_deref())?;
            for l in &s.losses {
                println!(
                    "epoch {}: train loss {:.6e}, validation loss {:.6e}",
                    l.epoch, l.train_loss, l.val_loss
                );
            }
            println!(
                "checkpoint {} (validation NMSE {:.2} dB)",
                s.checkpoint.display(),
                s.val_nmse_db
            );
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(default_ckpt);
            let r = cmd_eval(cfg, &ckpt)?;
            print!("{}", render_rows(&r.rows));
            eprintln!(
                "inference wall time: full {:.3}s, tiled {:.3}s",
                r.full_wall.as_secs_f64(),
                r.tiled_wall.as_secs_f64()
            );
            println!("wrote {}", r.csv_path.display());
        }
        Command::Sweep { axis, checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(default_ckpt);
            let r = cmd_sweep(cfg, (*axis).into(), &ckpt)?;
            print!("{}", render_rows(&r.rows));
            println!("wrote {}", r.csv_path.display());
        }
        Command::Direct => {
            let r = cmd_direct(cfg)?;
            print!("{}", render_rows(&r.rows));
            println!("wrote {}", r.csv_path.display());
        }
        Command::Complexity => {
            let r = cmd_complexity(cfg)?;
            print!("{}", r.table);
            println!("wrote {}", r.csv_path.display());
        }
        Command::Selftest => {
            let r = cmd_selftest(cfg)?;
            for c in &r.checks {
                println!(
                    "{} {}: {}",
                    if c.pass { "pass" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if !r.all_pass() {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn render_rows(rows: &[CsvRow]) -> String {
    let mut out = String::new();
    let mut last_axis = None;
    for r in rows {
        if last_axis != Some(&r.axis) {
            out.push_str(&format!("axis {}\n", r.axis));
            last_axis = Some(&r.axis);
        }
        if r.nmse_linear.is_nan() {
            out.push_str(&format!("  {:<10} unavailable\n", r.method));
        } else {
            out.push_str(&format!(
                "  {:<10} NMSE {:.3e} ({:.2} dB) over {} samples\n",
                r.method, r.nmse_linear, r.nmse_db, r.n_samples
            ));
        }
    }
    out
}

/// Parses arguments, resolves the configuration, runs the subcommand, and
/// returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.deterministic {
        // A pool may already exist when run() is called twice in-process;
        // that is fine, the flag is best-effort.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global();
    }
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match dispatch(&cli, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

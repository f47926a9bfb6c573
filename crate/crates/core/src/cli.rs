//! `wiselab` command line. Every subcommand is a thin wrapper over the
//! library; failures print one `error:` line on stderr.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{ConfigError, ExperimentConfig};
use crate::experiment::{self, StageSeeds};
use crate::optim::{self, TrainConfig, TrainLog};
use crate::report;
use crate::robust;
use crate::shapes::{build_dataset, Dataset};
use crate::tensorstore::{load_checkpoint, save_checkpoint, Checkpoint, Scope};
use crate::wise::{self, AccReference, HeadPolicy, SweepMode};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "wiselab", version, about = "Weight-space interpolation and linear probing for point-cloud classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config JSON; the shipped default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct RunSeed {
    /// Run seed; stage seeds are derived from it as in run-experiment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Which {
    Source,
    Target,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Metric {
    Downstream,
    Svm,
    Fewshot,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum HeadArg {
    FromFt,
    Omit,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    WiseFt,
    WiseFtLp,
}

impl From<ModeArg> for SweepMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::WiseFt => SweepMode::WiseFt,
            ModeArg::WiseFtLp => SweepMode::WiseFtLp,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum RefArg {
    Baseline,
    Previous,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source or target dataset.
    GenData {
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: RunSeed,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain a backbone on a source dataset.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        seed: RunSeed,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fully fine-tune a pretrained backbone with a fresh head.
    Finetune {
        #[arg(long)]
        pt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        seed: RunSeed,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Blend two backbones: (1 - alpha) * pt + alpha * ft.
    Interpolate {
        #[arg(long)]
        pt: PathBuf,
        #[arg(long)]
        ft: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "from_ft")]
        head: HeadArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a head on a frozen backbone.
    Probe {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        seed: RunSeed,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[command(flatten)]
        seed: RunSeed,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate interpolated checkpoints over an alpha grid.
    Sweep {
        #[arg(long)]
        pt: PathBuf,
        #[arg(long)]
        ft: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Repeatable; defaults to the modes in the config.
        #[arg(long, value_enum)]
        mode: Vec<ModeArg>,
        /// Output CSV; both modes go into one file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: RunSeed,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy alpha selection over a sweep report.
    SelectAlpha {
        #[arg(long)]
        report: PathBuf,
        /// Allowed accuracy drop in percentage points.
        #[arg(long, default_value_t = 0.1)]
        drop_tol: f64,
        /// Rows to use when the report holds several modes.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value = "baseline")]
        acc_reference: RefArg,
    },
    /// Whole pipeline for every configured seed.
    RunExperiment {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    kind: &'static str,
    msg: String,
}

fn runtime(e: impl Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        kind: "runtime",
        msg: e.to_string(),
    }
}

fn config_failure(e: ConfigError) -> Failure {
    match e {
        ConfigError::Read { .. } => runtime(e),
        _ => Failure {
            code: EXIT_CONFIG,
            kind: "config",
            msg: e.to_string(),
        },
    }
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    match &a.config {
        Some(p) => ExperimentConfig::load(p, &a.overrides),
        None => ExperimentConfig::from_json(crate::config::DEFAULT_CONFIG, &a.overrides),
    }
    .map_err(config_failure)
}

fn load_data(p: &Path) -> Result<Dataset, Failure> {
    Dataset::load(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn load_ckpt(p: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn store(ckpt: &Checkpoint, out: &Path, log: Option<&Path>, train_log: Option<&TrainLog>) -> Result<(), Failure> {
    save_checkpoint(ckpt, out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    if let (Some(path), Some(l)) = (log, train_log) {
        std::fs::write(path, l.to_csv()).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    println!("{}", json!({"out": out.display().to_string(), "fingerprint": ckpt.fingerprint(Scope::All)}));
    Ok(())
}

fn seeded(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { which, out, seed, cfg } => {
            let cfg = load_config(&cfg)?;
            let s = StageSeeds::new(seed.seed);
            let (spec, data_seed) = match which {
                Which::Source => (&cfg.source_data, s.source),
                Which::Target => (&cfg.target_data, s.target),
            };
            let data = build_dataset(&cfg.dataset_config(spec, data_seed)).map_err(runtime)?;
            data.save(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            println!("{}", json!({"out": out.display().to_string(), "fingerprint": data.fingerprint}));
        }
        Command::Pretrain { source, out, log, seed, cfg } => {
            let cfg = load_config(&cfg)?;
            let data = load_data(&source)?;
            let tc = seeded(&cfg.pretrain, StageSeeds::new(seed.seed).pretrain);
            let (ckpt, l) = optim::pretrain_standin(&cfg.arch, &data, &tc).map_err(runtime)?;
            store(&ckpt, &out, log.as_deref(), Some(&l))?;
        }
        Command::Finetune { pt, target, out, log, seed, cfg } => {
            let cfg = load_config(&cfg)?;
            let tc = seeded(&cfg.finetune, StageSeeds::new(seed.seed).finetune);
            let (ckpt, l) = optim::full_finetune(&load_ckpt(&pt)?, &load_data(&target)?, &tc).map_err(runtime)?;
            store(&ckpt, &out, log.as_deref(), Some(&l))?;
        }
        Command::Interpolate { pt, ft, alpha, head, out } => {
            let policy = match head {
                HeadArg::FromFt => HeadPolicy::FromFt,
                HeadArg::Omit => HeadPolicy::Omit,
            };
            let ckpt = wise::interpolate(&load_ckpt(&pt)?, &load_ckpt(&ft)?, alpha, policy).map_err(runtime)?;
            store(&ckpt, &out, None, None)?;
        }
        Command::Probe { base, target, out, log, seed, cfg } => {
            let cfg = load_config(&cfg)?;
            let tc = seeded(&cfg.probe, StageSeeds::new(seed.seed).probe);
            let (ckpt, l) = optim::linear_probe(&load_ckpt(&base)?, &load_data(&target)?, &tc).map_err(runtime)?;
            store(&ckpt, &out, log.as_deref(), Some(&l))?;
        }
        Command::Eval { ckpt, data, metric, seed, cfg } => {
            let cfg = load_config(&cfg)?;
            let eval = experiment::eval_config(&cfg, StageSeeds::new(seed.seed).eval);
            let ckpt = load_ckpt(&ckpt)?;
            let data = load_data(&data)?;
            let out = match metric {
                Metric::Downstream => {
                    json!({"metric": "downstream", "value": optim::accuracy(&ckpt, &data.test).map_err(runtime)?})
                }
                Metric::Svm => {
                    json!({"metric": "svm", "value": robust::robustness_score(&ckpt, &data, &eval.svm).map_err(runtime)?})
                }
                Metric::Fewshot => {
                    let ep = eval.fewshot.clone().unwrap_or_default();
                    let s = robust::fewshot_eval(&ckpt, &data, &ep, &eval.svm).map_err(runtime)?;
                    json!({"metric": "fewshot", "mean": s.mean, "std": s.std})
                }
            };
            println!("{out}");
        }
        Command::Sweep { pt, ft, target, source, mode, out, seed, cfg } => {
            let cfg = load_config(&cfg)?;
            let s = StageSeeds::new(seed.seed);
            let modes: Vec<SweepMode> = if mode.is_empty() {
                cfg.sweep.modes.clone()
            } else {
                mode.into_iter().map(SweepMode::from).collect()
            };
            let tables = wise::sweep_modes(
                &load_ckpt(&pt)?,
                &load_ckpt(&ft)?,
                &cfg.sweep.alphas,
                &modes,
                &load_data(&target)?,
                &load_data(&source)?,
                &seeded(&cfg.probe, s.probe),
                &experiment::eval_config(&cfg, s.eval),
            )
            .map_err(runtime)?;
            let rows: Vec<_> = tables.into_iter().flat_map(|t| t.1).collect();
            report::emit_report(&rows, &out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
            println!("{}", json!({"out": out.display().to_string(), "rows": rows.len()}));
        }
        Command::SelectAlpha { report: path, drop_tol, mode, acc_reference } => {
            let rows = report::load(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let rows = match mode {
                Some(m) => report::filter_mode(&rows, m.into()),
                None => {
                    if rows.iter().any(|r| r.mode != rows[0].mode) {
                        return Err(runtime("report mixes modes; pass --mode"));
                    }
                    rows
                }
            };
            let reference = match acc_reference {
                RefArg::Baseline => AccReference::Baseline,
                RefArg::Previous => AccReference::Previous,
            };
            let sel = wise::select_alpha_greedy(&rows, drop_tol, reference).map_err(runtime)?;
            println!(
                "{}",
                json!({"alpha": sel.alpha, "reason": sel.reason.as_str(), "baseline_acc": sel.baseline_acc})
            );
        }
        Command::RunExperiment { cfg } => {
            let cfg = load_config(&cfg)?;
            let outcomes = experiment::run_experiment(&cfg).map_err(runtime)?;
            for o in &outcomes {
                println!(
                    "{}",
                    json!({"seed": o.seed, "alpha": o.selection.alpha, "reason": o.selection.reason.as_str()})
                );
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv` (program name first) and runs the subcommand; returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_USAGE } else { 0 };
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: kind={} msg={}", f.kind, one_line(&f.msg));
            f.code
        }
    }
}

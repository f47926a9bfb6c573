//! End-to-end driver: data, pretraining, fine-tuning, both sweeps, baselines
//! and α selection for every configured seed. Outputs are byte-deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{derive_seed, ExperimentConfig};
use crate::optim::{self, TrainConfig, TrainError};
use crate::report::{self, ReportError};
use crate::robust::{EpisodeConfig, SvmConfig};
use crate::shapes::{build_dataset, DataError, Dataset};
use crate::tensorstore::{save_checkpoint, Checkpoint, StoreError};
use crate::wise::{self, EvalConfig, Selection, SweepError, SweepMode, SweepRow, WiseError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("seed {seed}: data: {source}")]
    Data { seed: u64, source: DataError },
    #[error("seed {seed}: training: {source}")]
    Train { seed: u64, source: TrainError },
    #[error("seed {seed}: {source}")]
    Sweep { seed: u64, source: SweepError },
    #[error("seed {seed}: {source}")]
    Wise { seed: u64, source: WiseError },
    #[error("writing {path}: {msg}")]
    Output { path: PathBuf, msg: String },
}

/// Everything one seed produced, in memory.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub linear_probe: SweepRow,
    pub full_ft: SweepRow,
    pub wise_ft: Vec<SweepRow>,
    pub wise_ft_lp: Vec<SweepRow>,
    pub selection: Selection,
}

impl SeedOutcome {
    /// Baselines followed by the sweep tables, as written to `report.csv`.
    pub fn all_rows(&self) -> Vec<SweepRow> {
        let mut rows = vec![self.linear_probe.clone(), self.full_ft.clone()];
        rows.extend(self.wise_ft.iter().cloned());
        rows.extend(self.wise_ft_lp.iter().cloned());
        rows
    }
}

#[derive(Serialize)]
struct SelectionEntry<'a> {
    seed: u64,
    mode: SweepMode,
    #[serde(flatten)]
    selection: &'a Selection,
    selected_acc: f64,
    selected_robustness: f64,
}

/// Stage seeds derived from one run seed.
#[derive(Debug, Clone, Copy)]
pub struct StageSeeds {
    pub source: u64,
    pub target: u64,
    pub pretrain: u64,
    pub finetune: u64,
    pub probe: u64,
    pub eval: u64,
}

impl StageSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            source: derive_seed(seed, "source"),
            target: derive_seed(seed, "target"),
            pretrain: derive_seed(seed, "pretrain"),
            finetune: derive_seed(seed, "finetune"),
            probe: derive_seed(seed, "probe"),
            eval: derive_seed(seed, "eval"),
        }
    }
}

fn with_seed(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

pub fn eval_config(cfg: &ExperimentConfig, seed: u64) -> EvalConfig {
    EvalConfig {
        svm: SvmConfig { seed, ..cfg.svm.clone() },
        fewshot: cfg.fewshot.as_ref().map(|f| EpisodeConfig { seed, ..f.clone() }),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(|e| ExperimentError::Output {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), ExperimentError> {
    save_checkpoint(ckpt, path).map_err(|e: StoreError| ExperimentError::Output {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn emit(path: &Path, rows: &[SweepRow]) -> Result<(), ExperimentError> {
    report::emit_report(rows, path).map_err(|e: ReportError| ExperimentError::Output {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Runs one seed. When `out` is given, artifacts are written under it.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<SeedOutcome, ExperimentError> {
    let s = StageSeeds::new(seed);
    let data = |e| ExperimentError::Data { seed, source: e };
    let trainerr = |e| ExperimentError::Train { seed, source: e };
    let wiseerr = |e| ExperimentError::Wise { seed, source: e };

    let source = build_dataset(&cfg.dataset_config(&cfg.source_data, s.source)).map_err(data)?;
    let target = build_dataset(&cfg.dataset_config(&cfg.target_data, s.target)).map_err(data)?;
    let probe_cfg = with_seed(&cfg.probe, s.probe);
    let eval = eval_config(cfg, s.eval);

    let (pt, pt_log) = optim::pretrain_standin(&cfg.arch, &source, &with_seed(&cfg.pretrain, s.pretrain)).map_err(trainerr)?;
    let (ft, ft_log) = optim::full_finetune(&pt, &target, &with_seed(&cfg.finetune, s.finetune)).map_err(trainerr)?;
    let (lp, lp_log) = optim::linear_probe(&pt, &target, &probe_cfg).map_err(trainerr)?;

    let linear_probe = wise::evaluate(&lp, 0.0, SweepMode::LinearProbe, &target, &source, &eval).map_err(wiseerr)?;
    let full_ft = wise::evaluate(&ft, 1.0, SweepMode::FullFt, &target, &source, &eval).map_err(wiseerr)?;

    let mut tables = wise::sweep_modes(&pt, &ft, &cfg.sweep.alphas, &cfg.sweep.modes, &target, &source, &probe_cfg, &eval)
        .map_err(|e| ExperimentError::Sweep { seed, source: e })?;
    let mut take = |mode: SweepMode| {
        tables
            .iter()
            .position(|t| t.0 == mode)
            .map(|i| tables.remove(i).1)
            .unwrap_or_default()
    };
    let wise_ft = take(SweepMode::WiseFt);
    let wise_ft_lp = take(SweepMode::WiseFtLp);

    // Selection runs on the WiSE-FT-LP table when present, else on WiSE-FT.
    let (sel_mode, sel_rows) = if wise_ft_lp.is_empty() {
        (SweepMode::WiseFt, &wise_ft)
    } else {
        (SweepMode::WiseFtLp, &wise_ft_lp)
    };
    let selection = wise::select_alpha_greedy(sel_rows, cfg.sweep.drop_tol, cfg.sweep.acc_reference).map_err(wiseerr)?;

    let outcome = SeedOutcome {
        seed,
        linear_probe,
        full_ft,
        wise_ft,
        wise_ft_lp,
        selection,
    };

    if let Some(root) = out {
        let dir = root.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| ExperimentError::Output {
            path: dir.clone(),
            msg: e.to_string(),
        })?;
        for (name, d) in [("source.wlpd", &source), ("target.wlpd", &target)] {
            save_dataset(&dir.join(name), d)?;
        }
        save(&dir.join("pt.wlpc"), &pt)?;
        save(&dir.join("ft.wlpc"), &ft)?;
        save(&dir.join("lp.wlpc"), &lp)?;
        let selected = match sel_mode {
            SweepMode::WiseFtLp => wise::wise_ft_lp(&pt, &ft, selection.alpha, &target, &probe_cfg).map(|r| r.0),
            _ => wise::interpolate(&pt, &ft, selection.alpha, wise::HeadPolicy::FromFt),
        }
        .map_err(wiseerr)?;
        save(&dir.join("selected.wlpc"), &selected)?;
        write(&dir.join("pretrain_log.csv"), pt_log.to_csv())?;
        write(&dir.join("finetune_log.csv"), ft_log.to_csv())?;
        write(&dir.join("probe_log.csv"), lp_log.to_csv())?;
        emit(&dir.join("baselines.csv"), &[outcome.linear_probe.clone(), outcome.full_ft.clone()])?;
        if !outcome.wise_ft.is_empty() {
            emit(&dir.join("sweep_wise_ft.csv"), &outcome.wise_ft)?;
        }
        if !outcome.wise_ft_lp.is_empty() {
            emit(&dir.join("sweep_wise_ft_lp.csv"), &outcome.wise_ft_lp)?;
        }
        emit(&dir.join("report.csv"), &outcome.all_rows())?;
    }
    Ok(outcome)
}

fn save_dataset(path: &Path, d: &Dataset) -> Result<(), ExperimentError> {
    d.save(path).map_err(|e| ExperimentError::Output {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn selection_json(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> String {
    let entries: Vec<SelectionEntry> = outcomes
        .iter()
        .map(|o| {
            let (mode, rows) = if o.wise_ft_lp.is_empty() {
                (SweepMode::WiseFt, &o.wise_ft)
            } else {
                (SweepMode::WiseFtLp, &o.wise_ft_lp)
            };
            let row = rows.iter().find(|r| r.alpha == o.selection.alpha).expect("selected alpha is on the grid");
            SelectionEntry {
                seed: o.seed,
                mode,
                selection: &o.selection,
                selected_acc: row.downstream_acc,
                selected_robustness: row.robustness,
            }
        })
        .collect();
    let doc = serde_json::json!({
        "drop_tol": cfg.sweep.drop_tol,
        "acc_reference": cfg.sweep.acc_reference,
        "seeds": entries,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("selection serializes");
    s.push('\n');
    s
}

/// Runs every configured seed, writing per-seed artifacts plus
/// `report_merged.csv`, `selection.json` and the resolved `config.json`
/// (without `output_dir`)
/// under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>, ExperimentError> {
    let root = cfg.output_dir.as_path();
    fs::create_dir_all(root).map_err(|e| ExperimentError::Output {
        path: root.to_path_buf(),
        msg: e.to_string(),
    })?;
    // The output location is left out so that a run's tree does not depend on where it lives.
    let mut doc = serde_json::to_value(cfg).expect("config serializes");
    doc.as_object_mut().expect("config is an object").remove("output_dir");
    let mut resolved = serde_json::to_string_pretty(&doc).expect("config serializes");
    resolved.push('\n');
    write(&root.join("config.json"), resolved)?;

    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        outcomes.push(run_seed(cfg, seed, Some(root))?);
    }
    let merged: Vec<(u64, Vec<SweepRow>)> = outcomes.iter().map(|o| (o.seed, o.all_rows())).collect();
    write(&root.join("report_merged.csv"), report::render_merged(&merged))?;
    write(&root.join("selection.json"), selection_json(cfg, &outcomes))?;
    Ok(outcomes)
}

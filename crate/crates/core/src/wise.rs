//! Weight-space interpolation between a pretrained and a fine-tuned backbone,
//! α-sweeps in WiSE-FT and WiSE-FT-LP modes, and greedy α selection.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optim::{self, TrainConfig, TrainError};
use crate::robust::{self, EpisodeConfig, FeatureMatrix, FewShotStats, RobustError, SvmConfig};
use crate::shapes::Dataset;
use crate::tensorstore::{validate_compatibility, Checkpoint, Diagnostic, Role, Scope, Tensor};
use crate::net::NetError;

#[derive(Debug, thiserror::Error)]
pub enum WiseError {
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("incompatible checkpoints: {}", join(.0))]
    Incompatible(Vec<Diagnostic>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("bad report: {0}")]
    Report(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Robust(#[from] RobustError),
    #[error(transparent)]
    Net(#[from] NetError),
}

fn join(d: &[Diagnostic]) -> String {
    d.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    FromFt,
    Omit,
}

/// Blend weights are snapped to multiples of 2^-30 so that 1 − α is exact and
/// `interpolate(a, b, α)` and `interpolate(b, a, 1 − α)` use identical weights.
pub fn snap_alpha(alpha: f64) -> f64 {
    const SCALE: f64 = (1u64 << 30) as f64;
    (alpha * SCALE).round_ties_even() / SCALE
}

/// One element of the blend: (1 − α)·a + α·b in f64, rounded once to f32.
#[inline]
pub fn blend(a: f32, b: f32, alpha: f64) -> f32 {
    ((1.0 - alpha) * a as f64 + alpha * b as f64) as f32
}

/// θ(α) = (1 − α)·θ_pt + α·θ_ft over backbone entries. The head is copied from
/// `ft` or left out according to `head_policy`.
pub fn interpolate(pt: &Checkpoint, ft: &Checkpoint, alpha: f64, head_policy: HeadPolicy) -> Result<Checkpoint, WiseError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(WiseError::Alpha(alpha));
    }
    let diags = validate_compatibility(pt, ft, Scope::Backbone);
    if !diags.is_empty() {
        return Err(WiseError::Incompatible(diags));
    }
    if !pt.has_role(Role::Backbone) {
        return Err(WiseError::Input("no backbone entries to interpolate".into()));
    }
    for (ckpt, side) in [(pt, "pt"), (ft, "ft")] {
        if let Some((name, _)) = ckpt.iter().find(|(_, p)| !p.tensor.is_finite()) {
            return Err(WiseError::NonFinite(format!("{side}:{name}")));
        }
    }
    if head_policy == HeadPolicy::FromFt && !ft.has_role(Role::Head) {
        return Err(WiseError::Input("head_policy from_ft but ft has no head".into()));
    }

    let w = snap_alpha(alpha);
    let mut out = Checkpoint::new(ft.metadata().clone());
    for (name, p) in pt.iter().filter(|(_, p)| p.role == Role::Backbone) {
        let a = &p.tensor;
        let b = ft.get(name).expect("compatibility checked");
        let data: Vec<f32> = if w == 0.0 {
            a.data().to_vec()
        } else if w == 1.0 {
            b.data().to_vec()
        } else {
            a.data().iter().zip(b.data()).map(|(&x, &y)| blend(x, y, w)).collect()
        };
        let t = Tensor::new(a.shape().to_vec(), data).expect("shape preserved");
        out.insert(name, Role::Backbone, t).expect("unique names");
    }
    if head_policy == HeadPolicy::FromFt {
        for (name, p) in ft.iter().filter(|(_, p)| p.role == Role::Head) {
            out.insert(name, Role::Head, p.tensor.clone()).expect("unique names");
        }
    }
    out.set_meta("provenance", "wise");
    out.set_meta("alpha", format_alpha(alpha));
    out.set_meta("pt_fingerprint", pt.fingerprint(Scope::Backbone));
    out.set_meta("ft_fingerprint", ft.fingerprint(Scope::Backbone));
    Ok(out)
}

pub fn format_alpha(alpha: f64) -> String {
    format!("{alpha}")
}

/// WiSE-FT-LP: interpolate the backbones, then retrain a fresh head on `target`.
pub fn wise_ft_lp(
    pt: &Checkpoint,
    ft: &Checkpoint,
    alpha: f64,
    target: &Dataset,
    probe_cfg: &TrainConfig,
) -> Result<(Checkpoint, optim::TrainLog), WiseError> {
    let blended = interpolate(pt, ft, alpha, HeadPolicy::Omit)?;
    let (mut ckpt, log) = optim::linear_probe(&blended, target, probe_cfg)?;
    ckpt.set_meta("provenance", "rft");
    ckpt.set_meta("alpha", format_alpha(alpha));
    Ok((ckpt, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    WiseFt,
    WiseFtLp,
    LinearProbe,
    FullFt,
}

impl SweepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepMode::WiseFt => "wise_ft",
            SweepMode::WiseFtLp => "wise_ft_lp",
            SweepMode::LinearProbe => "linear_probe",
            SweepMode::FullFt => "full_ft",
        }
    }
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "wise_ft" => Ok(SweepMode::WiseFt),
            "wise_ft_lp" => Ok(SweepMode::WiseFtLp),
            "linear_probe" => Ok(SweepMode::LinearProbe),
            "full_ft" => Ok(SweepMode::FullFt),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub mode: SweepMode,
    /// Fractions in [0, 1]; the CSV renders them as percentages.
    pub downstream_acc: f64,
    pub robustness: f64,
    pub fewshot_mean: Option<f64>,
    pub fewshot_std: Option<f64>,
    /// Backbone fingerprint of the evaluated checkpoint.
    pub checkpoint_fingerprint: String,
}

/// Settings for the robustness columns of a sweep row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalConfig {
    pub svm: SvmConfig,
    pub fewshot: Option<EpisodeConfig>,
}

/// The default grid 1.0, 0.9, …, 0.0.
pub fn default_grid() -> Vec<f64> {
    (0..=10).rev().map(|i| i as f64 / 10.0).collect()
}

/// Robustness columns of a row; they depend on the backbone only.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneScores {
    pub robustness: f64,
    pub fewshot: Option<FewShotStats>,
    pub fingerprint: String,
}

/// Linear-SVM robustness (and optional few-shot stats) of a backbone on `source`.
/// Source features are extracted once and shared by both probes.
pub fn score_backbone(ckpt: &Checkpoint, source: &Dataset, eval: &EvalConfig) -> Result<BackboneScores, WiseError> {
    let train = robust::extract_features(ckpt, &source.train, &source.fingerprint)?;
    let test = robust::extract_features(ckpt, &source.test, &source.fingerprint)?;
    let robustness = robust::robustness_from_features(&train, &test, &eval.svm)?;
    let fewshot = match &eval.fewshot {
        Some(ep) => {
            let mut pool: FeatureMatrix = train;
            pool.features.extend(test.features);
            pool.labels.extend(test.labels);
            Some(robust::fewshot_from_features(&pool, ep, &eval.svm)?)
        }
        None => None,
    };
    Ok(BackboneScores {
        robustness,
        fewshot,
        fingerprint: ckpt.fingerprint(Scope::Backbone),
    })
}

fn make_row(alpha: f64, mode: SweepMode, downstream_acc: f64, scores: &BackboneScores) -> SweepRow {
    SweepRow {
        alpha,
        mode,
        downstream_acc,
        robustness: scores.robustness,
        fewshot_mean: scores.fewshot.map(|f| f.mean),
        fewshot_std: scores.fewshot.map(|f| f.std),
        checkpoint_fingerprint: scores.fingerprint.clone(),
    }
}

/// Evaluates a checkpoint with a head: downstream accuracy on `target.test`
/// plus the backbone scores on `source`.
pub fn evaluate(
    ckpt: &Checkpoint,
    alpha: f64,
    mode: SweepMode,
    target: &Dataset,
    source: &Dataset,
    eval: &EvalConfig,
) -> Result<SweepRow, WiseError> {
    let downstream_acc = optim::accuracy(ckpt, &target.test)?;
    let scores = score_backbone(ckpt, source, eval)?;
    Ok(make_row(alpha, mode, downstream_acc, &scores))
}

/// Sweep failure; rows evaluated before the failing α are kept.
#[derive(Debug, thiserror::Error)]
#[error("sweep aborted at alpha {alpha}: {source}")]
pub struct SweepError {
    pub alpha: f64,
    pub partial: Vec<(SweepMode, Vec<SweepRow>)>,
    #[source]
    pub source: WiseError,
}

pub fn check_grid(alphas: &[f64]) -> Result<Vec<f64>, WiseError> {
    if alphas.is_empty() {
        return Err(WiseError::Input("empty alpha grid".into()));
    }
    if let Some(&a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(WiseError::Alpha(a));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(WiseError::Input("repeated alpha in grid".into()));
    }
    Ok(sorted)
}

/// Evaluates θ(α) for every α in every requested mode. `wise_ft` keeps the
/// fine-tuned head; `wise_ft_lp` trains a fresh head on `target` with
/// `probe_cfg`. Both modes at one α share a backbone, so its robustness is
/// computed once. Rows come back in descending α, one list per mode.
#[allow(clippy::too_many_arguments)]
pub fn sweep_modes(
    pt: &Checkpoint,
    ft: &Checkpoint,
    alphas: &[f64],
    modes: &[SweepMode],
    target: &Dataset,
    source: &Dataset,
    probe_cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<(SweepMode, Vec<SweepRow>)>, SweepError> {
    let abort = |source: WiseError| SweepError {
        alpha: f64::NAN,
        partial: vec![],
        source,
    };
    let grid = check_grid(alphas).map_err(abort)?;
    if modes.is_empty() {
        return Err(abort(WiseError::Input("no sweep modes".into())));
    }
    if let Some(m) = modes.iter().find(|m| !matches!(m, SweepMode::WiseFt | SweepMode::WiseFtLp)) {
        return Err(abort(WiseError::Input(format!("sweep mode must be wise_ft or wise_ft_lp, got {m}"))));
    }

    let one = |alpha: f64| -> Result<Vec<SweepRow>, WiseError> {
        let blended = interpolate(pt, ft, alpha, HeadPolicy::FromFt)?;
        let scores = score_backbone(&blended, source, eval)?;
        let mut out = Vec::with_capacity(modes.len());
        for &mode in modes {
            let acc = match mode {
                SweepMode::WiseFt => optim::accuracy(&blended, &target.test)?,
                _ => {
                    let (probed, _) = wise_ft_lp(pt, ft, alpha, target, probe_cfg)?;
                    debug_assert_eq!(probed.fingerprint(Scope::Backbone), scores.fingerprint);
                    optim::accuracy(&probed, &target.test)?
                }
            };
            out.push(make_row(alpha, mode, acc, &scores));
        }
        Ok(out)
    };
    let results: Vec<Result<Vec<SweepRow>, WiseError>> = grid.par_iter().map(|&a| one(a)).collect();

    let mut tables: Vec<(SweepMode, Vec<SweepRow>)> = modes.iter().map(|&m| (m, Vec::new())).collect();
    for (alpha, r) in grid.iter().zip(results) {
        match r {
            Ok(rows) => {
                for (table, row) in tables.iter_mut().zip(rows) {
                    table.1.push(row);
                }
            }
            Err(source) => {
                return Err(SweepError {
                    alpha: *alpha,
                    partial: tables,
                    source,
                })
            }
        }
    }
    Ok(tables)
}

/// Single-mode sweep; see [`sweep_modes`].
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    pt: &Checkpoint,
    ft: &Checkpoint,
    alphas: &[f64],
    mode: SweepMode,
    target: &Dataset,
    source: &Dataset,
    probe_cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>, SweepError> {
    sweep_modes(pt, ft, alphas, &[mode], target, source, probe_cfg, eval)
        .map(|mut t| t.remove(0).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReachedEnd,
    AccDrop,
    RobustnessDrop,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::ReachedEnd => "reached_end",
            StopReason::AccDrop => "acc_drop",
            StopReason::RobustnessDrop => "robustness_drop",
        }
    }
}

/// What the accuracy drop is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccReference {
    /// The fully fine-tuned model at α = 1.
    #[default]
    Baseline,
    /// The last accepted α.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub alpha: f64,
    pub reason: StopReason,
    pub baseline_acc: f64,
}

/// Comparisons are in percentage points; this absorbs the rounding of
/// fraction → percent conversions so that a drop of exactly `drop_tol` passes.
const PP_EPS: f64 = 1e-9;

/// Greedy α selection: walk down from α = 1, stop when downstream accuracy
/// falls more than `drop_tol` points below the reference or robustness falls
/// below that of the last accepted α.
pub fn select_alpha_greedy(rows: &[SweepRow], drop_tol: f64, reference: AccReference) -> Result<Selection, WiseError> {
    let first = rows.first().ok_or_else(|| WiseError::Report("empty report".into()))?;
    if rows.windows(2).any(|w| w[1].alpha >= w[0].alpha) {
        return Err(WiseError::Report("rows must be strictly descending in alpha".into()));
    }
    if (first.alpha - 1.0).abs() > 1e-9 {
        return Err(WiseError::Report("report has no alpha = 1 row".into()));
    }
    if !(drop_tol >= 0.0) {
        return Err(WiseError::Report(format!("drop_tol {drop_tol} must be >= 0")));
    }
    let baseline_acc = first.downstream_acc;
    let mut accepted = first;
    for row in &rows[1..] {
        let reference_acc = match reference {
            AccReference::Baseline => baseline_acc,
            AccReference::Previous => accepted.downstream_acc,
        };
        let drop_pp = (reference_acc - row.downstream_acc) * 100.0;
        if drop_pp > drop_tol + PP_EPS {
            return Ok(Selection {
                alpha: accepted.alpha,
                reason: StopReason::AccDrop,
                baseline_acc,
            });
        }
        if row.robustness < accepted.robustness {
            return Ok(Selection {
                alpha: accepted.alpha,
                reason: StopReason::RobustnessDrop,
                baseline_acc,
            });
        }
        accepted = row;
    }
    Ok(Selection {
        alpha: accepted.alpha,
        reason: StopReason::ReachedEnd,
        baseline_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ArchConfig};
    use std::collections::BTreeMap;

    fn scalar_pair(a: f32, b: f32) -> (Checkpoint, Checkpoint) {
        let mut m = BTreeMap::new();
        m.insert("arch_fingerprint".to_string(), "x".to_string());
        m.insert("provenance".to_string(), "pt".to_string());
        m.insert("seed".to_string(), "0".to_string());
        let mut pt = Checkpoint::new(m.clone());
        pt.insert("w", Role::Backbone, Tensor::new(vec![1], vec![a]).unwrap()).unwrap();
        m.insert("provenance".to_string(), "ft".to_string());
        let mut ft = Checkpoint::new(m);
        ft.insert("w", Role::Backbone, Tensor::new(vec![1], vec![b]).unwrap()).unwrap();
        ft.insert("h", Role::Head, Tensor::new(vec![1], vec![9.0]).unwrap()).unwrap();
        (pt, ft)
    }

    #[test]
    fn midpoint_of_scalars() {
        let (pt, ft) = scalar_pair(2.0, 4.0);
        let out = interpolate(&pt, &ft, 0.5, HeadPolicy::Omit).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[3.0]);
        assert!(!out.contains("h"));
        assert_eq!(out.meta("alpha"), Some("0.5"));
        assert_eq!(out.provenance(), Some("wise"));
        out.validate().unwrap();
        let with_head = interpolate(&pt, &ft, 0.5, HeadPolicy::FromFt).unwrap();
        assert_eq!(with_head.get("h").unwrap().data(), &[9.0]);
    }

    #[test]
    fn endpoints_keep_negative_zero() {
        let (pt, ft) = scalar_pair(-0.0, 1.0);
        let out = interpolate(&pt, &ft, 0.0, HeadPolicy::Omit).unwrap();
        assert_eq!(out.get("w").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
        let out = interpolate(&ft, &pt, 1.0, HeadPolicy::Omit).unwrap();
        assert_eq!(out.get("w").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (pt, ft) = scalar_pair(1.0, 2.0);
        assert!(matches!(interpolate(&pt, &ft, 1.5, HeadPolicy::Omit), Err(WiseError::Alpha(_))));
        assert!(matches!(interpolate(&pt, &ft, -0.1, HeadPolicy::Omit), Err(WiseError::Alpha(_))));
        assert!(matches!(interpolate(&pt, &pt, 0.5, HeadPolicy::FromFt), Err(WiseError::Input(_))));
        let (nan, _) = scalar_pair(f32::NAN, 0.0);
        assert!(matches!(interpolate(&nan, &ft, 0.5, HeadPolicy::Omit), Err(WiseError::NonFinite(_))));
        let mut other = ft.clone();
        other.replace("w", Tensor::zeros(vec![1])).unwrap();
        other.insert("v", Role::Backbone, Tensor::zeros(vec![2])).unwrap();
        match interpolate(&pt, &other, 0.5, HeadPolicy::Omit) {
            Err(WiseError::Incompatible(d)) => assert_eq!(d.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pt_and_ft_from_init_are_compatible_on_backbone() {
        let arch = ArchConfig::new(8, &[4, 5], 3, 2);
        let pt = init_params(&arch, false, 0).unwrap();
        let ft = init_params(&arch, true, 1).unwrap();
        assert!(validate_compatibility(&pt, &ft, Scope::Backbone).is_empty());
        assert!(!validate_compatibility(&pt, &ft, Scope::All).is_empty());
    }

    #[test]
    fn snapping_makes_complements_exact() {
        for i in 0..=100 {
            let a = i as f64 / 100.0;
            let s = snap_alpha(a);
            assert_eq!(snap_alpha(1.0 - a), 1.0 - s);
            assert!((s - a).abs() <= 2f64.powi(-31));
        }
    }

    fn rows(accs: &[f64], robs: &[f64], alphas: &[f64]) -> Vec<SweepRow> {
        alphas
            .iter()
            .zip(accs)
            .zip(robs)
            .map(|((&alpha, &acc), &rob)| SweepRow {
                alpha,
                mode: SweepMode::WiseFtLp,
                downstream_acc: acc / 100.0,
                robustness: rob / 100.0,
                fewshot_mean: None,
                fewshot_std: None,
                checkpoint_fingerprint: String::new(),
            })
            .collect()
    }

    #[test]
    fn greedy_examples() {
        let r = rows(&[90.00, 89.95, 89.50], &[88.0, 89.0, 90.0], &[1.0, 0.9, 0.8]);
        let s = select_alpha_greedy(&r, 0.1, AccReference::Baseline).unwrap();
        assert_eq!((s.alpha, s.reason), (0.9, StopReason::AccDrop));
        assert_eq!(s.baseline_acc, 0.9);

        let r = rows(&[90.0, 90.0, 90.0], &[88.0, 87.0, 90.0], &[1.0, 0.9, 0.8]);
        let s = select_alpha_greedy(&r, 0.1, AccReference::Baseline).unwrap();
        assert_eq!((s.alpha, s.reason), (1.0, StopReason::RobustnessDrop));

        let grid = default_grid();
        let accs = vec![80.0; 11];
        let robs: Vec<f64> = (0..11).map(|i| 70.0 + i as f64).collect();
        let s = select_alpha_greedy(&rows(&accs, &robs, &grid), 0.1, AccReference::Baseline).unwrap();
        assert_eq!((s.alpha, s.reason), (0.0, StopReason::ReachedEnd));
    }

    #[test]
    fn drop_of_exactly_tol_is_accepted() {
        let r = rows(&[90.00, 89.90], &[80.0, 80.0], &[1.0, 0.9]);
        let s = select_alpha_greedy(&r, 0.1, AccReference::Baseline).unwrap();
        assert_eq!(s.reason, StopReason::ReachedEnd);
    }

    #[test]
    fn previous_reference_differs_from_baseline() {
        // slow decay: each step loses 0.08 points
        let r = rows(&[90.0, 89.92, 89.84], &[80.0, 81.0, 82.0], &[1.0, 0.9, 0.8]);
        let base = select_alpha_greedy(&r, 0.1, AccReference::Baseline).unwrap();
        let prev = select_alpha_greedy(&r, 0.1, AccReference::Previous).unwrap();
        assert_eq!((base.alpha, base.reason), (0.9, StopReason::AccDrop));
        assert_eq!((prev.alpha, prev.reason), (0.8, StopReason::ReachedEnd));
    }

    #[test]
    fn greedy_rejects_malformed_reports() {
        let r = rows(&[1.0, 1.0], &[1.0, 1.0], &[0.9, 1.0]);
        assert!(select_alpha_greedy(&r, 0.1, AccReference::Baseline).is_err());
        let r = rows(&[1.0, 1.0], &[1.0, 1.0], &[0.9, 0.8]);
        assert!(select_alpha_greedy(&r, 0.1, AccReference::Baseline).is_err());
        assert!(select_alpha_greedy(&[], 0.1, AccReference::Baseline).is_err());
    }

    #[test]
    fn grid_checks() {
        assert_eq!(default_grid().len(), 11);
        assert_eq!(default_grid()[0], 1.0);
        assert_eq!(default_grid()[10], 0.0);
        assert!(check_grid(&[]).is_err());
        assert!(check_grid(&[0.5, 0.5]).is_err());
        assert!(check_grid(&[1.2]).is_err());
        assert_eq!(check_grid(&[0.0, 1.0, 0.5]).unwrap(), vec![1.0, 0.5, 0.0]);
    }
}

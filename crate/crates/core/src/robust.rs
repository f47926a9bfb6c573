//! Backbone robustness probes: a one-vs-rest linear SVM on frozen features and
//! episodic few-shot evaluation with the same classifier.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::{NetError, Network};
use crate::rng;
use crate::shapes::{Dataset, PointCloud};
use crate::tensorstore::{Checkpoint, Role, Scope};

#[derive(Debug, thiserror::Error)]
pub enum RobustError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("need at least two classes, found {0}")]
    SingleClass(usize),
    #[error("feature dimension {found} does not match model dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite feature for sample {0}")]
    NonFinite(usize),
    #[error("infeasible episode config: {0}")]
    Episode(String),
    #[error("invalid svm config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub source_fingerprint: String,
}

impl FeatureMatrix {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self, RobustError> {
        if features.len() != labels.len() {
            return Err(RobustError::Dimension {
                expected: labels.len(),
                found: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(RobustError::NonFinite(i));
        }
        if let Some(d) = features.first().map(Vec::len) {
            if let Some(r) = features.iter().find(|r| r.len() != d) {
                return Err(RobustError::Dimension { expected: d, found: r.len() });
            }
        }
        Ok(Self {
            features,
            labels,
            source_fingerprint: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn select(&self, idx: &[usize], labels: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: labels.to_vec(),
            source_fingerprint: self.source_fingerprint.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmConfig {
    #[serde(default = "default_c", rename = "C")]
    pub c: f64,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_c() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_epochs() -> usize {
    1000
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: default_c(),
            tolerance: default_tol(),
            max_epochs: default_max_epochs(),
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<(), RobustError> {
        if !(self.c > 0.0 && self.c.is_finite() && self.tolerance > 0.0 && self.max_epochs > 0) {
            return Err(RobustError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// How one binary sub-problem finished.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub epochs: usize,
    pub converged: bool,
    pub max_violation: f64,
    /// Dual objective after each epoch.
    pub dual_history: Vec<f64>,
    pub primal: f64,
    pub dual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// One vector of length F+1 per class; the last coordinate is the bias.
    pub weights: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub deviation: Vec<f64>,
    pub reports: Vec<SolveReport>,
}

pub const MIN_DEVIATION: f64 = 1e-8;

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.len()
    }

    /// Standardized features with the constant-1 bias coordinate appended.
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .zip(&self.deviation)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        z.push(1.0);
        z
    }

    /// Decision values per class for one raw feature vector.
    pub fn decision(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardize(x);
        self.weights.iter().map(|w| dot(w, &z)).collect()
    }

    /// Argmax class, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        crate::net::argmax(&self.decision(x))
    }

    pub fn converged(&self) -> bool {
        self.reports.iter().all(|r| r.converged)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Primal objective ½‖w‖² + C Σ max(0, 1 − y⟨w,x⟩).
pub fn primal_objective(w: &[f64], rows: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let hinge: f64 = rows
        .iter()
        .zip(y)
        .map(|(x, &yi)| (1.0 - yi * dot(w, x)).max(0.0))
        .sum();
    0.5 * dot(w, w) + c * hinge
}

/// Dual objective Σα − ½‖Σ αᵢyᵢxᵢ‖².
pub fn dual_objective(alpha: &[f64], rows: &[Vec<f64>], y: &[f64]) -> f64 {
    let d = rows.first().map_or(0, Vec::len);
    let mut w = vec![0.0; d];
    for ((a, x), &yi) in alpha.iter().zip(rows).zip(y) {
        for (wj, xj) in w.iter_mut().zip(x) {
            *wj += a * yi * xj;
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * dot(&w, &w)
}

/// Dual coordinate descent for the L1-hinge linear SVM on pre-augmented rows.
/// Returns the weight vector, the dual variables and a report.
pub fn solve_binary(rows: &[Vec<f64>], y: &[f64], cfg: &SvmConfig, stream: &str) -> (Vec<f64>, Vec<f64>, SolveReport) {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let q: Vec<f64> = rows.iter().map(|x| dot(x, x)).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(cfg.seed, &["svm", stream]);
    let mut history = Vec::new();
    let mut alpha_sum = 0.0;
    let mut converged = false;
    let mut max_violation = f64::INFINITY;
    let mut epochs = 0;

    while epochs < cfg.max_epochs {
        epochs += 1;
        order.shuffle(&mut r);
        max_violation = 0.0f64;
        for &i in &order {
            let g = y[i] * dot(&w, &rows[i]) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= cfg.c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 && q[i] > 0.0 {
                let old = alpha[i];
                let new = (old - g / q[i]).clamp(0.0, cfg.c);
                let delta = (new - old) * y[i];
                if delta != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(&rows[i]) {
                        *wj += delta * xj;
                    }
                    alpha_sum += new - old;
                    alpha[i] = new;
                }
            }
        }
        history.push(alpha_sum - 0.5 * dot(&w, &w));
        if max_violation < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let report = SolveReport {
        epochs,
        converged,
        max_violation,
        primal: primal_objective(&w, rows, y, cfg.c),
        dual: dual_objective(&alpha, rows, y),
        dual_history: history,
    };
    (w, alpha, report)
}

/// Standardizes by training statistics and fits one binary SVM per class.
pub fn train_linear_svm(train: &FeatureMatrix, cfg: &SvmConfig) -> Result<SvmModel, RobustError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(RobustError::Empty("svm training set"));
    }
    let mut present: Vec<usize> = train.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(RobustError::SingleClass(present.len()));
    }
    let n_classes = present.last().unwrap() + 1;
    let dim = train.dim();
    let m = train.len() as f64;

    let mut mean = vec![0.0; dim];
    for x in &train.features {
        for (mj, xj) in mean.iter_mut().zip(x) {
            *mj += xj;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut deviation = vec![0.0; dim];
    for x in &train.features {
        for ((sj, xj), mj) in deviation.iter_mut().zip(x).zip(&mean) {
            *sj += (xj - mj) * (xj - mj);
        }
    }
    deviation
        .iter_mut()
        .for_each(|v| *v = (*v / m).sqrt().max(MIN_DEVIATION));

    let mut model = SvmModel {
        weights: Vec::new(),
        mean,
        deviation,
        reports: Vec::new(),
    };
    let rows: Vec<Vec<f64>> = train.features.iter().map(|x| model.standardize(x)).collect();
    let solved: Vec<(Vec<f64>, SolveReport)> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = train
                .labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            let (w, _, rep) = solve_binary(&rows, &y, cfg, &c.to_string());
            (w, rep)
        })
        .collect();
    for (w, rep) in solved {
        model.weights.push(w);
        model.reports.push(rep);
    }
    Ok(model)
}

pub fn svm_accuracy(model: &SvmModel, test: &FeatureMatrix) -> Result<f64, RobustError> {
    if test.is_empty() {
        return Err(RobustError::Empty("svm test set"));
    }
    if test.dim() != model.dim() {
        return Err(RobustError::Dimension {
            expected: model.dim(),
            found: test.dim(),
        });
    }
    let hits = test
        .features
        .iter()
        .zip(&test.labels)
        .filter(|(x, &l)| model.predict(x) == l)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Frozen backbone features of every cloud, in order.
pub fn extract_features(ckpt: &Checkpoint, clouds: &[PointCloud], data_fingerprint: &str) -> Result<FeatureMatrix, RobustError> {
    if !ckpt.has_role(Role::Backbone) {
        return Err(RobustError::Empty("checkpoint has no backbone entries"));
    }
    let net = Network::from_checkpoint(ckpt)?;
    let features: Vec<Vec<f64>> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, pc)| match net.features(pc) {
            Ok((f, _)) => Ok(f),
            Err(NetError::NonFinite(_)) => Err(RobustError::NonFinite(i)),
            Err(e) => Err(e.into()),
        })
        .collect::<Result<_, _>>()?;
    let mut fm = FeatureMatrix::new(features, clouds.iter().map(|pc| pc.label).collect())?;
    fm.source_fingerprint = format!("{}+{}", ckpt.fingerprint(Scope::Backbone), data_fingerprint);
    Ok(fm)
}

/// SVM accuracy on held-out features after training on `train`.
pub fn robustness_from_features(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &SvmConfig) -> Result<f64, RobustError> {
    let model = train_linear_svm(train, cfg)?;
    svm_accuracy(&model, test)
}

/// Linear-SVM accuracy of the checkpoint's frozen features on `source`
/// (train on the train split, score on the test split).
pub fn robustness_score(ckpt: &Checkpoint, source: &Dataset, cfg: &SvmConfig) -> Result<f64, RobustError> {
    let train = extract_features(ckpt, &source.train, &source.fingerprint)?;
    let test = extract_features(ckpt, &source.test, &source.fingerprint)?;
    robustness_from_features(&train, &test, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    #[serde(default = "default_way")]
    pub n_way: usize,
    #[serde(default = "default_shot")]
    pub k_shot: usize,
    #[serde(default = "default_query")]
    pub q_query: usize,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_way() -> usize {
    5
}
fn default_shot() -> usize {
    10
}
fn default_query() -> usize {
    20
}
fn default_episodes() -> usize {
    50
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: default_way(),
            k_shot: default_shot(),
            q_query: default_query(),
            episodes: default_episodes(),
            seed: 0,
        }
    }
}

/// Mean and population standard deviation of per-episode accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FewShotStats {
    pub mean: f64,
    pub std: f64,
}

/// Runs episodes over a pooled feature matrix. Each episode samples `n_way`
/// classes and disjoint support/query sets per class from its own substream.
pub fn fewshot_from_features(pool: &FeatureMatrix, ep: &EpisodeConfig, svm: &SvmConfig) -> Result<FewShotStats, RobustError> {
    if ep.n_way < 2 || ep.k_shot == 0 || ep.q_query == 0 || ep.episodes == 0 {
        return Err(RobustError::Episode(format!("{ep:?}")));
    }
    let n_labels = pool.labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, &l) in pool.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let need = ep.k_shot + ep.q_query;
    let eligible: Vec<usize> = (0..n_labels).filter(|&c| by_class[c].len() >= need).collect();
    if eligible.len() < ep.n_way {
        return Err(RobustError::Episode(format!(
            "{}-way {}+{} needs {} classes with {} samples, have {}",
            ep.n_way,
            ep.k_shot,
            ep.q_query,
            ep.n_way,
            need,
            eligible.len()
        )));
    }
    let accs: Vec<f64> = (0..ep.episodes)
        .into_par_iter()
        .map(|e| {
            let mut r = rng::substream(ep.seed, &["episode", &e.to_string()]);
            let picked = sample_indices(&mut r, eligible.len(), ep.n_way).into_vec();
            let (mut s_idx, mut s_lab, mut q_idx, mut q_lab) = (vec![], vec![], vec![], vec![]);
            for (new_label, &k) in picked.iter().enumerate() {
                let members = &by_class[eligible[k]];
                let chosen = sample_indices(&mut r, members.len(), need).into_vec();
                for (j, &m) in chosen.iter().enumerate() {
                    if j < ep.k_shot {
                        s_idx.push(members[m]);
                        s_lab.push(new_label);
                    } else {
                        q_idx.push(members[m]);
                        q_lab.push(new_label);
                    }
                }
            }
            let support = pool.select(&s_idx, &s_lab);
            let query = pool.select(&q_idx, &q_lab);
            let mut cfg = svm.clone();
            cfg.seed = svm.seed.wrapping_add(e as u64);
            robustness_from_features(&support, &query, &cfg)
        })
        .collect::<Result<_, _>>()?;
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Ok(FewShotStats { mean, std: var.sqrt() })
}

/// Few-shot episodes over the pooled train and test splits of `data`.
pub fn fewshot_eval(ckpt: &Checkpoint, data: &Dataset, ep: &EpisodeConfig, svm: &SvmConfig) -> Result<FewShotStats, RobustError> {
    let pool: Vec<PointCloud> = data.train.iter().chain(&data.test).cloned().collect();
    let fm = extract_features(ckpt, &pool, &data.fingerprint)?;
    fewshot_from_features(&fm, ep, svm)
}

//! SGD-with-momentum training loops: supervised stand-in pretraining, full
//! fine-tuning and linear probing.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::{self, ArchConfig, NetError, NetGrads, Network, TrainMode};
use crate::rng;
use crate::shapes::{Dataset, PointCloud};
use crate::tensorstore::{Checkpoint, Role, Scope};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bad input checkpoint: {0}")]
    Input(String),
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_batch() -> usize {
    32
}
fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            learning_rate,
            momentum: default_momentum(),
            seed,
            shuffle: true,
        }
    }

    pub fn pretrain_default(seed: u64) -> Self {
        Self::new(50, 0.01, seed)
    }

    pub fn finetune_default(seed: u64) -> Self {
        Self::new(50, 0.01, seed)
    }

    pub fn probe_default(seed: u64) -> Self {
        Self::new(30, 0.1, seed)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        // lr = 0 is allowed: it is the identity run used to check plumbing
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub test_acc: f64,
}

impl TrainLog {
    /// `epoch,loss,train_acc` rows followed by a `test_acc,<value>` footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc\n");
        for r in &self.epochs {
            writeln!(s, "{},{:.6},{:.6}", r.epoch, r.loss, r.train_acc).unwrap();
        }
        writeln!(s, "test_acc,{:.6}", self.test_acc).unwrap();
        s
    }
}

/// Fraction of `clouds` the checkpoint classifies correctly.
pub fn accuracy(ckpt: &Checkpoint, clouds: &[PointCloud]) -> Result<f64, NetError> {
    let net = Network::from_checkpoint(ckpt)?;
    accuracy_with(&net, clouds)
}

pub fn accuracy_with(net: &Network, clouds: &[PointCloud]) -> Result<f64, NetError> {
    if clouds.is_empty() {
        return Err(NetError::Batch("no samples to score".into()));
    }
    let hits: Vec<bool> = clouds
        .par_iter()
        .map(|pc| net.predict(pc).map(|p| p == pc.label))
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / clouds.len() as f64)
}

struct Momentum {
    velocity: Vec<(String, Vec<f64>)>,
}

impl Momentum {
    /// v <- mu v + g; p <- p - lr v, with p rounded once back to f32.
    fn step(&mut self, params: &mut Checkpoint, grads: NetGrads, lr: f64, mu: f64) {
        let named = grads.into_named();
        if self.velocity.is_empty() {
            self.velocity = named
                .entries
                .iter()
                .map(|(n, g)| (n.clone(), vec![0.0; g.len()]))
                .collect();
        }
        for ((name, v), (gname, g)) in self.velocity.iter_mut().zip(&named.entries) {
            debug_assert_eq!(name, gname);
            let p = params.data_mut(name).expect("gradient for unknown entry");
            for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = mu * *vv + gv;
                *pv = (*pv as f64 - lr * *vv) as f32;
            }
        }
    }
}

/// Mini-batch SGD with momentum on mean cross-entropy. In head-only mode the
/// frozen features are computed once and backbone tensors are never written.
pub fn train(
    init: &Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if !init.has_role(Role::Head) {
        return Err(TrainError::Input("training needs head entries".into()));
    }
    if !init.has_role(Role::Backbone) {
        return Err(TrainError::Input("training needs backbone entries".into()));
    }
    let train_set = &data.train;
    if train_set.is_empty() {
        return Err(TrainError::Input("empty training split".into()));
    }
    let mut params = init.clone();
    let frozen: Option<Vec<Vec<f64>>> = match mode {
        TrainMode::HeadOnly => {
            let net = Network::from_checkpoint(&params)?;
            Some(
                train_set
                    .par_iter()
                    .map(|pc| net.features(pc).map(|(f, _)| f))
                    .collect::<Result<_, _>>()?,
            )
        }
        TrainMode::Full => None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut momentum = Momentum { velocity: Vec::new() };
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            let mut r = rng::substream(cfg.seed, &["shuffle", &epoch.to_string()]);
            order.shuffle(&mut r);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let net = Network::from_checkpoint(&params)?;
            let result = match &frozen {
                Some(feats) => net.batch_grads(batch.len(), mode, |i| {
                    let k = batch[i];
                    net.sample_grads_from_feature(&feats[k], train_set[k].label)
                }),
                None => net.batch_grads(batch.len(), mode, |i| net.sample_grads(&train_set[batch[i]], mode)),
            };
            let result = match result {
                Err(NetError::NonFinite(_)) => return Err(TrainError::NonFiniteLoss { epoch }),
                other => other?,
            };
            loss_sum += result.loss * batch.len() as f64;
            correct += result.correct;
            momentum.step(&mut params, result.grads, cfg.learning_rate, cfg.momentum);
        }
        let loss = loss_sum / train_set.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            train_acc: correct as f64 / train_set.len() as f64,
        });
    }
    if !data.test.is_empty() {
        log.test_acc = accuracy(&params, &data.test)?;
    }
    Ok((params, log))
}

/// Copies the head entries of a fresh `init_params(arch, seed)` into `ckpt`.
fn attach_fresh_head(ckpt: &mut Checkpoint, arch: &ArchConfig, seed: u64) -> Result<(), TrainError> {
    let fresh = net::init_params(arch, true, seed)?;
    for (name, p) in fresh.iter().filter(|(_, p)| p.role == Role::Head) {
        ckpt.insert(name, Role::Head, p.tensor.clone())
            .map_err(|e| TrainError::Input(e.to_string()))?;
    }
    ckpt.set_meta("arch", arch.to_json());
    ckpt.set_meta("arch_fingerprint", arch.fingerprint());
    Ok(())
}

/// Arch of `ckpt` with the output width set to the dataset's class count.
fn arch_for(ckpt: &Checkpoint, data: &Dataset) -> Result<ArchConfig, TrainError> {
    let mut arch = ArchConfig::from_checkpoint(ckpt)?;
    *arch.head_widths.last_mut().unwrap() = data.n_classes();
    arch.validate()?;
    Ok(arch)
}

/// Supervised surrogate for self-supervised pretraining: train a fresh model
/// on `source`, then drop its head.
pub fn pretrain_standin(
    arch: &ArchConfig,
    source: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    if source.train.is_empty() {
        return Err(TrainError::Input("empty source dataset".into()));
    }
    let mut arch = arch.clone();
    *arch.head_widths.last_mut().unwrap() = source.n_classes();
    let init = net::init_params(&arch, true, cfg.seed)?;
    let (mut ckpt, log) = train(&init, source, cfg, TrainMode::Full)?;
    ckpt.strip_role(Role::Head);
    ckpt.set_meta("provenance", "pt");
    ckpt.set_meta("source_fingerprint", source.fingerprint.clone());
    Ok((ckpt, log))
}

/// Attaches a fresh head to a pretrained backbone and trains everything.
pub fn full_finetune(pt: &Checkpoint, target: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog), TrainError> {
    if pt.provenance() != Some("pt") || pt.has_role(Role::Head) {
        return Err(TrainError::Input("full_finetune expects a backbone-only pt checkpoint".into()));
    }
    let arch = arch_for(pt, target)?;
    let mut init = pt.clone();
    attach_fresh_head(&mut init, &arch, cfg.seed)?;
    let (mut ckpt, log) = train(&init, target, cfg, TrainMode::Full)?;
    ckpt.set_meta("provenance", "ft");
    ckpt.set_meta("seed", cfg.seed.to_string());
    ckpt.set_meta("pt_fingerprint", pt.fingerprint(Scope::Backbone));
    ckpt.set_meta("target_fingerprint", target.fingerprint.clone());
    Ok((ckpt, log))
}

/// Trains only the head on frozen backbone features. A missing head is
/// freshly initialized from `cfg.seed`; an existing one is trained further.
pub fn linear_probe(base: &Checkpoint, target: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainLog), TrainError> {
    if !base.has_role(Role::Backbone) {
        return Err(TrainError::Input("linear_probe needs backbone entries".into()));
    }
    let mut init = base.clone();
    if !base.has_role(Role::Head) {
        let arch = arch_for(base, target)?;
        attach_fresh_head(&mut init, &arch, cfg.seed)?;
    }
    let (mut ckpt, log) = train(&init, target, cfg, TrainMode::HeadOnly)?;
    ckpt.set_meta("provenance", "rft");
    ckpt.set_meta("seed", cfg.seed.to_string());
    ckpt.set_meta("base_fingerprint", base.fingerprint(Scope::Backbone));
    ckpt.set_meta("target_fingerprint", target.fingerprint.clone());
    Ok((ckpt, log))
}

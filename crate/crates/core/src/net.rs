//! Point-cloud classifier: a shared per-point MLP encoder with global max
//! pooling (backbone) followed by a three-layer MLP head, with closed-form
//! backpropagation. Parameters are stored as f32; all arithmetic is f64.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, sha256_hex};
use crate::shapes::PointCloud;
use crate::tensorstore::{Checkpoint, Role, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("parameter mismatch: {0}")]
    Shape(String),
    #[error("checkpoint has no head entries")]
    MissingHead,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("bad batch: {0}")]
    Batch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_points: usize,
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::new(256, &[64, 128, 128], 64, 8)
    }
}

impl ArchConfig {
    /// `encoder_hidden` lists widths after the 3-d input; the head is
    /// `[F, head_hidden, head_hidden, n_classes]`.
    pub fn new(n_points: usize, encoder_hidden: &[usize], head_hidden: usize, n_classes: usize) -> Self {
        let mut encoder_widths = vec![3];
        encoder_widths.extend_from_slice(encoder_hidden);
        let f = *encoder_widths.last().unwrap();
        Self {
            n_points,
            encoder_widths,
            head_widths: vec![f, head_hidden, head_hidden, n_classes],
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Arch(m));
        if self.encoder_widths.len() < 2 || self.encoder_widths[0] != 3 {
            return bad(format!("encoder_widths must start at 3 and have >= 1 layer: {:?}", self.encoder_widths));
        }
        if self.head_widths.len() != 4 {
            return bad(format!("head must have exactly 3 affine layers: {:?}", self.head_widths));
        }
        if self.head_widths[0] != self.feature_dim() {
            return bad(format!(
                "head input {} != feature dim {}",
                self.head_widths[0],
                self.feature_dim()
            ));
        }
        if self.n_points == 0 || self.encoder_widths.contains(&0) || self.head_widths.contains(&0) {
            return bad("widths and n_points must be >= 1".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap()
    }

    pub fn n_classes(&self) -> usize {
        *self.head_widths.last().unwrap()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("arch serializes")
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_json().as_bytes())[..16].to_string()
    }

    /// `(name, role, [out, in])` for every weight matrix, biases implied.
    fn layers(&self) -> impl Iterator<Item = (String, Role, usize, usize)> + '_ {
        let enc = self
            .encoder_widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| (format!("enc.{k}"), Role::Backbone, w[1], w[0]));
        let head = self
            .head_widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| (format!("head.{k}"), Role::Head, w[1], w[0]));
        enc.chain(head)
    }

    /// Reads the architecture recorded in a checkpoint and checks its fingerprint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetError> {
        let json = ckpt
            .meta("arch")
            .ok_or_else(|| NetError::Arch("checkpoint metadata lacks \"arch\"".into()))?;
        let arch: ArchConfig =
            serde_json::from_str(json).map_err(|e| NetError::Arch(e.to_string()))?;
        arch.validate()?;
        match ckpt.meta("arch_fingerprint") {
            Some(fp) if fp == arch.fingerprint() => Ok(arch),
            other => Err(NetError::Arch(format!(
                "arch_fingerprint {:?} does not match {}",
                other,
                arch.fingerprint()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    HeadOnly,
}

/// Base metadata every checkpoint built for `arch` carries.
pub fn base_metadata(arch: &ArchConfig, provenance: &str, seed: u64) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("arch".into(), arch.to_json());
    m.insert("arch_fingerprint".into(), arch.fingerprint());
    m.insert("provenance".into(), provenance.into());
    m.insert("seed".into(), seed.to_string());
    m
}

/// Fresh parameters: weights uniform in ±sqrt(6/fan_in), zero biases.
/// Each tensor draws from its own substream, so the head does not depend on
/// whether the encoder was drawn.
pub fn init_params(arch: &ArchConfig, with_head: bool, seed: u64) -> Result<Checkpoint, NetError> {
    arch.validate()?;
    let mut ckpt = Checkpoint::new(base_metadata(arch, "scratch", seed));
    for (name, role, out, inp) in arch.layers() {
        if role == Role::Head && !with_head {
            continue;
        }
        let wname = format!("{name}.weight");
        let limit = (6.0 / inp as f64).sqrt();
        let mut rng = rng::substream(seed, &["init", &wname]);
        let w: Vec<f32> = (0..out * inp)
            .map(|_| (limit * (2.0 * rng.random::<f64>() - 1.0)) as f32)
            .collect();
        let insert = |c: &mut Checkpoint, n: &str, t: Tensor| {
            c.insert(n, role, t).map_err(|e| NetError::Shape(e.to_string()))
        };
        insert(&mut ckpt, &wname, Tensor::new(vec![out, inp], w).unwrap())?;
        insert(&mut ckpt, &format!("{name}.bias"), Tensor::zeros(vec![out]))?;
    }
    Ok(ckpt)
}

#[derive(Debug, Clone)]
struct Affine {
    out: usize,
    inp: usize,
    /// out x in
    w: Vec<f64>,
    /// in x out
    wt: Vec<f64>,
    b: Vec<f64>,
}

impl Affine {
    fn load(ckpt: &Checkpoint, name: &str, out: usize, inp: usize) -> Result<Self, NetError> {
        let fetch = |n: String, shape: &[usize]| -> Result<Vec<f64>, NetError> {
            let t = ckpt
                .get(&n)
                .ok_or_else(|| NetError::Shape(format!("missing {n}")))?;
            if t.shape() != shape {
                return Err(NetError::Shape(format!("{n}: shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(NetError::NonFinite(n));
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        let w = fetch(format!("{name}.weight"), &[out, inp])?;
        let b = fetch(format!("{name}.bias"), &[out])?;
        let mut wt = vec![0.0; out * inp];
        for o in 0..out {
            for i in 0..inp {
                wt[i * out + o] = w[o * inp + i];
            }
        }
        Ok(Self { out, inp, w, wt, b })
    }

    /// Applies the layer to `rows` row vectors stored contiguously in `x`.
    fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut z = vec![0.0; rows * self.out];
        for (xr, zr) in x.chunks_exact(self.inp).zip(z.chunks_exact_mut(self.out)).take(rows) {
            zr.copy_from_slice(&self.b);
            for (&xi, wrow) in xr.iter().zip(self.wt.chunks_exact(self.out)) {
                if xi != 0.0 {
                    for (zo, &wv) in zr.iter_mut().zip(wrow) {
                        *zo += xi * wv;
                    }
                }
            }
        }
        z
    }
}

#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineGrad {
    fn zeros(l: &Affine) -> Self {
        Self {
            w: vec![0.0; l.out * l.inp],
            b: vec![0.0; l.out],
        }
    }

    fn add_outer(&mut self, dz: &[f64], x: &[f64]) {
        let inp = x.len();
        for (o, &d) in dz.iter().enumerate() {
            if d != 0.0 {
                self.b[o] += d;
                for (g, &xv) in self.w[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
        }
    }

    fn add(&mut self, other: &AffineGrad) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.w.iter_mut().chain(self.b.iter_mut()).for_each(|v| *v *= s);
    }
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
}

/// Activations kept from `forward_features` for the backward pass.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    n_points: usize,
    /// Input to each encoder layer (N x in), starting with the raw points.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each encoder layer (N x out).
    pre: Vec<Vec<f64>>,
    /// Winning point per feature channel; ties go to the lowest index.
    pub argmax: Vec<usize>,
}

impl FeatureCache {
    /// Scatters a pooled gradient (length F) back onto the N x F per-point outputs.
    pub fn route_pooled_grad(&self, pooled: &[f64]) -> Vec<f64> {
        let f = pooled.len();
        let mut out = vec![0.0; self.n_points * f];
        for (c, &g) in pooled.iter().enumerate() {
            out[self.argmax[c] * f + c] = g;
        }
        out
    }

    /// Sign pattern of every pre-activation plus the argmax indices. Two
    /// evaluations with equal patterns lie in the same linear region.
    pub fn pattern(&self) -> (Vec<bool>, Vec<usize>) {
        let signs = self.pre.iter().flatten().map(|&z| z > 0.0).collect();
        (signs, self.argmax.clone())
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    /// Inputs to each head layer (feature, a1, a2).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the two hidden layers.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

/// Per-sample or batch gradients for a [`Network`], laid out by layer.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub encoder: Vec<AffineGrad>,
    pub head: Vec<AffineGrad>,
}

impl NetGrads {
    fn add(&mut self, other: &NetGrads) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add(b);
        }
        for (a, b) in self.head.iter_mut().zip(&other.head) {
            a.add(b);
        }
    }

    fn scale(&mut self, s: f64) {
        self.encoder.iter_mut().chain(self.head.iter_mut()).for_each(|g| g.scale(s));
    }

    /// Named view matching checkpoint entry names.
    pub fn into_named(self) -> Grads {
        let mut entries = BTreeMap::new();
        for (k, g) in self.encoder.into_iter().enumerate() {
            entries.insert(format!("enc.{k}.weight"), g.w);
            entries.insert(format!("enc.{k}.bias"), g.b);
        }
        for (k, g) in self.head.into_iter().enumerate() {
            entries.insert(format!("head.{k}.weight"), g.w);
            entries.insert(format!("head.{k}.bias"), g.b);
        }
        Grads { entries }
    }
}

/// Gradient collection keyed like checkpoint entries.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Result of one sample's forward/backward pass.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub loss: f64,
    pub correct: bool,
    pub grads: NetGrads,
}

/// f64 view of a checkpoint, built once per optimizer step.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchConfig,
    encoder: Vec<Affine>,
    head: Option<Vec<Affine>>,
}

impl Network {
    /// Interprets `ckpt` against the architecture recorded in its metadata.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetError> {
        let arch = ArchConfig::from_checkpoint(ckpt)?;
        let mut encoder = Vec::new();
        let mut head = Vec::new();
        let has_head = ckpt.has_role(Role::Head);
        for (name, role, out, inp) in arch.layers() {
            match role {
                Role::Backbone => encoder.push(Affine::load(ckpt, &name, out, inp)?),
                Role::Head if has_head => head.push(Affine::load(ckpt, &name, out, inp)?),
                Role::Head => {}
            }
        }
        for (name, p) in ckpt.iter() {
            let expected = arch.layers().any(|(l, r, _, _)| {
                r == p.role && (name == format!("{l}.weight") || name == format!("{l}.bias"))
            });
            if !expected {
                return Err(NetError::Shape(format!("unexpected entry {name} ({})", p.role)));
            }
        }
        Ok(Self {
            arch,
            encoder,
            head: has_head.then_some(head),
        })
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn features(&self, pc: &PointCloud) -> Result<(Vec<f64>, FeatureCache), NetError> {
        let n = pc.points.len();
        if n == 0 {
            return Err(NetError::Batch("empty point cloud".into()));
        }
        let mut x: Vec<f64> = pc.points.iter().flat_map(|p| p.map(|v| v as f64)).collect();
        let mut inputs = Vec::with_capacity(self.encoder.len());
        let mut pre = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let z = layer.forward_rows(&x, n);
            let mut a = z.clone();
            relu_in_place(&mut a);
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        let f = self.arch.feature_dim();
        let mut feat = x[..f].to_vec();
        let mut argmax = vec![0usize; f];
        for (p, row) in x.chunks_exact(f).enumerate().skip(1) {
            for c in 0..f {
                if row[c] > feat[c] {
                    feat[c] = row[c];
                    argmax[c] = p;
                }
            }
        }
        if let Some(c) = feat.iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(format!("feature channel {c}")));
        }
        Ok((
            feat,
            FeatureCache {
                n_points: n,
                inputs,
                pre,
                argmax,
            },
        ))
    }

    fn head_layers(&self) -> Result<&[Affine], NetError> {
        self.head.as_deref().ok_or(NetError::MissingHead)
    }

    fn head_forward(&self, feature: &[f64]) -> Result<HeadCache, NetError> {
        let layers = self.head_layers()?;
        if feature.len() != self.arch.feature_dim() {
            return Err(NetError::Shape(format!(
                "feature length {} != {}",
                feature.len(),
                self.arch.feature_dim()
            )));
        }
        let mut inputs = vec![feature.to_vec()];
        let mut pre = Vec::new();
        let mut x = feature.to_vec();
        for (k, layer) in layers.iter().enumerate() {
            let z = layer.forward_rows(&x, 1);
            if k + 1 == layers.len() {
                x = z;
            } else {
                let mut a = z.clone();
                relu_in_place(&mut a);
                pre.push(z);
                inputs.push(a.clone());
                x = a;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("logits".into()));
        }
        Ok(HeadCache { inputs, pre, logits: x })
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.head_forward(feature)?.logits)
    }

    /// Predicted class for a cloud; ties go to the lowest index.
    pub fn predict(&self, pc: &PointCloud) -> Result<usize, NetError> {
        let (f, _) = self.features(pc)?;
        Ok(argmax(&self.logits(&f)?))
    }

    fn zero_grads(&self, mode: TrainMode) -> NetGrads {
        let encoder = match mode {
            TrainMode::Full => self.encoder.iter().map(AffineGrad::zeros).collect(),
            TrainMode::HeadOnly => Vec::new(),
        };
        let head = self.head.iter().flatten().map(AffineGrad::zeros).collect();
        NetGrads { encoder, head }
    }

    /// Cross-entropy and head gradients given a precomputed feature; returns
    /// the gradient with respect to the feature as well.
    fn head_backward(&self, feature: &[f64], label: usize, grads: &mut NetGrads) -> Result<(f64, bool, Vec<f64>), NetError> {
        let layers = self.head_layers()?;
        let cache = self.head_forward(feature)?;
        let probs = softmax(&cache.logits);
        let loss = -log_softmax_at(&cache.logits, label);
        let correct = argmax(&cache.logits) == label;

        let mut delta: Vec<f64> = probs;
        delta[label] -= 1.0;
        for k in (0..layers.len()).rev() {
            grads.head[k].add_outer(&delta, &cache.inputs[k]);
            let layer = &layers[k];
            let mut dx = vec![0.0; layer.inp];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (g, &wv) in dx.iter_mut().zip(&layer.w[o * layer.inp..(o + 1) * layer.inp]) {
                        *g += d * wv;
                    }
                }
            }
            if k > 0 {
                for (g, &z) in dx.iter_mut().zip(&cache.pre[k - 1]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok((loss, correct, delta))
    }

    fn encoder_backward(&self, cache: &FeatureCache, dfeat: &[f64], grads: &mut NetGrads) {
        let n = cache.n_points;
        let last = self.encoder.len() - 1;
        let f = self.arch.feature_dim();
        // sparse rows: only argmax points receive gradient
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (c, &g) in dfeat.iter().enumerate() {
            let p = cache.argmax[c];
            if g != 0.0 && cache.pre[last][p * f + c] > 0.0 {
                rows.entry(p).or_insert_with(|| vec![0.0; f])[c] += g;
            }
        }
        for k in (0..=last).rev() {
            let layer = &self.encoder[k];
            let mut next: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (&p, dz) in &rows {
                let x = &cache.inputs[k][p * layer.inp..(p + 1) * layer.inp];
                grads.encoder[k].add_outer(dz, x);
                if k > 0 {
                    let mut dx = vec![0.0; layer.inp];
                    for (o, &d) in dz.iter().enumerate() {
                        if d != 0.0 {
                            for (g, &wv) in dx.iter_mut().zip(&layer.w[o * layer.inp..(o + 1) * layer.inp]) {
                                *g += d * wv;
                            }
                        }
                    }
                    let z = &cache.pre[k - 1][p * layer.inp..(p + 1) * layer.inp];
                    for (g, &zv) in dx.iter_mut().zip(z) {
                        if zv <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    next.insert(p, dx);
                }
            }
            rows = next;
        }
        debug_assert!(rows.is_empty() || n > 0);
    }

    /// Loss and (unscaled) gradients for one labeled cloud.
    pub fn sample_grads(&self, pc: &PointCloud, mode: TrainMode) -> Result<SampleResult, NetError> {
        let (feat, cache) = self.features(pc)?;
        let mut grads = self.zero_grads(mode);
        let (loss, correct, dfeat) = self.head_backward(&feat, pc.label, &mut grads)?;
        if mode == TrainMode::Full {
            self.encoder_backward(&cache, &dfeat, &mut grads);
        }
        Ok(SampleResult { loss, correct, grads })
    }

    /// Head-only loss and gradients from a precomputed feature vector.
    pub fn sample_grads_from_feature(&self, feature: &[f64], label: usize) -> Result<SampleResult, NetError> {
        let mut grads = self.zero_grads(TrainMode::HeadOnly);
        let (loss, correct, _) = self.head_backward(feature, label, &mut grads)?;
        Ok(SampleResult { loss, correct, grads })
    }

    /// Mean loss and mean gradients over `samples`. Per-sample work may run in
    /// parallel; the reduction runs in ascending sample order.
    pub fn batch_grads<F>(&self, n: usize, mode: TrainMode, per_sample: F) -> Result<BatchResult, NetError>
    where
        F: Fn(usize) -> Result<SampleResult, NetError> + Sync,
    {
        if n == 0 {
            return Err(NetError::Batch("empty batch".into()));
        }
        let results: Vec<SampleResult> = (0..n).into_par_iter().map(&per_sample).collect::<Result<_, _>>()?;
        let mut grads = self.zero_grads(mode);
        let mut loss = 0.0;
        let mut correct = 0;
        for r in &results {
            grads.add(&r.grads);
            loss += r.loss;
            correct += usize::from(r.correct);
        }
        let scale = 1.0 / n as f64;
        grads.scale(scale);
        if !loss.is_finite() {
            return Err(NetError::NonFinite("loss".into()));
        }
        Ok(BatchResult {
            loss: loss * scale,
            correct,
            grads,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: NetGrads,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    logits[k] - m - s.ln()
}

/// Global feature of one cloud plus the cache needed for backprop.
pub fn forward_features(params: &Checkpoint, pc: &PointCloud) -> Result<(Vec<f64>, FeatureCache), NetError> {
    Network::from_checkpoint(params)?.features(pc)
}

pub fn forward_head(params: &Checkpoint, feature: &[f64]) -> Result<Vec<f64>, NetError> {
    let net = Network::from_checkpoint(params)?;
    net.logits(feature)
}

/// Mean cross-entropy over `batch` and its gradients. In head-only mode the
/// result carries no backbone entries.
pub fn loss_and_grads(params: &Checkpoint, batch: &[PointCloud], mode: TrainMode) -> Result<(f64, Grads), NetError> {
    let net = Network::from_checkpoint(params)?;
    net.head_layers()?;
    let c = net.arch.n_classes();
    if let Some(pc) = batch.iter().find(|pc| pc.label >= c) {
        return Err(NetError::Batch(format!("label {} >= {c}", pc.label)));
    }
    let r = net.batch_grads(batch.len(), mode, |i| net.sample_grads(&batch[i], mode))?;
    Ok((r.loss, r.grads.into_named()))
}

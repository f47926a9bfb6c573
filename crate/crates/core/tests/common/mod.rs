//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wiselab::net::{self, ArchConfig};
use wiselab::shapes::PointCloud;
use wiselab::tensorstore::{Checkpoint, Role, Tensor};

/// Parameters as plain f64 matrices keyed by entry name.
#[derive(Clone, Debug)]
pub struct NaiveParams {
    pub enc: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    pub head: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

/// Which side of every kink the forward pass landed on.
#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub relu: Vec<bool>,
    pub argmax: Vec<usize>,
}

fn matrix(ckpt: &Checkpoint, name: &str) -> Vec<Vec<f64>> {
    let t = ckpt.get(name).unwrap();
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|r| (0..cols).map(|c| t.data()[r * cols + c] as f64).collect())
        .collect()
}

fn vector(ckpt: &Checkpoint, name: &str) -> Vec<f64> {
    ckpt.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
}

impl NaiveParams {
    pub fn from_checkpoint(ckpt: &Checkpoint, arch: &ArchConfig) -> Self {
        let enc = (0..arch.encoder_widths.len() - 1)
            .map(|k| (matrix(ckpt, &format!("enc.{k}.weight")), vector(ckpt, &format!("enc.{k}.bias"))))
            .collect();
        let head = if ckpt.contains("head.0.weight") {
            (0..arch.head_widths.len() - 1)
                .map(|k| (matrix(ckpt, &format!("head.{k}.weight")), vector(ckpt, &format!("head.{k}.bias"))))
                .collect()
        } else {
            Vec::new()
        };
        Self { enc, head }
    }

    /// Flat view: (entry name, index within entry) → mutable scalar.
    pub fn slot(&mut self, name: &str, idx: usize) -> &mut f64 {
        let parts: Vec<&str> = name.split('.').collect();
        let k: usize = parts[1].parse().unwrap();
        let layer = if parts[0] == "enc" { &mut self.enc[k] } else { &mut self.head[k] };
        if parts[2] == "weight" {
            let cols = layer.0[0].len();
            &mut layer.0[idx / cols][idx % cols]
        } else {
            &mut layer.1[idx]
        }
    }
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi)
        .collect()
}

/// Max-pooled feature of one cloud; ties go to the lowest point index.
pub fn naive_features(p: &NaiveParams, pc: &PointCloud, pattern: &mut Pattern) -> Vec<f64> {
    let mut per_point: Vec<Vec<f64>> = Vec::new();
    for pt in &pc.points {
        let mut h: Vec<f64> = pt.iter().map(|&v| v as f64).collect();
        for (w, b) in &p.enc {
            h = affine(w, b, &h);
            for v in h.iter_mut() {
                pattern.relu.push(*v > 0.0);
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        per_point.push(h);
    }
    let dim = per_point[0].len();
    let mut out = vec![0.0; dim];
    for (j, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        for i in 1..per_point.len() {
            if per_point[i][j] > per_point[best][j] {
                best = i;
            }
        }
        pattern.argmax.push(best);
        *o = per_point[best][j];
    }
    out
}

pub fn naive_logits(p: &NaiveParams, feature: &[f64], pattern: &mut Pattern) -> Vec<f64> {
    let mut h = feature.to_vec();
    let last = p.head.len() - 1;
    for (k, (w, b)) in p.head.iter().enumerate() {
        h = affine(w, b, &h);
        if k < last {
            for v in h.iter_mut() {
                pattern.relu.push(*v > 0.0);
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    h
}

/// Mean cross-entropy over the batch, with the kink pattern it passed through.
pub fn naive_loss(p: &NaiveParams, batch: &[PointCloud]) -> (f64, Pattern) {
    let mut pattern = Pattern { relu: vec![], argmax: vec![] };
    let mut total = 0.0;
    for pc in batch {
        let f = naive_features(p, pc, &mut pattern);
        let z = naive_logits(p, &f, &mut pattern);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[pc.label];
    }
    (total / batch.len() as f64, pattern)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small random architecture for fast oracle comparisons.
pub fn random_arch(r: &mut ChaCha8Rng) -> ArchConfig {
    let n_points = r.random_range(2..=7);
    let depth = r.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..=6)).collect();
    ArchConfig::new(n_points, &hidden, r.random_range(2..=5), r.random_range(2..=4))
}

/// Initialized parameters with every bias randomized so ReLUs sit on both sides.
pub fn random_params(arch: &ArchConfig, r: &mut ChaCha8Rng) -> Checkpoint {
    let mut c = net::init_params(arch, true, r.random()).unwrap();
    let names: Vec<String> = c.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with("bias")).collect();
    for n in names {
        let d = c.data_mut(&n).unwrap();
        for v in d.iter_mut() {
            *v = r.random_range(-0.5f32..0.5);
        }
    }
    c
}

pub fn random_cloud(n_points: usize, n_classes: usize, r: &mut ChaCha8Rng) -> PointCloud {
    PointCloud {
        points: (0..n_points)
            .map(|_| [r.random_range(-1.0f32..1.0), r.random_range(-1.0f32..1.0), r.random_range(-1.0f32..1.0)])
            .collect(),
        label: r.random_range(0..n_classes),
    }
}

/// A checkpoint with arbitrary names, shapes, roles and finite float bit
/// patterns; the first entry is always a backbone entry.
pub fn random_checkpoint(r: &mut ChaCha8Rng, entries: usize) -> Checkpoint {
    let mut meta = BTreeMap::new();
    meta.insert("arch_fingerprint".to_string(), format!("{:016x}", r.random::<u64>()));
    meta.insert("provenance".to_string(), "ft".to_string());
    meta.insert("seed".to_string(), r.random::<u32>().to_string());
    let mut c = Checkpoint::new(meta);
    for i in 0..entries {
        let rank = r.random_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=4)).collect();
        let len: usize = shape.iter().product();
        let data: Vec<f32> = (0..len).map(|_| f32::from_bits(r.random::<u32>() & 0xBFFF_FFFF)).collect();
        let role = if i == 0 || r.random_bool(0.5) { Role::Backbone } else { Role::Head };
        c.insert(&format!("t{i}.{}", r.random::<u16>()), role, Tensor::new(shape, data).unwrap()).unwrap();
    }
    c
}

/// Brute-force reading of the greedy rule on integer hundredths of a
/// percentage point: start at α = 1, lower α in steps of 0.1; stop when
/// accuracy is more than `tol` below the α = 1 accuracy or robustness falls
/// below the last accepted value. Returns (accepted step index, reason).
pub fn greedy_brute_force(acc: &[i64], rob: &[i64], tol: i64) -> (usize, &'static str) {
    let mut accepted = 0;
    for step in 1..acc.len() {
        let dropped_acc = acc[0] - acc[step];
        if dropped_acc > tol {
            return (accepted, "acc_drop");
        }
        if rob[step] < rob[accepted] {
            return (accepted, "robustness_drop");
        }
        accepted = step;
    }
    (accepted, "reached_end")
}

/// Same names, shapes and roles as `like`, fresh finite values.
pub fn sibling(like: &Checkpoint, r: &mut ChaCha8Rng) -> Checkpoint {
    let mut c = like.clone();
    let names: Vec<String> = c.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        for v in c.data_mut(&n).unwrap() {
            *v = f32::from_bits(r.random::<u32>() & 0xBFFF_FFFF);
        }
    }
    c
}

/// Outcome of comparing analytic gradients with central differences on one
/// random (arch, params, batch) draw.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Worst scaled error |a − n| / max(1, |a|, |n|) at h = 1e-3.
    pub worst_scaled: f64,
    /// Worst pure relative error |a − n| / max(|a|, |n|) at h = 1e-3.
    pub worst_relative: f64,
    /// Coordinates where the h = 1e-5 difference disagrees beyond 1e-8 + 1e-6·|a|.
    pub fine_mismatches: usize,
    pub names_ok: bool,
}

impl GradCheck {
    pub fn merge(&mut self, o: GradCheck) {
        self.checked += o.checked;
        self.skipped_kinks += o.skipped_kinks;
        self.worst_scaled = self.worst_scaled.max(o.worst_scaled);
        self.worst_relative = self.worst_relative.max(o.worst_relative);
        self.fine_mismatches += o.fine_mismatches;
        self.names_ok &= o.names_ok;
    }
}

pub const FD_H: f64 = 1e-3;
pub const FD_FINE_H: f64 = 1e-5;

/// Coordinates whose ±h perturbation changes any ReLU side or pooling argmax
/// are skipped: the loss is not differentiable across them.
pub fn grad_check(seed: u64, mode: net::TrainMode) -> GradCheck {
    let mut r = rng(seed);
    let arch = random_arch(&mut r);
    let params = random_params(&arch, &mut r);
    let batch: Vec<_> = (0..r.random_range(1..=4))
        .map(|_| random_cloud(arch.n_points, arch.n_classes(), &mut r))
        .collect();
    let (_, grads) = net::loss_and_grads(&params, &batch, mode).unwrap();

    let trainable: Vec<String> = params
        .iter()
        .filter(|(_, p)| mode == net::TrainMode::Full || p.role == Role::Head)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut got: Vec<&str> = grads.names().collect();
    got.sort_unstable();
    let mut out = GradCheck {
        names_ok: got == trainable.iter().map(String::as_str).collect::<Vec<_>>(),
        ..GradCheck::default()
    };

    let base = NaiveParams::from_checkpoint(&params, &arch);
    let (_, base_pattern) = naive_loss(&base, &batch);
    let diff = |name: &str, idx: usize, h: f64| -> Option<f64> {
        let mut plus = base.clone();
        *plus.slot(name, idx) += h;
        let mut minus = base.clone();
        *minus.slot(name, idx) -= h;
        let (lp, pp) = naive_loss(&plus, &batch);
        let (lm, pm) = naive_loss(&minus, &batch);
        (pp == base_pattern && pm == base_pattern).then(|| (lp - lm) / (2.0 * h))
    };
    for name in &trainable {
        let Some(analytic) = grads.get(name) else { continue };
        for (idx, &a) in analytic.iter().enumerate() {
            let Some(n) = diff(name, idx, FD_H) else {
                out.skipped_kinks += 1;
                continue;
            };
            out.checked += 1;
            let e = (a - n).abs();
            out.worst_scaled = out.worst_scaled.max(e / a.abs().max(n.abs()).max(1.0));
            if e > 0.0 {
                out.worst_relative = out.worst_relative.max(e / a.abs().max(n.abs()));
            }
            if let Some(fine) = diff(name, idx, FD_FINE_H) {
                if (a - fine).abs() >= 1e-8 + 1e-6 * a.abs() {
                    out.fine_mismatches += 1;
                }
            }
        }
    }
    out
}

/// Small clusters around centres 10·e_c on distinct axes, so each class is
/// linearly separable from the union of the others.
pub fn separable(seed: u64) -> wiselab::robust::FeatureMatrix {
    let mut r = rng(seed);
    let classes = r.random_range(2..=5);
    let dim = r.random_range(classes..=8);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..r.random_range(3..=15) {
            features.push((0..dim).map(|j| if j == c { 10.0 } else { 0.0 } + r.random_range(-1.0..1.0)).collect());
            labels.push(c);
        }
    }
    wiselab::robust::FeatureMatrix::new(features, labels).unwrap()
}

/// A random report table on the CSV's own resolution: integer hundredths of a
/// point, clustered so that ties and threshold cases are common.
pub fn grid_table(r: &mut ChaCha8Rng) -> (Vec<i64>, Vec<i64>, i64) {
    let base: i64 = r.random_range(5000..9500);
    let acc: Vec<i64> = (0..11)
        .map(|i| if i == 0 { base } else { base - r.random_range(-15..=25) })
        .collect();
    let mut rob = vec![r.random_range(6000..9000)];
    for _ in 1..11 {
        let prev = *rob.last().unwrap();
        rob.push(prev + r.random_range(-3..=12));
    }
    let tol = [0, 5, 10, 10, 10, 20, 50][r.random_range(0..7)];
    (acc, rob, tol)
}

/// Sweep rows on the default grid from percentage columns.
pub fn rows_from_pct(acc_pct: &[f64], rob_pct: &[f64]) -> Vec<wiselab::wise::SweepRow> {
    wiselab::wise::default_grid()
        .into_iter()
        .zip(acc_pct.iter().zip(rob_pct))
        .map(|(alpha, (&a, &r))| wiselab::wise::SweepRow {
            alpha,
            mode: wiselab::wise::SweepMode::WiseFtLp,
            downstream_acc: a / 100.0,
            robustness: r / 100.0,
            fewshot_mean: None,
            fewshot_std: None,
            checkpoint_fingerprint: String::new(),
        })
        .collect()
}

/// Pair of checkpoints with identical layout and independent values.
pub fn random_pair(seed: u64) -> (Checkpoint, Checkpoint) {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let a = random_checkpoint(&mut r, n);
    let b = sibling(&a, &mut r);
    (a, b)
}

/// Reference blend: α on the 2^-30 lattice (so 1 − α is exact), widen to
/// f64, mix, round once; endpoints are the inputs themselves.
pub fn oracle_blend(p: f32, f: f32, alpha: f64) -> f32 {
    if alpha == 0.0 {
        return p;
    }
    if alpha == 1.0 {
        return f;
    }
    let scale = (1u64 << 30) as f64;
    let a = (alpha * scale).round() / scale;
    ((1.0 - a) * p as f64 + a * f as f64) as f32
}

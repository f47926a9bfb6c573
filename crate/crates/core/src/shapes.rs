//! Synthetic labeled point clouds and the distribution shifts applied to them.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::tensorstore::{decode_f32, split_envelope, write_envelope, StoreError};

pub const DATASET_MAGIC: &[u8; 4] = b"WLPD";

pub const CLASS_NAMES: [&str; 8] = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "pyramid",
    "ellipsoid",
    "two_planes",
];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("invalid shift config: {0}")]
    Shift(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Clean,
    ObjOnly,
    ObjBg,
    Hardest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub kind: ShiftKind,
    #[serde(default = "default_jitter")]
    pub jitter_sigma: f64,
    #[serde(default = "default_bg")]
    pub bg_fraction: f64,
    #[serde(default = "default_translation")]
    pub max_translation: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: [f64; 2],
    /// Defaults to true for every kind except clean.
    #[serde(default)]
    pub rotate: Option<bool>,
}

fn default_jitter() -> f64 {
    0.02
}
fn default_bg() -> f64 {
    0.25
}
fn default_translation() -> f64 {
    0.5
}
fn default_scale_range() -> [f64; 2] {
    [2.0 / 3.0, 1.5]
}

impl ShiftConfig {
    pub fn new(kind: ShiftKind) -> Self {
        Self {
            kind,
            jitter_sigma: default_jitter(),
            bg_fraction: default_bg(),
            max_translation: default_translation(),
            scale_range: default_scale_range(),
            rotate: None,
        }
    }

    pub fn clean() -> Self {
        Self::new(ShiftKind::Clean)
    }

    pub fn rotates(&self) -> bool {
        self.rotate.unwrap_or(self.kind != ShiftKind::Clean)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Shift(m.to_string()));
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.bg_fraction) {
            return bad("bg_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.max_translation) {
            return bad("max_translation must lie in [0, 1]");
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale_range must satisfy 0 < low <= high");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: usize,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for j in 0..3 {
                c[j] += p[j] as f64;
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(&to64(p))).fold(0.0, f64::max)
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bbox(self.points.iter().map(to64))
    }
}

fn to64(p: &[f32; 3]) -> Vec3 {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

fn to32(p: &Vec3) -> [f32; 3] {
    [p[0] as f32, p[1] as f32, p[2] as f32]
}

fn norm(p: &Vec3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn bbox(points: impl Iterator<Item = Vec3>) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for j in 0..3 {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    (lo, hi)
}

fn unit_gaussian(rng: &mut Stream) -> Vec3 {
    loop {
        let v: Vec3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm(&v);
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn in_triangle(rng: &mut Stream, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let r1 = rng.random::<f64>().sqrt();
    let r2 = rng.random::<f64>();
    let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
    [0, 1, 2].map(|j| wa * a[j] + wb * b[j] + wc * c[j])
}

/// Picks an index with probability proportional to `weights`.
fn pick(rng: &mut Stream, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn surface_point(class_id: usize, rng: &mut Stream) -> Vec3 {
    match class_id {
        // sphere (handled in pairs by the caller)
        0 => unit_gaussian(rng),
        // cube [-1,1]^3
        1 => {
            let face = rng.random_range(0..6usize);
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            let (u, v) = (uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
            match axis {
                0 => [sign, u, v],
                1 => [u, sign, v],
                _ => [u, v, sign],
            }
        }
        // cylinder r=0.5, z in [-0.8, 0.8]
        2 => {
            let (r, half) = (0.5, 0.8);
            let lateral = 2.0 * PI * r * 2.0 * half;
            let cap = PI * r * r;
            let theta = uniform(rng, 0.0, 2.0 * PI);
            match pick(rng, &[lateral, cap, cap]) {
                0 => [r * theta.cos(), r * theta.sin(), uniform(rng, -half, half)],
                k => {
                    let rho = r * rng.random::<f64>().sqrt();
                    let z = if k == 1 { half } else { -half };
                    [rho * theta.cos(), rho * theta.sin(), z]
                }
            }
        }
        // cone: base radius 0.6 at z=-0.5, apex at z=0.7
        3 => {
            let (r, base_z, height): (f64, f64, f64) = (0.6, -0.5, 1.2);
            let slant = (r * r + height * height).sqrt();
            let theta = uniform(rng, 0.0, 2.0 * PI);
            if pick(rng, &[PI * r * slant, PI * r * r]) == 0 {
                let t = rng.random::<f64>().sqrt();
                [t * r * theta.cos(), t * r * theta.sin(), base_z + height * (1.0 - t)]
            } else {
                let rho = r * rng.random::<f64>().sqrt();
                [rho * theta.cos(), rho * theta.sin(), base_z]
            }
        }
        // torus R=0.7, r=0.25; rejection on the tube angle for uniform area
        4 => {
            let (big, small) = (0.7, 0.25);
            loop {
                let tube = uniform(rng, 0.0, 2.0 * PI);
                let around = uniform(rng, 0.0, 2.0 * PI);
                let accept = (big + small * tube.cos()) / (big + small);
                if rng.random::<f64>() < accept {
                    let ring = big + small * tube.cos();
                    return [ring * around.cos(), ring * around.sin(), small * tube.sin()];
                }
            }
        }
        // square pyramid: base [-0.6,0.6]^2 at z=-0.4, apex (0,0,0.8)
        5 => {
            let (h, z0, top): (f64, f64, f64) = (0.6, -0.4, 0.8);
            let side_area = 0.5 * (2.0 * h) * (h * h + (top - z0) * (top - z0)).sqrt();
            let base_area = 4.0 * h * h;
            let corners = [[h, h, z0], [-h, h, z0], [-h, -h, z0], [h, -h, z0]];
            let apex = [0.0, 0.0, top];
            match pick(rng, &[base_area, side_area, side_area, side_area, side_area]) {
                0 => [uniform(rng, -h, h), uniform(rng, -h, h), z0],
                k => in_triangle(rng, apex, corners[k - 1], corners[k % 4]),
            }
        }
        // ellipsoid with semi-axes (1.0, 0.6, 0.35); rejection on the area element
        6 => {
            let (a, b, c): (f64, f64, f64) = (1.0, 0.6, 0.35);
            let max_w = (b * c).max(a * c).max(a * b);
            loop {
                let u = unit_gaussian(rng);
                let w = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2))
                    .sqrt();
                if rng.random::<f64>() * max_w < w {
                    return [a * u[0], b * u[1], c * u[2]];
                }
            }
        }
        // two parallel 1.6x1.0 plates at z=+-0.3
        7 => {
            let z = if rng.random::<bool>() { 0.3 } else { -0.3 };
            [uniform(rng, -0.8, 0.8), uniform(rng, -0.5, 0.5), z]
        }
        _ => unreachable!(),
    }
}

/// Centers on the centroid and scales to unit max norm.
fn normalize(points: &mut [Vec3]) {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for j in 0..3 {
            c[j] += p[j];
        }
    }
    let c = c.map(|v| v / n);
    for p in points.iter_mut() {
        for j in 0..3 {
            p[j] -= c[j];
        }
    }
    let r = points.iter().map(norm).fold(0.0, f64::max);
    if r > 0.0 {
        for p in points.iter_mut() {
            *p = p.map(|v| v / r);
        }
    }
}

/// Samples `n_points` uniformly on the surface of shape `class_id`, then normalizes.
/// Sphere points are drawn in antipodal pairs so that the centroid is exactly
/// the origin and every normalized point keeps unit norm.
pub fn generate_shape(class_id: usize, n_points: usize, rng: &mut Stream) -> Result<PointCloud, DataError> {
    if class_id >= CLASS_NAMES.len() {
        return Err(DataError::UnknownClass(class_id));
    }
    let mut pts: Vec<Vec3> = Vec::with_capacity(n_points);
    if class_id == 0 {
        for _ in 0..n_points / 2 {
            let p = surface_point(0, rng);
            pts.push(p);
            pts.push(p.map(|v| -v));
        }
        if n_points % 2 == 1 {
            pts.push(surface_point(0, rng));
        }
    } else {
        for _ in 0..n_points {
            pts.push(surface_point(class_id, rng));
        }
    }
    normalize(&mut pts);
    Ok(PointCloud {
        points: pts.iter().map(to32).collect(),
        label: class_id,
    })
}

/// What `apply_shift` did to a cloud.
#[derive(Debug, Clone, Default)]
pub struct ShiftTrace {
    pub rotation: Option<[[f64; 3]; 3]>,
    pub background: Vec<usize>,
    pub scale: f64,
    pub translation: Vec3,
}

/// Uniform rotation in SO(3) from a uniformly sampled unit quaternion.
pub fn random_rotation(rng: &mut Stream) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y, z, w) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn apply_shift(pc: &PointCloud, cfg: &ShiftConfig, rng: &mut Stream) -> Result<PointCloud, DataError> {
    apply_shift_traced(pc, cfg, rng).map(|(c, _)| c)
}

pub fn apply_shift_traced(
    pc: &PointCloud,
    cfg: &ShiftConfig,
    rng: &mut Stream,
) -> Result<(PointCloud, ShiftTrace), DataError> {
    cfg.validate()?;
    let mut trace = ShiftTrace {
        scale: 1.0,
        ..Default::default()
    };
    if cfg.kind == ShiftKind::Clean {
        return Ok((pc.clone(), trace));
    }
    let mut pts: Vec<Vec3> = pc.points.iter().map(to64).collect();

    if cfg.jitter_sigma > 0.0 {
        for p in pts.iter_mut() {
            for v in p.iter_mut() {
                *v += cfg.jitter_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    if cfg.rotates() {
        let r = random_rotation(rng);
        for p in pts.iter_mut() {
            *p = [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]);
        }
        trace.rotation = Some(r);
    }

    if matches!(cfg.kind, ShiftKind::ObjBg | ShiftKind::Hardest) {
        let k = (cfg.bg_fraction * pts.len() as f64).floor() as usize;
        let (lo, hi) = bbox(pts.iter().copied());
        let mut idx = sample_indices(rng, pts.len(), k).into_vec();
        idx.sort_unstable();
        for &i in &idx {
            pts[i] = [0, 1, 2].map(|j| uniform(rng, lo[j], hi[j]));
        }
        trace.background = idx;
    }

    if cfg.kind == ShiftKind::Hardest {
        let [s_lo, s_hi] = cfg.scale_range;
        let s = uniform(rng, s_lo, s_hi);
        for p in pts.iter_mut() {
            *p = p.map(|v| v * s);
        }
        let (lo, hi) = bbox(pts.iter().copied());
        let mut t = [0.0; 3];
        for j in 0..3 {
            let m = cfg.max_translation * (hi[j] - lo[j]);
            t[j] = uniform(rng, -m, m);
        }
        for p in pts.iter_mut() {
            for j in 0..3 {
                p[j] += t[j];
            }
        }
        trace.scale = s;
        trace.translation = t;
    }

    Ok((
        PointCloud {
            points: pts.iter().map(to32).collect(),
            label: pc.label,
        },
        trace,
    ))
}

/// Generation recipe; together with `seed` it determines every byte of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<usize>,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub n_points: usize,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(DataError::Config("no classes".into()));
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= CLASS_NAMES.len()) {
            return Err(DataError::UnknownClass(c));
        }
        let mut seen = self.classes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(DataError::Config("repeated class id".into()));
        }
        if self.per_class_train == 0 || self.per_class_test == 0 || self.n_points == 0 {
            return Err(DataError::Config("counts must be >= 1".into()));
        }
        if self.classes.len() > u16::MAX as usize {
            return Err(DataError::Config("too many classes".into()));
        }
        self.shift.validate()
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset config serializes");
        rng::sha256_hex(&json)[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub fingerprint: String,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[PointCloud] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn shift(&self) -> &ShiftConfig {
        &self.config.shift
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "config": self.config,
            "splits": [
                {"name": "train", "count": self.train.len()},
                {"name": "test", "count": self.test.len()},
            ],
        });
        let header = serde_json::to_vec(&header).expect("header serializes");
        let clouds = self.train.iter().chain(&self.test);
        let n_total = self.train.len() + self.test.len();
        let mut out = Vec::with_capacity(16 + header.len() + n_total * (12 * self.config.n_points + 2));
        write_envelope(&mut out, DATASET_MAGIC, &header);
        for pc in clouds.clone() {
            for p in &pc.points {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for pc in clouds {
            out.extend_from_slice(&(pc.label as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        #[derive(Deserialize)]
        struct SplitHeader {
            name: String,
            count: usize,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            config: DatasetConfig,
            splits: Vec<SplitHeader>,
        }
        let (header, payload) = split_envelope(bytes, DATASET_MAGIC)?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| StoreError::Header(e.to_string()))?;
        header.config.validate()?;
        let count = |name: &str| {
            header
                .splits
                .iter()
                .find(|s| s.name == name)
                .map(|s| s.count)
                .ok_or_else(|| StoreError::Header(format!("missing split {name:?}")))
        };
        let (n_train, n_test) = (count("train")?, count("test")?);
        let n = header.config.n_points;
        let total = n_train + n_test;
        let expected = total * (12 * n + 2);
        if payload.len() < expected {
            return Err(StoreError::Truncated {
                expected: (bytes.len() - payload.len() + expected) as u64,
                actual: bytes.len() as u64,
            }
            .into());
        }
        if payload.len() > expected {
            return Err(StoreError::SizeMismatch(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            ))
            .into());
        }
        let floats = decode_f32(&payload[..total * 12 * n]);
        let labels = &payload[total * 12 * n..];
        let n_classes = header.config.classes.len();
        let mut clouds = Vec::with_capacity(total);
        for i in 0..total {
            let label = u16::from_le_bytes([labels[2 * i], labels[2 * i + 1]]) as usize;
            if label >= n_classes {
                return Err(DataError::Config(format!("label {label} out of range")));
            }
            let points = floats[i * 3 * n..(i + 1) * 3 * n]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            clouds.push(PointCloud { points, label });
        }
        let test = clouds.split_off(n_train);
        Ok(Self {
            class_names: class_names(&header.config.classes),
            fingerprint: header.config.fingerprint(),
            config: header.config,
            train: clouds,
            test,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, self.to_bytes()).map_err(StoreError::from)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(StoreError::from)?;
        Self::from_bytes(&bytes)
    }
}

fn class_names(classes: &[usize]) -> Vec<String> {
    classes.iter().map(|&c| CLASS_NAMES[c].to_string()).collect()
}

fn generate_split(cfg: &DatasetConfig, split: Split, per_class: usize) -> Result<Vec<PointCloud>, DataError> {
    let total = per_class * cfg.classes.len();
    (0..total)
        .into_par_iter()
        .map(|i| {
            let label = i / per_class;
            let mut rng = rng::substream(cfg.seed, &["dataset", split.name(), &i.to_string()]);
            let mut pc = generate_shape(cfg.classes[label], cfg.n_points, &mut rng)?;
            pc.label = label;
            apply_shift(&pc, &cfg.shift, &mut rng)
        })
        .collect()
}

/// Builds train and test splits; labels index into `classes`. Cloud `i` of a
/// split draws from its own substream keyed by `(seed, split, i)`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    Ok(Dataset {
        train: generate_split(cfg, Split::Train, cfg.per_class_train)?,
        test: generate_split(cfg, Split::Test, cfg.per_class_test)?,
        class_names: class_names(&cfg.classes),
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
    })
}

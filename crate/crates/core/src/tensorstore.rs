//! Named-tensor checkpoints and the WLPC container format.
//!
//! Layout of a `.wlpc` file:
//!
//! ```text
//! 0..4     magic "WLPC"
//! 4..8     version, u32 LE (= 1)
//! 8..16    header length H, u64 LE
//! 16..16+H UTF-8 JSON header {"metadata": {..}, "entries": [{name, shape, role, offset}, ..]}
//! rest     payload: f32 LE tensors concatenated in canonical (bytewise) name order
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::sha256_hex;

pub const MAGIC: &[u8; 4] = b"WLPC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

pub const PROVENANCES: [&str; 5] = ["pt", "ft", "wise", "rft", "scratch"];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: Vec<u8> },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: need {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("header/payload size mismatch: {0}")]
    SizeMismatch(String),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid checkpoint: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Backbone,
    Head,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Backbone => "backbone",
            Role::Head => "head",
        })
    }
}

/// Row-major f32 tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, StoreError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(StoreError::Invariant(format!("bad shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(StoreError::Invariant(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality, so that -0.0 != 0.0 and NaN payloads are compared exactly.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub role: Role,
    pub tensor: Tensor,
}

/// Which entries an operation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Backbone,
    All,
}

impl Scope {
    fn admits(self, role: Role) -> bool {
        match self {
            Scope::Backbone => role == Role::Backbone,
            Scope::All => true,
        }
    }
}

/// Named tensors with role tags and string metadata. Iteration is in bytewise
/// name order, which is also the on-disk and reduction order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Param>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(metadata: BTreeMap<String, String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert(&mut self, name: &str, role: Role, tensor: Tensor) -> Result<(), StoreError> {
        if name.is_empty() {
            return Err(StoreError::Invariant("empty entry name".into()));
        }
        if self.entries.contains_key(name) {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        self.entries.insert(name.to_string(), Param { role, tensor });
        Ok(())
    }

    /// Replaces the tensor of an existing entry, keeping its role. Shape must match.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<(), StoreError> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| StoreError::Invariant(format!("no entry {name:?}")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(StoreError::Invariant(format!(
                "{name}: shape {:?} != {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    /// Mutable access to a tensor's values; shape and role stay fixed.
    pub fn data_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.entries.get_mut(name).map(|p| p.tensor.data_mut())
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.entries.get(name).map(|p| p.role)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self, scope: Scope) -> Vec<&str> {
        self.iter()
            .filter(|(_, p)| scope.admits(p.role))
            .map(|(n, _)| n)
            .collect()
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.entries.values().any(|p| p.role == role)
    }

    /// Drops every entry carrying `role`.
    pub fn strip_role(&mut self, role: Role) {
        self.entries.retain(|_, p| p.role != role);
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn remove_meta(&mut self, key: &str) {
        self.metadata.remove(key);
    }

    pub fn provenance(&self) -> Option<&str> {
        self.meta("provenance")
    }

    /// Bitwise equality of entries (name, role, shape, payload) and metadata.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata && self.entries_bit_eq(other, Scope::All)
    }

    pub fn entries_bit_eq(&self, other: &Checkpoint, scope: Scope) -> bool {
        let a: Vec<_> = self.iter().filter(|(_, p)| scope.admits(p.role)).collect();
        let b: Vec<_> = other.iter().filter(|(_, p)| scope.admits(p.role)).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, pa), (nb, pb))| {
                na == nb && pa.role == pb.role && pa.tensor.bit_eq(&pb.tensor)
            })
    }

    /// Short content hash over the entries in `scope` (names, roles, shapes,
    /// payload bits). Metadata is not included.
    pub fn fingerprint(&self, scope: Scope) -> String {
        let mut buf = Vec::new();
        for (name, p) in self.iter().filter(|(_, p)| scope.admits(p.role)) {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(p.role as u8);
            buf.extend_from_slice(&(p.tensor.shape().len() as u64).to_le_bytes());
            for &d in p.tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&buf)[..16].to_string()
    }

    /// Checks the metadata contract and role rules.
    pub fn validate(&self) -> Result<(), StoreError> {
        for key in ["arch_fingerprint", "provenance", "seed"] {
            if !self.metadata.contains_key(key) {
                return Err(StoreError::Invariant(format!("metadata missing {key:?}")));
            }
        }
        let prov = self.meta("provenance").unwrap_or_default();
        if !PROVENANCES.contains(&prov) {
            return Err(StoreError::Invariant(format!("unknown provenance {prov:?}")));
        }
        if prov == "wise" {
            let alpha = self
                .meta("alpha")
                .ok_or_else(|| StoreError::Invariant("wise checkpoint without alpha".into()))?;
            match alpha.parse::<f64>() {
                Ok(a) if (0.0..=1.0).contains(&a) => {}
                _ => return Err(StoreError::Invariant(format!("bad alpha {alpha:?}"))),
            }
        }
        if prov == "pt" && self.has_role(Role::Head) {
            return Err(StoreError::Invariant("pt checkpoint carries head entries".into()));
        }
        if self.entries.keys().any(String::is_empty) {
            return Err(StoreError::Invariant("empty entry name".into()));
        }
        Ok(())
    }

    /// Canonical WLPC encoding; a pure function of the value.
    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        self.validate()?;
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            entries.push(HeaderEntry {
                name: name.clone(),
                shape: p.tensor.shape().to_vec(),
                role: p.role,
                offset,
            });
            offset += 4 * p.tensor.len() as u64;
        }
        let header = Header {
            metadata: self.metadata.clone(),
            entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| StoreError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.entries.values() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let (header, payload) = split_envelope(bytes, MAGIC)?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| StoreError::Header(e.to_string()))?;

        let mut ckpt = Checkpoint::new(header.metadata);
        let mut expected_offset = 0u64;
        let mut prev: Option<&str> = None;
        for e in &header.entries {
            if let Some(p) = prev {
                if p == e.name {
                    return Err(StoreError::DuplicateName(e.name.clone()));
                }
                if p > e.name.as_str() {
                    // a later duplicate would be out of order too
                    if header.entries.iter().filter(|x| x.name == e.name).count() > 1 {
                        return Err(StoreError::DuplicateName(e.name.clone()));
                    }
                    return Err(StoreError::Header(format!(
                        "entries not in canonical order at {:?}",
                        e.name
                    )));
                }
            }
            prev = Some(&e.name);
            if e.offset != expected_offset {
                return Err(StoreError::SizeMismatch(format!(
                    "entry {:?} offset {} but expected {}",
                    e.name, e.offset, expected_offset
                )));
            }
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(StoreError::Invariant(format!("{}: bad shape {:?}", e.name, e.shape)));
            }
            let n: usize = e.shape.iter().product();
            expected_offset += 4 * n as u64;
        }
        if (payload.len() as u64) < expected_offset {
            return Err(StoreError::Truncated {
                expected: (PREAMBLE + header_len(bytes)) as u64 + expected_offset,
                actual: bytes.len() as u64,
            });
        }
        if payload.len() as u64 > expected_offset {
            return Err(StoreError::SizeMismatch(format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                expected_offset
            )));
        }
        for e in header.entries {
            let start = e.offset as usize;
            let n: usize = e.shape.iter().product();
            let data = decode_f32(&payload[start..start + 4 * n]);
            ckpt.insert(&e.name, e.role, Tensor::new(e.shape, data)?)?;
        }
        ckpt.validate()?;
        Ok(ckpt)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: BTreeMap<String, String>,
    entries: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    role: Role,
    offset: u64,
}

fn header_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

/// Checks magic/version/length and splits a WLP* file into (header, payload).
pub(crate) fn split_envelope<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
) -> Result<(&'a [u8], &'a [u8]), StoreError> {
    if bytes.len() >= 4 && &bytes[..4] != magic {
        return Err(StoreError::BadMagic {
            found: bytes[..4].to_vec(),
            expected: magic.to_vec(),
        });
    }
    if bytes.len() < PREAMBLE {
        return Err(StoreError::Truncated {
            expected: PREAMBLE as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = (PREAMBLE as u64).checked_add(h).filter(|&e| e <= bytes.len() as u64);
    let end = end.ok_or(StoreError::Truncated {
        expected: (PREAMBLE as u64).saturating_add(h),
        actual: bytes.len() as u64,
    })? as usize;
    Ok((&bytes[PREAMBLE..end], &bytes[end..]))
}

/// Writes magic, version, header length and header.
pub(crate) fn write_envelope(out: &mut Vec<u8>, magic: &[u8; 4], header: &[u8]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, StoreError> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

/// One reason two checkpoints cannot be combined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    MissingLeft(String),
    MissingRight(String),
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    RoleMismatch {
        name: String,
        left: Role,
        right: Role,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::MissingLeft(n) => write!(f, "{n}: missing on left"),
            Diagnostic::MissingRight(n) => write!(f, "{n}: missing on right"),
            Diagnostic::ShapeMismatch { name, left, right } => {
                write!(f, "{name}: shape {left:?} vs {right:?}")
            }
            Diagnostic::RoleMismatch { name, left, right } => {
                write!(f, "{name}: role {left} vs {right}")
            }
        }
    }
}

/// Lists every mismatch between `a` and `b` restricted to `scope`. Empty means compatible.
pub fn validate_compatibility(a: &Checkpoint, b: &Checkpoint, scope: Scope) -> Vec<Diagnostic> {
    let mut names: Vec<&str> = a.names(scope);
    names.extend(b.names(scope));
    names.sort_unstable();
    names.dedup();

    let mut out = Vec::new();
    for name in names {
        match (a.entries.get(name), b.entries.get(name)) {
            (Some(pa), Some(pb)) => {
                if pa.role != pb.role {
                    out.push(Diagnostic::RoleMismatch {
                        name: name.to_string(),
                        left: pa.role,
                        right: pb.role,
                    });
                }
                if pa.tensor.shape() != pb.tensor.shape() {
                    out.push(Diagnostic::ShapeMismatch {
                        name: name.to_string(),
                        left: pa.tensor.shape().to_vec(),
                        right: pb.tensor.shape().to_vec(),
                    });
                }
            }
            (None, Some(_)) => out.push(Diagnostic::MissingLeft(name.to_string())),
            (Some(_), None) => out.push(Diagnostic::MissingRight(name.to_string())),
            (None, None) => unreachable!(),
        }
    }
    out
}

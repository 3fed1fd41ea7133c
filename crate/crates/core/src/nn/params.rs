//! Named parameter storage and gradient accumulators.
//!
//! Every trainable component owns one `ParamStore`. Parameters are created
//! in a deterministic order from a seeded RNG, addressed by hierarchical
//! names (`encoder.block0.attn.wq`), and checksummed as raw bytes for the
//! freeze contract.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Arr = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name `{name}`");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Parameter names in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    /// SHA-256 over every parameter's name, shape and raw little-endian
    /// bytes, in sorted-name order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, &i) in &self.index {
            hasher.update(name.as_bytes());
            for d in self.values[i].shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in self.values[i].iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Checksums per top-level name prefix (text up to the first dot).
    pub fn group_checksums(&self) -> BTreeMap<String, String> {
        let mut groups: BTreeMap<String, Sha256> = BTreeMap::new();
        for (name, &i) in &self.index {
            let group = name.split('.').next().unwrap_or(name).to_string();
            let h = groups.entry(group).or_default();
            h.update(name.as_bytes());
            for x in self.values[i].iter() {
                h.update(x.to_le_bytes());
            }
        }
        groups.into_iter().map(|(g, h)| (g, hex(&h.finalize()))).collect()
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut gs: Vec<String> = self
            .names
            .iter()
            .map(|n| n.split('.').next().unwrap_or(n).to_string())
            .collect();
        gs.sort();
        gs.dedup();
        gs
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Per-parameter gradient accumulator aligned with a `ParamStore`.
pub struct GradStore {
    grads: Vec<Option<Arr>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        GradStore { grads: (0..store.len()).map(|_| None).collect() }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Arr) {
        match &mut self.grads[id.0] {
            Some(g) => *g += grad,
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.grads[id.0].as_ref()
    }

    /// Add another accumulator into this one (used to reduce per-sample
    /// gradients in a fixed order).
    pub fn merge(&mut self, other: &GradStore) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= s;
        }
    }
}

/// Checks that every listed component kept its checksum. Returns the names
/// of components whose bytes changed; an empty result means the freeze
/// held.
pub fn verify_frozen(
    before: &BTreeMap<String, String>,
    after: &BTreeMap<String, String>,
    frozen: &[String],
) -> Result<Vec<String>> {
    let mut violations = Vec::new();
    for name in frozen {
        let b = before
            .get(name)
            .ok_or_else(|| Error::FrozenContractViolation(format!("no checksum recorded for `{name}`")))?;
        match after.get(name) {
            Some(a) if a == b => {}
            _ => violations.push(name.clone()),
        }
    }
    Ok(violations)
}

// ---- initializers -------------------------------------------------------

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    ArrayD::ones(IxDyn(shape))
}

pub fn full(shape: &[usize], v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(shape), v)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product consistent")
}

/// Xavier/Glorot uniform for a [fan_in, fan_out] matrix (or any tensor
/// whose first/last axes play those roles).
pub fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, -limit, limit)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let n: usize = shape.iter().product();
    // Box-Muller keeps us independent of distribution crates.
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product consistent")
}

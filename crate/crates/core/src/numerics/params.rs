//! Named dense parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Ordered name -> tensor map. Iteration order is the name order, which keeps
/// every reduction over parameters deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Internal(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }

    /// Largest absolute elementwise difference across all parameters.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        let mut m = S::zero();
        for (name, t) in &self.params {
            let o = other.params.get(name).expect("store shapes match");
            let d = t.max_abs_diff(o);
            if d > m {
                m = d;
            }
        }
        m
    }

    /// Bit-level equality (distinguishes -0.0 from 0.0, compares NaN bits).
    pub fn bits_eq(&self, other: &Self) -> bool {
        if self.params.len() != other.params.len() {
            return false;
        }
        for (name, t) in &self.params {
            match other.params.get(name) {
                Some(o) if o.shape() == t.shape() => {
                    let same = t
                        .data()
                        .iter()
                        .zip(o.data())
                        .all(|(a, b)| a.to_le_bytes_vec() == b.to_le_bytes_vec());
                    if !same {
                        return false;
                    }
                }
                _ => return false,
            }
        }
        true
    }

    pub fn shapes_match(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(name, t)| {
                other
                    .params
                    .get(name)
                    .map(|o| o.shape() == t.shape())
                    .unwrap_or(false)
            })
    }

    pub fn to_f64_store(&self) -> ParamStore<f64> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
        }
    }

    pub fn to_f32_store(&self) -> ParamStore<f32> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f32()))
                .collect(),
        }
    }

    /// Register every parameter on a tape; trainable parameters become leaves,
    /// frozen ones constants.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Gradient store extraction: zero tensors for parameters the loss does
    /// not reach.
    pub fn extract_grads(
        &self,
        grads: &crate::numerics::tape::Gradients<S>,
        vars: &BTreeMap<String, Var>,
    ) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (name, t) in &self.params {
            let var = vars[name];
            let g = grads.grad_or_zeros(var, t.rows(), t.cols());
            out.params.insert(name.clone(), g);
        }
        out
    }

    /// In-place accumulate: self += other * c.
    pub fn add_scaled(&mut self, other: &Self, c: S) {
        for (name, t) in self.params.iter_mut() {
            let o = other.params.get(name).expect("store shapes match");
            t.add_scaled(o, c);
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    /// Global L2 norm over every element of every tensor.
    pub fn global_norm(&self) -> S {
        let mut acc = S::zero();
        for t in self.params.values() {
            for &x in t.data() {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn scale_all(&mut self, c: S) {
        for t in self.params.values_mut() {
            for x in t.data_mut() {
                *x = *x * c;
            }
        }
    }
}

/// Exponential-moving-average update: target <- tau*target + (1-tau)*online,
/// elementwise over every parameter. The online store is untouched. The
/// combination is evaluated in f64 and rounded once into the store dtype.
pub fn ema_update_store<S: Real>(
    target: &mut ParamStore<S>,
    online: &ParamStore<S>,
    tau: f64,
) -> Result<()> {
    if !target.shapes_match(online) {
        return Err(Error::Internal(
            "ema update: online/target parameter shapes differ".into(),
        ));
    }
    let one_minus = 1.0 - tau;
    for (name, t) in target.params.iter_mut() {
        let o = &online.params[name];
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = S::from_f64(tau * tv.as_f64() + one_minus * ov.as_f64());
        }
    }
    Ok(())
}

/// Seeded Xavier-uniform initializer; `(rows, cols)` reads as
/// (fan_out, fan_in) for weight matrices.
pub fn xavier_uniform<S: Real>(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data_mut() {
        *x = S::from_f64(rng.gen_range(-a..a));
    }
    t
}

/// Small-uniform init for positional tables and biases that should start
/// near zero but not identically zero.
pub fn small_uniform<S: Real>(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha20Rng) -> Tensor<S> {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data_mut() {
        *x = S::from_f64(rng.gen_range(-scale..scale));
    }
    t
}

/// Deterministic sub-seed derivation: hashes a base seed with a label path so
/// independent components draw from uncorrelated streams.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update([0u8]);
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn seeded_rng(base: u64, labels: &[&str]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, labels))
}

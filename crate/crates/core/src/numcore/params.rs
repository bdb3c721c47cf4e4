use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Inserts `t` under `name`, returning the previous tensor if any.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.to_string(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Like [`ParamSet::get`] but a missing name is a contract error.
    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `p ← p − lr·g` for every gradient present; parameters without a gradient
/// are left untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for t in grads.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Central finite differences `(f(p+h) − f(p−h)) / 2h`, one coordinate at a
/// time.
pub fn fd_gradient<F>(f: F, params: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut work = params.clone();
    let mut out = ParamSet::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.expect(&name)?.len();
        let mut g = Tensor::zeros(params.expect(&name)?.shape());
        for i in 0..n {
            let orig = params.expect(&name)?.data()[i];
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(&name, g);
    }
    Ok(out)
}

/// Largest relative error between two gradient sets, using
/// `|a − b| / max(|a|, |b|, floor)` per coordinate.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ta) in a.iter() {
        let Some(tb) = b.get(name) else {
            return f64::INFINITY;
        };
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

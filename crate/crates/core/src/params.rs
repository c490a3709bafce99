//! Named parameter collections and the Adam optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, NodeId, ParamGroup, ParamKey, Tape, Tensor};
use crate::error::{Error, Result};

/// Ordered, named tensors. Values are shared with tapes via `Arc`, so a
/// forward pass never copies weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = Arc::new(value);
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| self.values[i].as_ref())
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers entry `i` as a tape leaf.
    pub fn leaf(&self, tape: &mut Tape, group: ParamGroup, i: usize) -> NodeId {
        tape.param(ParamKey { group, index: i }, &self.values[i])
    }

    /// Content hash over names, shapes and exact bit patterns, in name order.
    pub fn fingerprint(&self) -> String {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        let mut h = Sha256::new();
        for i in order {
            h.update(self.names[i].as_bytes());
            h.update([0u8]);
            for d in self.values[i].shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in self.values[i].iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn from_tensors<I: IntoIterator<Item = (String, Tensor)>>(items: I) -> Self {
        let mut s = Self::new();
        for (n, t) in items {
            s.insert(n, t);
        }
        s
    }
}

/// Xavier-style uniform init used for freshly created dense layers.
pub fn init_dense(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, std: f64) -> Tensor {
    // uniform on [-a, a] has std a/sqrt(3)
    let a = std * 3f64.sqrt();
    ArrayD::from_shape_fn(vec![out_dim, in_dim], |_| rng.random_range(-a..=a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter group so they
/// can be checkpointed alongside the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: [Vec<Option<Tensor>>; 3],
    second: [Vec<Option<Tensor>>; 3],
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Default::default(),
            second: Default::default(),
        }
    }

    /// Applies one update to every store whose group received gradients.
    pub fn update(&mut self, stores: &mut [(ParamGroup, &mut ParamStore)], grads: &Gradients) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (group, store) in stores.iter_mut() {
            let slot = group.slot();
            let gs = grads.group(*group);
            if self.first[slot].len() < store.len() {
                self.first[slot].resize(store.len(), None);
                self.second[slot].resize(store.len(), None);
            }
            for (i, g) in gs.iter().enumerate() {
                let Some(g) = g else { continue };
                if i >= store.len() {
                    return Err(Error::Training(format!(
                        "gradient for unknown parameter {i} in {group:?}"
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(i))));
                }
                let m = self.first[slot][i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                let v = self.second[slot][i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
                let (m, v) = (
                    self.first[slot][i].as_ref().unwrap(),
                    self.second[slot][i].as_ref().unwrap(),
                );
                let w = store.value_mut(i);
                ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
                });
            }
        }
        Ok(())
    }

    /// Drops moments for a group (used when a head is replaced).
    pub fn reset_group(&mut self, group: ParamGroup) {
        self.first[group.slot()].clear();
        self.second[group.slot()].clear();
    }

    /// Moments as safetensors (`m/<slot>/<index>`, `v/<slot>/<index>`) with
    /// the step counter and config in the metadata.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named = Vec::new();
        for slot in 0..3 {
            for (i, (m, v)) in self.first[slot].iter().zip(&self.second[slot]).enumerate() {
                if let (Some(m), Some(v)) = (m, v) {
                    named.push((format!("m/{slot}/{i}"), m));
                    named.push((format!("v/{slot}/{i}"), v));
                }
            }
        }
        let mut meta = crate::safetensors::Metadata::new();
        meta.insert("format".into(), "emostress-adam".into());
        meta.insert("step".into(), self.step.to_string());
        meta.insert(
            "config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        crate::safetensors::serialize(named.iter().map(|(n, t)| (n.as_str(), *t)), &meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let l = crate::safetensors::parse(bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("optimizer state: {m}"));
        if l.metadata.get("format").map(String::as_str) != Some("emostress-adam") {
            return Err(bad("wrong format"));
        }
        let config: AdamConfig = serde_json::from_str(
            l.metadata.get("config").ok_or_else(|| bad("no config"))?,
        )?;
        let step = l
            .metadata
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("no step"))?;
        let mut adam = Adam::new(config);
        adam.step = step;
        for (name, t) in l.tensors {
            let parts: Vec<&str> = name.split('/').collect();
            let [kind, slot, i] = parts.as_slice() else {
                return Err(bad(&format!("unexpected tensor {name}")));
            };
            let slot: usize = slot.parse().map_err(|_| bad(&name))?;
            let i: usize = i.parse().map_err(|_| bad(&name))?;
            if slot > 2 {
                return Err(bad(&name));
            }
            let target = match *kind {
                "m" => &mut adam.first[slot],
                "v" => &mut adam.second[slot],
                _ => return Err(bad(&name)),
            };
            if target.len() <= i {
                target.resize(i + 1, None);
            }
            target[i] = Some(t);
        }
        let n = adam.first.iter().zip(&adam.second).all(|(a, b)| a.len() == b.len());
        if !n {
            return Err(bad("first and second moments disagree"));
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fingerprint_tracks_every_bit() {
        let mut s = ParamStore::new();
        s.insert("a", array![1.0, 2.0].into_dyn());
        s.insert("b", array![[3.0]].into_dyn());
        let f0 = s.fingerprint();
        assert_eq!(f0, s.clone().fingerprint());
        let i = s.index_of("a").unwrap();
        s.value_mut(i)[[0]] = f64::from_bits(1.0f64.to_bits() + 1);
        assert_ne!(s.fingerprint(), f0);
    }

    #[test]
    fn fingerprint_is_insertion_order_independent() {
        let a = ParamStore::from_tensors([
            ("x".to_string(), array![1.0].into_dyn()),
            ("y".to_string(), array![2.0].into_dyn()),
        ]);
        let b = ParamStore::from_tensors([
            ("y".to_string(), array![2.0].into_dyn()),
            ("x".to_string(), array![1.0].into_dyn()),
        ]);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * g / |g| up to eps
        let mut s = ParamStore::new();
        s.insert("w", array![[1.0, -1.0]].into_dyn());
        let mut tape = Tape::new();
        let w = s.leaf(&mut tape, ParamGroup::StressHead, 0);
        let loss = tape.sigmoid_bce(w, array![[1.0, 1.0]]).unwrap();
        let grads = tape.backward(loss).unwrap();
        drop(tape);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        adam.update(&mut [(ParamGroup::StressHead, &mut s)], &grads).unwrap();
        let w = s.get("w").unwrap();
        assert!((w[[0, 0]] - 1.01).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.99).abs() < 1e-6);
        assert_eq!(adam.step, 1);
        let back = Adam::from_bytes(&adam.to_bytes()).unwrap();
        assert_eq!(back, adam);
    }
}

//! Named parameter tensors partitioned into component groups.
//!
//! The store is the single owner of a model's weights. Stage schedules
//! freeze and unfreeze whole groups; the optimizer replaces tensors through
//! [`ParameterStore::set_data`] so tensor values stay immutable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Precision;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Vision,
    Connector,
    Language,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Vision,
        ParamGroup::Connector,
        ParamGroup::Language,
    ];

    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Vision => 0,
            ParamGroup::Connector => 1,
            ParamGroup::Language => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ParamGroup::Vision),
            1 => Ok(ParamGroup::Connector),
            2 => Ok(ParamGroup::Language),
            t => Err(Error::Format(format!("unknown parameter group tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Vision => "vision",
            ParamGroup::Connector => "connector",
            ParamGroup::Language => "language",
        }
    }
}

#[derive(Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    precision: Precision,
}

impl ParameterStore {
    pub fn new(precision: Precision) -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>, mut data: Vec<f64>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        let tensor = Tensor::leaf(shape, data)?;
        self.params.insert(name.to_string(), Parameter { tensor, group });
        Ok(())
    }

    /// Handle to a parameter tensor (cheap clone of the shared buffer).
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .map(|p| p.tensor.clone())
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn group_of(&self, name: &str) -> Result<ParamGroup> {
        self.params
            .get(name)
            .map(|p| p.group)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Replace a parameter's value, preserving its trainability flag.
    pub fn set_data(&mut self, name: &str, mut data: Vec<f64>) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if data.len() != param.tensor.len() {
            return Err(Error::Dimension(format!(
                "set_data {name}: {} scalars vs {}",
                data.len(),
                param.tensor.len()
            )));
        }
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        let trainable = param.tensor.requires_grad();
        let next = Tensor::new(param.tensor.shape().to_vec(), data)?;
        next.set_requires_grad(trainable);
        param.tensor = next;
        Ok(())
    }

    /// Mark exactly the given groups trainable; everything else is frozen
    /// and loses any gradient buffer it held.
    pub fn set_trainable_groups(&self, groups: &[ParamGroup]) {
        for p in self.params.values() {
            p.tensor.set_requires_grad(groups.contains(&p.group));
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.tensor.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.tensor.zero_grad();
        }
    }

    /// Give every trainable parameter a gradient buffer, filling zeros for
    /// parameters the last backward pass never reached (e.g. vision weights
    /// on a text-only batch).
    pub fn ensure_trainable_grads(&self) {
        for p in self.params.values() {
            if p.tensor.requires_grad() && !p.tensor.has_grad() {
                // leaves untouched by the tape still count as zero-gradient
                p.tensor.ensure_grad();
            }
        }
    }

    /// Gradients of trainable parameters only. Frozen parameters never
    /// appear; calling before a backward pass is a state error.
    pub fn trainable_grads(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            if !p.tensor.requires_grad() {
                continue;
            }
            match p.tensor.grad() {
                Some(g) => {
                    out.insert(name.clone(), g);
                }
                None => {
                    return Err(Error::State(format!(
                        "trainable parameter {name} has no gradient; run backward first"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn names_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Bitwise snapshot of every tensor in a group.
    pub fn snapshot_groups(&self, groups: &[ParamGroup]) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(n, p)| (n.clone(), p.tensor.data().to_vec()))
            .collect()
    }

    /// Deep copy of the store (fresh leaves, same values and groups).
    pub fn deep_clone(&self) -> ParameterStore {
        let mut out = ParameterStore::new(self.precision);
        for (name, p) in &self.params {
            out.insert(name, p.group, p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                .expect("clone of valid store");
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stable per-label RNG so initialization is independent of insertion order.
pub fn label_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(label.as_bytes())))
}

/// Scaled-uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn seeded_uniform(seed: u64, label: &str, n: usize, fan_in: usize) -> Vec<f64> {
    let mut rng = label_rng(seed, label);
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| -a + 2.0 * a * rng.gen::<f64>()).collect()
}

/// Mix a seed with a domain tag and index into a fresh stream seed.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain.wrapping_mul(0x9e3779b97f4a7c15)) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_three() -> ParameterStore {
        let mut s = ParameterStore::new(Precision::F64);
        s.insert("vision.w", ParamGroup::Vision, vec![2], vec![1.0, 2.0]).unwrap();
        s.insert("connector.w", ParamGroup::Connector, vec![2], vec![3.0, 4.0]).unwrap();
        s.insert("language.w", ParamGroup::Language, vec![2], vec![5.0, 6.0]).unwrap();
        s
    }

    #[test]
    fn trainable_groups_select_exactly() {
        let s = store_with_three();
        s.set_trainable_groups(&[ParamGroup::Connector]);
        assert_eq!(s.trainable_names(), vec!["connector.w".to_string()]);
        s.set_trainable_groups(&[ParamGroup::Vision, ParamGroup::Connector]);
        assert_eq!(s.trainable_names().len(), 2);
    }

    #[test]
    fn frozen_params_lose_grad_buffers() {
        let s = store_with_three();
        s.set_trainable_groups(&ParamGroup::ALL);
        s.ensure_trainable_grads();
        assert!(s.get("language.w").unwrap().has_grad());
        s.set_trainable_groups(&[ParamGroup::Connector]);
        assert!(!s.get("language.w").unwrap().has_grad());
    }

    #[test]
    fn trainable_grads_before_backward_is_state_error() {
        let s = store_with_three();
        s.set_trainable_groups(&[ParamGroup::Connector]);
        assert!(matches!(s.trainable_grads(), Err(Error::State(_))));
        s.ensure_trainable_grads();
        let g = s.trainable_grads().unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["connector.w"], vec![0.0, 0.0]);
    }

    #[test]
    fn seeded_init_is_reproducible_and_seed_sensitive() {
        let a = seeded_uniform(7, "w1", 64, 16);
        let b = seeded_uniform(7, "w1", 64, 16);
        let c = seeded_uniform(8, "w1", 64, 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

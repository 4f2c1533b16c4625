use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, NormMode, Tensor, WeightRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics; saved with the weights but never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Normal { std: f64 },
    Const(f64),
}

/// Named parameters and buffers of a network, in lexicographic name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across builds and platforms.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: BTreeMap::new(), seed }
    }

    /// Each tensor draws from its own stream keyed by `(seed, name)`, so adding or
    /// removing a layer never perturbs the initial values of the others.
    pub(crate) fn register(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&name));
        let data: Vec<f64> = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        let prev = self.params.insert(name.clone(), Param { shape: shape.to_vec(), value: Arc::new(data), kind });
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Learnable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.learnable().map(|(_, p)| p.value.len()).sum()
    }

    /// Bytes held by all parameters and buffers.
    pub fn total_bytes(&self) -> usize {
        self.params.values().map(|p| p.value.len() * std::mem::size_of::<f64>()).sum()
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params.get_mut(name).map(|p| Arc::make_mut(&mut p.value))
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if data.len() != p.value.len() {
            return Err(Error::shape("set_param", format!("{name}: {} values for shape {:?}", data.len(), p.shape)));
        }
        p.value = Arc::new(data);
        Ok(())
    }

    /// Sets every learnable tensor to `value`; buffers are left alone.
    pub fn fill_learnable(&mut self, value: f64) {
        for p in self.params.values_mut().filter(|p| p.kind == ParamKind::Learnable) {
            p.value = Arc::new(vec![value; p.value.len()]);
        }
    }

    pub fn to_records(&self) -> Vec<WeightRecord> {
        self.iter()
            .map(|(name, p)| WeightRecord { name: name.to_string(), shape: p.shape.clone(), data: p.value.to_vec() })
            .collect()
    }

    /// Overwrites parameters from records; every stored tensor must be present with a matching shape.
    pub fn load_records(&mut self, records: &[WeightRecord]) -> Result<()> {
        let by_name: HashMap<&str, &WeightRecord> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for (name, p) in self.params.iter_mut() {
            let r = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Invalid(format!("weights are missing {name}")))?;
            if r.shape != p.shape {
                return Err(Error::shape("load_weights", format!("{name}: file {:?}, model {:?}", r.shape, p.shape)));
            }
            p.value = Arc::new(r.data.clone());
        }
        Ok(())
    }
}

/// Per-forward binding of stored parameters to graph leaves.
///
/// Leaves are created lazily and cached so a parameter used twice in one pass
/// accumulates both gradient contributions. Train-mode batchnorm statistics
/// are collected here and applied to the store by the owner afterwards.
pub struct ForwardCtx<'a> {
    store: &'a ParamStore,
    mode: NormMode,
    track_grad: bool,
    leaves: RefCell<HashMap<String, Tensor>>,
    bn_updates: RefCell<Vec<(String, BatchNormStats)>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a ParamStore, mode: NormMode, track_grad: bool) -> Self {
        Self { store, mode, track_grad, leaves: RefCell::default(), bn_updates: RefCell::default() }
    }

    /// Inference: running statistics, no gradient tracking.
    pub fn infer(store: &'a ParamStore) -> Self {
        Self::new(store, NormMode::Infer, false)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let grad = self.track_grad && p.kind == ParamKind::Learnable;
        let t = Tensor::from_shared(&p.shape, p.value.clone(), grad)?;
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub(crate) fn running_stats(&self, prefix: &str) -> Result<BatchNormStats> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            self.store
                .get(&name)
                .map(|p| p.value.to_vec())
                .ok_or_else(|| Error::Invalid(format!("unknown buffer {name}")))
        };
        let updates = get("num_batches_tracked")?.first().map_or(0, |&v| v as u64);
        Ok(BatchNormStats { mean: get("running_mean")?, var: get("running_var")?, updates })
    }

    pub(crate) fn record_bn(&self, prefix: &str, stats: BatchNormStats) {
        self.bn_updates.borrow_mut().push((prefix.to_string(), stats));
    }

    /// Gradients of every learnable leaf touched during the pass.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BatchNormStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

impl ParamStore {
    /// Writes running statistics gathered by a train-mode pass.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, BatchNormStats)>) -> Result<()> {
        for (prefix, stats) in updates {
            self.set(&format!("{prefix}.running_mean"), stats.mean)?;
            self.set(&format!("{prefix}.running_var"), stats.var)?;
            self.set(&format!("{prefix}.num_batches_tracked"), vec![stats.updates as f64])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_keyed_by_name() {
        let mut a = ParamStore::new(7);
        a.register("x.weight".into(), &[4, 3], Init::KaimingUniform { fan_in: 3 }, ParamKind::Learnable);
        a.register("y.weight".into(), &[2], Init::KaimingUniform { fan_in: 2 }, ParamKind::Learnable);
        let mut b = ParamStore::new(7);
        b.register("y.weight".into(), &[2], Init::KaimingUniform { fan_in: 2 }, ParamKind::Learnable);
        assert_eq!(a.get("y.weight").unwrap().value, b.get("y.weight").unwrap().value);
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(a.get("x.weight").unwrap().value.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn shared_leaf_accumulates_both_uses() {
        let mut s = ParamStore::new(0);
        s.register("w".into(), &[2], Init::Const(3.0), ParamKind::Learnable);
        let ctx = ForwardCtx::new(&s, NormMode::Train, true);
        let w1 = ctx.param("w").unwrap();
        let w2 = ctx.param("w").unwrap();
        w1.add(&w2).unwrap().sum().backward().unwrap();
        assert_eq!(ctx.grads()["w"], vec![2.0, 2.0]);
    }

    #[test]
    fn load_rejects_missing_or_misshapen() {
        let mut s = ParamStore::new(0);
        s.register("w".into(), &[2], Init::Const(1.0), ParamKind::Learnable);
        assert!(s.clone().load_records(&[]).is_err());
        let bad = WeightRecord { name: "w".into(), shape: vec![3], data: vec![0.0; 3] };
        assert!(s.clone().load_records(&[bad]).is_err());
        let good = WeightRecord { name: "w".into(), shape: vec![2], data: vec![5.0, 6.0] };
        s.load_records(&[good]).unwrap();
        assert_eq!(*s.get("w").unwrap().value, vec![5.0, 6.0]);
    }
}

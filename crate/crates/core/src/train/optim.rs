use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::WeightRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// SGD with heavy-ball momentum.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, momentum: 0.9 }
    }
}

/// Per-parameter optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            let p = store.value_mut(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.len() != g.len() {
                return Err(Error::shape("optimizer_step", format!("{name}: {} values, {} gradients", p.len(), g.len())));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match c.kind {
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                        p[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..g.len() {
                        m[i] = c.momentum * m[i] + g[i];
                        p[i] -= c.lr * m[i];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<WeightRecord> {
        let rec = |prefix: &str, map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .map(|(k, v)| WeightRecord { name: format!("{prefix}.{k}"), shape: vec![v.len()], data: v.clone() })
                .collect::<Vec<_>>()
        };
        let mut out = rec("m", &self.first);
        out.extend(rec("v", &self.second));
        out.push(WeightRecord { name: "steps".into(), shape: vec![1], data: vec![self.steps as f64] });
        out
    }

    pub fn from_records(cfg: OptimizerConfig, records: &[WeightRecord]) -> Result<Self> {
        let mut opt = Optimizer::new(cfg);
        for r in records {
            if r.name == "steps" {
                opt.steps = r.data.first().copied().unwrap_or(0.0) as u64;
            } else if let Some(k) = r.name.strip_prefix("m.") {
                opt.first.insert(k.to_string(), r.data.clone());
            } else if let Some(k) = r.name.strip_prefix("v.") {
                opt.second.insert(k.to_string(), r.data.clone());
            } else {
                return Err(Error::Format { what: "optimizer state", detail: format!("unexpected record {}", r.name) });
            }
        }
        Ok(opt)
    }
}

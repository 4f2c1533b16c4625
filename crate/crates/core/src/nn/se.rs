//! Squeeze-and-excitation channel recalibration.
//!
//! `s = GAP(y)`, `z = sigmoid(W2 relu(W1 s + b1) + b2)`, `y' = z * y` per channel.

use super::params::{Init, ParamKind, ParamStore};
use super::{FlopTable, ForwardCtx};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default channel reduction between the two fully connected layers.
pub const SE_REDUCTION: usize = 4;

/// `w1: [C/r, C]`, `b1: [C/r]`, `w2: [C, C/r]`, `b2: [C]`.
#[derive(Clone, Debug)]
pub struct SeWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl SeWeights {
    /// All-zero weights: every gate evaluates to `sigmoid(0) = 0.5`.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self {
            w1: Tensor::zeros(&[hidden, channels]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[channels, hidden]),
            b2: Tensor::zeros(&[channels]),
        })
    }

    pub fn channels(&self) -> usize {
        self.w2.shape()[0]
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Invalid(format!("SE reduction {reduction} must divide {channels} channels")));
    }
    Ok(channels / reduction)
}

/// Channel attention gates `z[N, C]`, each strictly inside (0, 1).
pub fn se_gates(y: &Tensor, p: &SeWeights) -> Result<Tensor> {
    let c = p.channels();
    if y.rank() != 4 || y.shape()[1] != c {
        return Err(Error::shape("se_forward", format!("input {:?} for {c} SE channels", y.shape())));
    }
    let s = y.global_avg_pool()?;
    let h = s.linear(&p.w1, Some(&p.b1))?.relu()?;
    h.linear(&p.w2, Some(&p.b2))?.sigmoid()
}

pub fn se_forward(y: &Tensor, p: &SeWeights) -> Result<Tensor> {
    y.channel_scale(&se_gates(y, p)?)
}

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub name: String,
    pub channels: usize,
    pub reduction: usize,
}

impl SqueezeExcite {
    pub fn new(name: impl Into<String>, channels: usize, reduction: usize) -> Result<Self> {
        hidden_width(channels, reduction)?;
        Ok(Self { name: name.into(), channels, reduction })
    }

    fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn register(&self, store: &mut ParamStore) {
        let (c, h) = (self.channels, self.hidden());
        store.register(format!("{}.fc1.weight", self.name), &[h, c], Init::KaimingUniform { fan_in: c }, ParamKind::Learnable);
        store.register(format!("{}.fc1.bias", self.name), &[h], Init::Const(0.0), ParamKind::Learnable);
        store.register(format!("{}.fc2.weight", self.name), &[c, h], Init::KaimingUniform { fan_in: h }, ParamKind::Learnable);
        store.register(format!("{}.fc2.bias", self.name), &[c], Init::Const(0.0), ParamKind::Learnable);
    }

    pub fn weights(&self, ctx: &ForwardCtx) -> Result<SeWeights> {
        let p = |s: &str| ctx.param(&format!("{}.{s}", self.name));
        Ok(SeWeights { w1: p("fc1.weight")?, b1: p("fc1.bias")?, w2: p("fc2.weight")?, b2: p("fc2.bias")? })
    }

    pub fn forward(&self, ctx: &ForwardCtx, y: &Tensor) -> Result<Tensor> {
        self.weights(ctx).and_then(|w| se_forward(y, &w)).map_err(|e| e.in_stage(&self.name))
    }

    /// Pooling, both FC layers and the per-element rescale.
    pub fn flops(&self, h: usize, w: usize, table: &mut FlopTable) {
        let (c, hid, hw) = (self.channels as u64, self.hidden() as u64, (h * w) as u64);
        table.push(&format!("{}.pool", self.name), c * hw);
        table.push(&format!("{}.fc1", self.name), 2 * c * hid);
        table.push(&format!("{}.fc2", self.name), 2 * hid * c);
        table.push(&format!("{}.scale", self.name), c * hw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_weights(c: usize, rng: &mut ChaCha8Rng) -> SeWeights {
        let h = c / SE_REDUCTION;
        SeWeights {
            w1: random(&[h, c], rng, 1.0),
            b1: random(&[h], rng, 0.5),
            w2: random(&[c, h], rng, 1.0),
            b2: random(&[c], rng, 0.5),
        }
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random(&[2, 8, 3, 3], &mut rng, 4.0);
        let out = se_forward(&y, &SeWeights::zeros(8, 4).unwrap()).unwrap();
        assert_eq!(out.shape(), y.shape());
        for (o, v) in out.data().iter().zip(y.data()) {
            assert_eq!(*o, 0.5 * v);
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = Tensor::zeros(&[1, 8, 4, 4]);
        let out = se_forward(&y, &random_weights(8, &mut rng)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_gates_contract_every_nonzero_element() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random(&[2, 16, 5, 5], &mut rng, 3.0);
            let out = se_forward(&y, &random_weights(16, &mut rng)).unwrap();
            for (o, v) in out.data().iter().zip(y.data()) {
                if *v != 0.0 {
                    assert!(o.abs() < v.abs());
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let y = Tensor::zeros(&[1, 6, 2, 2]);
        assert!(se_forward(&y, &SeWeights::zeros(8, 4).unwrap()).is_err());
        assert!(SqueezeExcite::new("se", 6, 4).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random(&[2, 8, 3, 3], &mut rng, 2.0);
        let p = random_weights(8, &mut rng);
        let proj = random(&[2, 8, 3, 3], &mut rng, 1.0);
        let c = finite_diff_check(|y| Ok(se_forward(y, &p)?.mul(&proj)?.sum()), &y, 1e-5).unwrap();
        assert!(c.max_rel_error < 1e-6, "{}", c.max_rel_error);
        let c = finite_diff_check(
            |w1| Ok(se_forward(&y, &SeWeights { w1: w1.clone(), ..p.clone() })?.mul(&proj)?.sum()),
            &p.w1,
            1e-5,
        )
        .unwrap();
        assert!(c.max_rel_error < 1e-6, "{}", c.max_rel_error);
    }
}

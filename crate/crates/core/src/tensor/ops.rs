//! Elementwise math, reductions, the two permitted broadcasts, and activations.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Silu,
    Relu,
    Gelu,
    /// Row-wise over the last dimension.
    SoftmaxLastDim,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Tensor {
    /// Elementwise map with derivative `d(x, y)` evaluated at input `x` and output `y`.
    fn unary(&self, f: impl Fn(f64) -> f64, d: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, p, y| {
                let x = p[0].data();
                vec![Some(g.iter().zip(x).zip(y).map(|((g, &x), &y)| g * d(x, y)).collect())]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(|x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// `min(x, hi)`; the gradient is cut where the clamp is active.
    pub fn clamp_max(&self, hi: f64) -> Tensor {
        self.unary(|x| x.min(hi), move |x, _| if x < hi { 1.0 } else { 0.0 })
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        self.ensure_finite(match kind {
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::SoftmaxLastDim => "softmax",
        })?;
        Ok(match kind {
            Activation::Sigmoid => self.unary(sigmoid, |_, y| y * (1.0 - y)),
            Activation::Silu => self.unary(
                |x| x * sigmoid(x),
                |x, _| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                },
            ),
            Activation::Relu => self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Activation::Gelu => self.unary(
                |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
                |x, _| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                },
            ),
            Activation::SoftmaxLastDim => self.softmax_last_dim(),
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.activation(Activation::Sigmoid)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.activation(Activation::Silu)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.activation(Activation::Gelu)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.activation(Activation::SoftmaxLastDim)
    }

    fn softmax_last_dim(&self) -> Tensor {
        let d = *self.shape().last().expect("rank >= 1");
        let mut out = self.to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut dx = vec![0.0; g.len()];
                for ((dx, g), y) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Elementwise binary op with partials `(da, db)` at `(a, b)`.
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        d: impl Fn(f64, f64) -> (f64, f64) + Send + Sync + 'static,
    ) -> Result<Tensor> {
        same_shape(op, self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0].data(), p[1].data());
                let mut da = Vec::with_capacity(g.len());
                let mut db = Vec::with_capacity(g.len());
                for i in 0..g.len() {
                    let (pa, pb) = d(a[i], b[i]);
                    da.push(g[i] * pa);
                    db.push(g[i] * pb);
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// Ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "minimum", f64::min, |a, b| if a <= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    /// Ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "maximum", f64::max, |a, b| if a >= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `out[i] = self[indices[i]]` over the flattened storage.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {n} elements")));
        }
        let x = self.data();
        let out = indices.iter().map(|&i| x[i]).collect();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len()],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; n];
                for (&i, &g) in idx.iter().zip(g) {
                    dx[i] += g;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Adds `bias[C]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || bias.shape() != [s[1]] {
            return Err(Error::shape("add_channel_bias", format!("input {s:?}, bias {:?}", bias.shape())));
        }
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let b = bias.data();
        let mut out = self.to_vec();
        for (k, chunk) in out.chunks_mut(inner).enumerate() {
            let bk = b[k % c];
            chunk.iter_mut().for_each(|v| *v += bk);
        }
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; c];
                for (k, chunk) in g.chunks(inner).enumerate() {
                    db[k % c] += chunk.iter().sum::<f64>();
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    /// Adds `b` whose shape equals the trailing dimensions of `self`.
    pub fn add_suffix(&self, b: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        let bs = b.shape();
        if bs.len() > s.len() || s[s.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_suffix", format!("input {s:?}, addend {bs:?}")));
        }
        let m = b.numel();
        let bd = b.data();
        let mut out = self.to_vec();
        for chunk in out.chunks_mut(m) {
            chunk.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
        }
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; m];
                for chunk in g.chunks(m) {
                    db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    /// `out[n,c,...] = z[n,c] * self[n,c,...]`.
    pub fn channel_scale(&self, z: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || z.shape() != [s[0], s[1]] {
            return Err(Error::shape("channel_scale", format!("input {s:?}, scale {:?}", z.shape())));
        }
        let inner: usize = s[2..].iter().product();
        let zd = z.data();
        let mut out = self.to_vec();
        for (k, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= zd[k]);
        }
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), z.clone()],
            Box::new(move |g, p, _| {
                let (x, z) = (p[0].data(), p[1].data());
                let mut dx = vec![0.0; g.len()];
                let mut dz = vec![0.0; z.len()];
                for k in 0..z.len() {
                    let r = k * inner..(k + 1) * inner;
                    for i in r {
                        dx[i] = g[i] * z[k];
                        dz[k] += g[i] * x[i];
                    }
                }
                vec![Some(dx), Some(dz)]
            }),
        ))
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial extent.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [N,C,H,W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = 1.0 / hw as f64;
        let out = self.data().chunks(hw).map(|c| c.iter().sum::<f64>() * inv).collect();
        Ok(Tensor::from_op(
            vec![s[0], s[1]],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = Vec::with_capacity(g.len() * hw);
                for &gk in g {
                    dx.extend(std::iter::repeat_n(gk * inv, hw));
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Numerically stable elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", self.numel(), targets.len()),
            ));
        }
        self.ensure_finite("bce_with_logits")?;
        let out = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let t = targets.to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let x = p[0].data();
                vec![Some(g.iter().zip(x).zip(&t).map(|((g, &x), t)| g * (sigmoid(x) - t)).collect())]
            }),
        ))
    }
}

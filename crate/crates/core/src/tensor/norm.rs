use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Added to the variance in both norm variants.
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update, once the
/// start-up correction has worn off.
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Infer,
}

/// Running statistics after a train-mode batchnorm step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Train-mode batches folded in so far.
    pub updates: u64,
}

impl BatchNormStats {
    /// Weight given to the next batch: `m / (1 - (1 - m)^n)` for the `n`-th
    /// update. This is the zero-initialized EMA with its bias divided out, so
    /// the first batch replaces the initial values and later ones approach `m`.
    pub fn next_weight(&self) -> f64 {
        if self.updates == 0 {
            return 1.0;
        }
        let n = self.updates.saturating_add(1).min(i32::MAX as u64) as i32;
        BN_MOMENTUM / (1.0 - (1.0 - BN_MOMENTUM).powi(n))
    }
}

impl Tensor {
    /// Per-channel normalization of `[N, C, H, W]`.
    ///
    /// Train mode normalizes with biased batch statistics and returns the
    /// updated running statistics (unbiased variance, weighted by
    /// [`BatchNormStats::next_weight`]); infer mode uses the running statistics as given.
    pub fn batch_norm2d(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running: &BatchNormStats,
        mode: NormMode,
    ) -> Result<(Tensor, Option<BatchNormStats>)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("batch_norm2d", format!("expected [N,C,H,W], got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if gamma.shape() != [c] || beta.shape() != [c] || running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm2d", format!("parameters do not match {c} channels")));
        }
        let count = n * hw;
        if mode == NormMode::Train && count < 2 {
            return Err(Error::Invalid(format!("batch_norm2d in train mode needs > 1 value per channel, got {count}")));
        }
        let x = self.data();
        let at = move |b: usize, ch: usize| (b * c + ch) * hw;

        let (mean, var, update) = match mode {
            NormMode::Infer => (running.mean.clone(), running.var.clone(), None),
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += x[at(b, ch)..at(b, ch) + hw].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += x[at(b, ch)..at(b, ch) + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                let unbias = count as f64 / (count as f64 - 1.0);
                let k = running.next_weight();
                let update = BatchNormStats {
                    mean: running.mean.iter().zip(&mean).map(|(r, m)| (1.0 - k) * r + k * m).collect(),
                    var: running.var.iter().zip(&var).map(|(r, v)| (1.0 - k) * r + k * v * unbias).collect(),
                    updates: running.updates + 1,
                };
                (mean, var, Some(update))
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, bt) = (gamma.data(), beta.data());
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = at(b, ch)..at(b, ch) + hw;
                let (scale, shift) = (g[ch] * inv_std[ch], bt[ch] - mean[ch] * g[ch] * inv_std[ch]);
                for (o, v) in out[r.clone()].iter_mut().zip(&x[r]) {
                    *o = v * scale + shift;
                }
            }
        }

        let y = Tensor::from_op(
            s.to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gout, p, _| {
                let (x, gm) = (p[0].data(), p[1].data());
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for b in 0..n {
                        let r = at(b, ch)..at(b, ch) + hw;
                        for (gv, xv) in gout[r.clone()].iter().zip(&x[r]) {
                            sum_g += gv;
                            sum_gx += gv * (xv - m) * is;
                        }
                    }
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    let k = gm[ch] * is;
                    for b in 0..n {
                        let r = at(b, ch)..at(b, ch) + hw;
                        for i in r {
                            dx[i] = match mode {
                                NormMode::Infer => k * gout[i],
                                NormMode::Train => {
                                    let xh = (x[i] - m) * is;
                                    k * (gout[i] - sum_g / count as f64 - xh * sum_gx / count as f64)
                                }
                            };
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((y, update))
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta` of that length.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", format!("last dim {d}, gamma {:?}", gamma.shape())));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (row, out)) in self.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
            let is = 1.0 / (v + NORM_EPS).sqrt();
            inv_std[r] = is;
            out.iter_mut().zip(row).for_each(|(o, x)| *o = (x - m) * is);
        }
        let (g, b) = (gamma.data(), beta.data());
        let out: Vec<f64> = xhat.chunks(d).flat_map(|row| row.iter().zip(g).zip(b).map(|((x, g), b)| x * g + b)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |gout, p, _| {
                let gm = p[1].data();
                let mut dx = vec![0.0; gout.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let (go, xh) = (&gout[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                    let mut sum_gg = 0.0;
                    let mut sum_ggx = 0.0;
                    for i in 0..d {
                        dgamma[i] += go[i] * xh[i];
                        dbeta[i] += go[i];
                        let gg = go[i] * gm[i];
                        sum_gg += gg;
                        sum_ggx += gg * xh[i];
                    }
                    for i in 0..d {
                        let gg = go[i] * gm[i];
                        dx[r * d + i] = inv_std[r] * (gg - sum_gg / d as f64 - xh[i] * sum_ggx / d as f64);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }
}

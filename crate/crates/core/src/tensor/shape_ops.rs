use super::Tensor;
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into permuted layout: `out` axis `i` is source axis `perm[i]`.
fn permute_copy(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(self.view_op(shape.to_vec()))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..rank).collect::<Vec<_>>() {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_copy(self.data(), &shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(permute_copy(g, &os, &inverse))]),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        Ok(Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, p, _| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (part, &w) in p.iter().zip(&widths) {
                    if part.tracks_grad() {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g[start..start + w]);
                        }
                        grads.push(Some(d));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let (lo, w) = (start * inner, len * inner);
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&self.data()[o * full + lo..o * full + lo + w]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; n];
                for o in 0..outer {
                    dx[o * full + lo..o * full + lo + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::shape("split", format!("sizes {sizes:?} on axis {axis} of {:?}", self.shape())));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.narrow(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", format!("{s:?} by {factor}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let planes = s[0] * s[1];
        let x = self.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    out.push(row[ox / factor]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![s[0], s[1], oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[p * h * w + (oy / factor) * w + ox / factor] += g[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::full(&[1, 2, 2, 2], 1.0);
        let b = Tensor::full(&[1, 3, 2, 2], 2.0);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert!(c.data()[..8].iter().all(|&v| v == 1.0));
        assert!(c.data()[8..].iter().all(|&v| v == 2.0));
        let parts = c.split(&[2, 3], 1).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let a = Tensor::zeros(&[1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 2, 3, 2]);
        assert!(Tensor::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn grad_of_sum_of_concat_is_ones() {
        let a = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap().requires_grad();
        let b = Tensor::full(&[1, 3, 2, 2], 2.0);
        let check = finite_diff_check(|a| Ok(Tensor::concat(&[a.clone(), b.clone()], 1)?.sum()), &a, 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-8);
        assert!(check.analytic.iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn permute_and_upsample_gradients() {
        let x = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|i| (i as f64).cos()).collect()).unwrap().requires_grad();
        let w = Tensor::from_vec(&[2, 2, 4, 6], (0..96).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let check = finite_diff_check(
            |x| Ok(x.permute(&[0, 2, 3, 1])?.reshape(&[2, 2, 2, 3])?.upsample_nearest(2)?.narrow(2, 0, 4)?.mul(&w)?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{}", check.max_rel_error);
    }

    proptest! {
        #[test]
        fn split_concat_are_inverse(c1 in 1usize..4, c2 in 1usize..4, c3 in 1usize..4, hw in 1usize..4, seed in 0u64..1000) {
            let mk = |c: usize, k: u64| Tensor::from_vec(&[2, c, hw, hw],
                (0..2 * c * hw * hw).map(|i| ((i as u64 * 31 + k * 17 + seed) % 97) as f64).collect()).unwrap();
            let parts = vec![mk(c1, 1), mk(c2, 2), mk(c3, 3)];
            let joined = Tensor::concat(&parts, 1).unwrap();
            let back = joined.split(&[c1, c2, c3], 1).unwrap();
            for (p, q) in parts.iter().zip(&back) {
                prop_assert_eq!(p.data(), q.data());
            }
            let again = Tensor::concat(&back, 1).unwrap();
            prop_assert_eq!(again.data(), joined.data());
        }

        #[test]
        fn permute_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
            let x = Tensor::from_vec(&[a, b, c], (0..a * b * c).map(|i| i as f64).collect()).unwrap();
            let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert_eq!(y.data(), x.data());
        }
    }
}

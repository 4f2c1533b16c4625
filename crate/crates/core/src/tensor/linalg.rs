use super::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertion above states the extents; callers size buffers from the same
    // (m, k, n) and the strides never leave those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Tensor {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false)
    }

    /// `x[M, K]` times `w[N, K]` transposed, plus optional `bias[N]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let y = self.matmul_t(weight, true)?;
        match bias {
            Some(b) => y.add_suffix(b),
            None => Ok(y),
        }
    }

    fn matmul_t(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 {
            return Err(Error::shape("matmul", format!("rank-2 operands required, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[0], a[1]);
        let (kb, n) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {a:?} x {b:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, other.data(), trans_b, 0.0, &mut out);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let da = p[0].tracks_grad().then(|| {
                    let mut da = vec![0.0; m * k];
                    // da = g * op(b)^T
                    gemm(m, n, k, g, false, p[1].data(), !trans_b, 0.0, &mut da);
                    da
                });
                let db = p[1].tracks_grad().then(|| {
                    let mut db = vec![0.0; k * n];
                    if trans_b {
                        // b is [n, k]: db = g^T * a
                        gemm(n, m, k, g, true, p[0].data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, p[0].data(), true, g, false, 0.0, &mut db);
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Batched `[B, M, K] x [B, K, N]`, or `[B, N, K]` transposed when `trans_b`.
    pub fn bmm(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] {
            return Err(Error::shape("bmm", format!("{a:?} x {b:?}")));
        }
        let (bs, m, k) = (a[0], a[1], a[2]);
        let (kb, n) = if trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
        if k != kb {
            return Err(Error::shape("bmm", format!("inner dimensions differ: {a:?} x {b:?}")));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                false,
                &other.data()[i * k * n..],
                trans_b,
                0.0,
                &mut out[i * m * n..],
            );
        }
        Ok(Tensor::from_op(
            vec![bs, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (ad, bd) = (p[0].data(), p[1].data());
                let da = p[0].tracks_grad().then(|| {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(m, n, k, &g[i * m * n..], false, &bd[i * k * n..], !trans_b, 0.0, &mut da[i * m * k..]);
                    }
                    da
                });
                let db = p[1].tracks_grad().then(|| {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let (gi, ai, di) = (&g[i * m * n..], &ad[i * m * k..], &mut db[i * k * n..]);
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, 0.0, di);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, 0.0, di);
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }
}

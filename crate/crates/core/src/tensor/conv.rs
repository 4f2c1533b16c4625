//! 2-D convolution through im2col + GEMM, with a direct-loop reference.

use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// `floor((size + 2 * padding - kernel) / stride) + 1`, or `None` if the kernel does not fit.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let Geometry { c_in, h, w, kh, kw, stride, padding, ho, wo } = *self;
        let mut row = 0;
        for c in 0..c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let Geometry { c_in, h, w, kh, kw, stride, padding, ho, wo } = *self;
        let mut row = 0;
        for c in 0..c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_conv(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Geometry> {
    let (s, k) = (input.shape(), weight.shape());
    if s.len() != 4 || k.len() != 4 {
        return Err(Error::shape("conv2d", format!("expected rank-4 input and weight, got {s:?} and {k:?}")));
    }
    if s[1] != k[1] {
        return Err(Error::shape("conv2d", format!("input has {} channels, weight expects {}", s[1], k[1])));
    }
    if let Some(b) = bias {
        if b.shape() != [k[0]] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} output channels", b.shape(), k[0])));
        }
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d stride must be >= 1".into()));
    }
    let ho = conv_out_extent(s[2], k[2], stride, padding);
    let wo = conv_out_extent(s[3], k[3], stride, padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape("conv2d", format!("kernel {k:?} larger than padded input {s:?}")));
    };
    input.ensure_finite("conv2d")?;
    Ok(Geometry { c_in: s[1], h: s[2], w: s[3], kh: k[2], kw: k[3], stride, padding, ho, wo })
}

impl Tensor {
    /// `[N, C_in, H, W]` conv `[C_out, C_in, kH, kW]` -> `[N, C_out, H_out, W_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let geo = check_conv(self, weight, bias, stride, padding)?;
        let n = self.shape()[0];
        let c_out = weight.shape()[0];
        let ck = geo.c_in * geo.kh * geo.kw;
        let hw = geo.ho * geo.wo;
        let in_plane = geo.c_in * geo.h * geo.w;

        let mut out = vec![0.0; n * c_out * hw];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; ck * hw] };
        for i in 0..n {
            let x = &self.data()[i * in_plane..(i + 1) * in_plane];
            let b: &[f64] = if geo.is_pointwise() {
                x
            } else {
                geo.im2col(x, &mut cols);
                &cols
            };
            gemm(c_out, ck, hw, weight.data(), false, b, false, 0.0, &mut out[i * c_out * hw..]);
        }
        if let Some(b) = bias {
            for (k, chunk) in out.chunks_mut(hw).enumerate() {
                let bk = b.data()[k % c_out];
                chunk.iter_mut().for_each(|v| *v += bk);
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        Ok(Tensor::from_op(
            vec![n, c_out, geo.ho, geo.wo],
            out,
            parents,
            Box::new(move |g, p, _| {
                let (x, w) = (p[0].data(), p[1].data());
                let mut dx = p[0].tracks_grad().then(|| vec![0.0; x.len()]);
                let mut dw = p[1].tracks_grad().then(|| vec![0.0; w.len()]);
                let mut cols = vec![0.0; if geo.is_pointwise() { 0 } else { ck * hw }];
                let mut dcols = vec![0.0; ck * hw];
                for i in 0..n {
                    let gi = &g[i * c_out * hw..(i + 1) * c_out * hw];
                    let xi = &x[i * in_plane..(i + 1) * in_plane];
                    if let Some(dw) = dw.as_mut() {
                        let b: &[f64] = if geo.is_pointwise() {
                            xi
                        } else {
                            geo.im2col(xi, &mut cols);
                            &cols
                        };
                        gemm(c_out, hw, ck, gi, false, b, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxi = &mut dx[i * in_plane..(i + 1) * in_plane];
                        if geo.is_pointwise() {
                            gemm(ck, c_out, hw, w, true, gi, false, 1.0, dxi);
                        } else {
                            gemm(ck, c_out, hw, w, true, gi, false, 0.0, &mut dcols);
                            geo.col2im_add(&dcols, dxi);
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if p.len() == 3 {
                    let mut db = vec![0.0; c_out];
                    for (k, chunk) in g.chunks(hw).enumerate() {
                        db[k % c_out] += chunk.iter().sum::<f64>();
                    }
                    grads.push(Some(db));
                }
                grads
            }),
        ))
    }
}

/// Direct seven-loop convolution on raw buffers; the test oracle for [`Tensor::conv2d`].
pub fn conv2d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geo = check_conv(input, weight, bias, stride, padding)?;
    let n = input.shape()[0];
    let c_out = weight.shape()[0];
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![0.0; n * c_out * geo.ho * geo.wo];
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..geo.c_in {
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= geo.h as isize || ix >= geo.w as isize {
                                    continue;
                                }
                                let xv = x[((b * geo.c_in + ci) * geo.h + iy as usize) * geo.w + ix as usize];
                                let wv = w[((co * geo.c_in + ci) * geo.kh + ky) * geo.kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * c_out + co) * geo.ho + oy) * geo.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, c_out, geo.ho, geo.wo], out)
}

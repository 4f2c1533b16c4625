//! Vision-transformer branch: patchify, positional embedding, pre-norm
//! encoder blocks, and reshaping tokens back to a feature map.

use serde::{Deserialize, Serialize};

use super::params::{Init, ParamKind, ParamStore};
use super::{conv_flops, FlopTable, ForwardCtx};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { patch: 4, dim: 64, heads: 2, depth: 2, mlp_ratio: 2 }
    }
}

/// Scaled dot-product attention over `[B, T, d]` operands.
/// Returns the attended values and the `[B, T, T]` attention weights.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = *q.shape().last().ok_or_else(|| Error::shape("attention", "rank 0 query"))?;
    let scores = q.bmm(k, true)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax()?;
    Ok((weights.bmm(v, false)?, weights))
}

#[derive(Clone, Debug)]
pub struct VitBranch {
    pub name: String,
    pub c_in: usize,
    pub grid: (usize, usize),
    pub cfg: VitConfig,
}

impl VitBranch {
    /// Branch for an `in_h x in_w` input map; both extents must divide by the patch size.
    pub fn new(name: impl Into<String>, c_in: usize, in_h: usize, in_w: usize, cfg: VitConfig) -> Result<Self> {
        let name = name.into();
        if cfg.patch == 0 || in_h % cfg.patch != 0 || in_w % cfg.patch != 0 {
            return Err(Error::Invalid(format!("{name}: {in_h}x{in_w} input not divisible by patch {}", cfg.patch)));
        }
        if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
            return Err(Error::Invalid(format!("{name}: dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        Ok(Self { name, c_in, grid: (in_h / cfg.patch, in_w / cfg.patch), cfg })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn register(&self, store: &mut ParamStore) {
        let VitConfig { patch, dim, depth, mlp_ratio, .. } = self.cfg;
        let n = &self.name;
        let mut learn = |suffix: String, shape: &[usize], init: Init| store.register(format!("{n}.{suffix}"), shape, init, ParamKind::Learnable);
        learn("patch.weight".into(), &[dim, self.c_in, patch, patch], Init::KaimingUniform { fan_in: self.c_in * patch * patch });
        learn("patch.bias".into(), &[dim], Init::Const(0.0));
        learn("pos".into(), &[self.tokens(), dim], Init::Normal { std: 0.02 });
        let hidden = dim * mlp_ratio;
        for i in 0..depth {
            for ln in ["ln1", "ln2"] {
                learn(format!("blocks.{i}.{ln}.weight"), &[dim], Init::Const(1.0));
                learn(format!("blocks.{i}.{ln}.bias"), &[dim], Init::Const(0.0));
            }
            learn(format!("blocks.{i}.qkv.weight"), &[3 * dim, dim], Init::KaimingUniform { fan_in: dim });
            learn(format!("blocks.{i}.qkv.bias"), &[3 * dim], Init::Const(0.0));
            learn(format!("blocks.{i}.proj.weight"), &[dim, dim], Init::KaimingUniform { fan_in: dim });
            learn(format!("blocks.{i}.proj.bias"), &[dim], Init::Const(0.0));
            learn(format!("blocks.{i}.fc1.weight"), &[hidden, dim], Init::KaimingUniform { fan_in: dim });
            learn(format!("blocks.{i}.fc1.bias"), &[hidden], Init::Const(0.0));
            learn(format!("blocks.{i}.fc2.weight"), &[dim, hidden], Init::KaimingUniform { fan_in: hidden });
            learn(format!("blocks.{i}.fc2.bias"), &[dim], Init::Const(0.0));
        }
        learn("norm.weight".into(), &[dim], Init::Const(1.0));
        learn("norm.bias".into(), &[dim], Init::Const(0.0));
    }

    /// `[N, C_in, H, W] -> [N, T, dim]` patch tokens before positional embedding.
    pub fn patchify(&self, ctx: &ForwardCtx, feat: &Tensor) -> Result<Tensor> {
        let s = feat.shape();
        let p = self.cfg.patch;
        if s.len() != 4 || s[1] != self.c_in || s[2] != self.grid.0 * p || s[3] != self.grid.1 * p {
            return Err(Error::shape(
                "vit_branch",
                format!("input {s:?}, expected [N, {}, {}, {}]", self.c_in, self.grid.0 * p, self.grid.1 * p),
            ));
        }
        let w = ctx.param(&format!("{}.patch.weight", self.name))?;
        let b = ctx.param(&format!("{}.patch.bias", self.name))?;
        let e = feat.conv2d(&w, Some(&b), p, 0)?;
        e.reshape(&[s[0], self.cfg.dim, self.tokens()])?.permute(&[0, 2, 1])
    }

    /// Encoder stack over `[N, T, dim]` tokens (positional embedding already added).
    pub fn encode(&self, ctx: &ForwardCtx, tokens: &Tensor) -> Result<Tensor> {
        let VitConfig { dim, heads, depth, .. } = self.cfg;
        let n = tokens.shape()[0];
        let t = self.tokens();
        let dh = dim / heads;
        let p = |s: String| ctx.param(&format!("{}.{s}", self.name));
        let mut x = tokens.clone();
        for i in 0..depth {
            let h = x.layer_norm(&p(format!("blocks.{i}.ln1.weight"))?, &p(format!("blocks.{i}.ln1.bias"))?)?;
            let qkv = h
                .reshape(&[n * t, dim])?
                .linear(&p(format!("blocks.{i}.qkv.weight"))?, Some(&p(format!("blocks.{i}.qkv.bias"))?))?
                .reshape(&[n, t, 3, heads, dh])?
                .permute(&[2, 0, 3, 1, 4])?;
            let split = qkv.split(&[1, 1, 1], 0)?;
            let as_batch = |x: &Tensor| x.reshape(&[n * heads, t, dh]);
            let (att, _) = attention(&as_batch(&split[0])?, &as_batch(&split[1])?, &as_batch(&split[2])?)?;
            let merged = att.reshape(&[n, heads, t, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * t, dim])?;
            let proj = merged.linear(&p(format!("blocks.{i}.proj.weight"))?, Some(&p(format!("blocks.{i}.proj.bias"))?))?;
            x = x.add(&proj.reshape(&[n, t, dim])?)?;

            let h = x.layer_norm(&p(format!("blocks.{i}.ln2.weight"))?, &p(format!("blocks.{i}.ln2.bias"))?)?;
            let m = h
                .reshape(&[n * t, dim])?
                .linear(&p(format!("blocks.{i}.fc1.weight"))?, Some(&p(format!("blocks.{i}.fc1.bias"))?))?
                .gelu()?
                .linear(&p(format!("blocks.{i}.fc2.weight"))?, Some(&p(format!("blocks.{i}.fc2.bias"))?))?;
            x = x.add(&m.reshape(&[n, t, dim])?)?;
        }
        x.layer_norm(&p("norm.weight".into())?, &p("norm.bias".into())?)
    }

    pub fn forward(&self, ctx: &ForwardCtx, feat: &Tensor) -> Result<Tensor> {
        let run = || -> Result<Tensor> {
            let tokens = self.patchify(ctx, feat)?;
            let pos = ctx.param(&format!("{}.pos", self.name))?;
            let x = self.encode(ctx, &tokens.add_suffix(&pos)?)?;
            let n = feat.shape()[0];
            x.permute(&[0, 2, 1])?.reshape(&[n, self.cfg.dim, self.grid.0, self.grid.1])
        };
        run().map_err(|e| e.in_stage(&self.name))
    }

    pub fn flops(&self, table: &mut FlopTable) {
        let VitConfig { patch, dim, depth, mlp_ratio, .. } = self.cfg;
        let (t, d) = (self.tokens() as u64, dim as u64);
        let hidden = d * mlp_ratio as u64;
        table.push(&format!("{}.patch", self.name), conv_flops(dim, self.c_in, patch, self.grid.0, self.grid.1));
        for i in 0..depth {
            let b = format!("{}.blocks.{i}", self.name);
            table.push(&format!("{b}.qkv"), 2 * t * d * 3 * d);
            table.push(&format!("{b}.scores"), 2 * t * t * d);
            table.push(&format!("{b}.values"), 2 * t * t * d);
            table.push(&format!("{b}.proj"), 2 * t * d * d);
            table.push(&format!("{b}.mlp"), 2 * t * d * hidden * 2);
        }
    }
}

//! GELAN aggregation block (RepNCSPELAN4) with optional SE recalibration.
//!
//! ```text
//! x' = cv1(x)                       1x1, c_in -> c3
//! (x0, x1) = split(x', c3/2, c3/2)
//! p1 = cv2(x1)                      CSP path, c3/2 -> c4
//! p2 = cv3(p1)                      CSP path, c4 -> c4
//! y  = concat(x0, x1, p1, p2)       c3 + 2*c4 channels
//! y' = se(y) when present
//! out = cv4(y')                     1x1, c3 + 2*c4 -> c_out
//! ```
//!
//! Each CSP path is a small GELAN unit: a 1x1 stem, one residual
//! 3x3 unit (`h + conv(h)`), then a trailing 3x3 conv.

use super::conv_block::ConvBlock;
use super::params::ParamStore;
use super::se::{SqueezeExcite, SE_REDUCTION};
use super::{FlopTable, ForwardCtx};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CspPath {
    pub stem: ConvBlock,
    pub residual: Vec<ConvBlock>,
    pub tail: ConvBlock,
}

impl CspPath {
    pub fn new(name: &str, c_in: usize, c_out: usize, depth: usize) -> Self {
        Self {
            stem: ConvBlock::new(format!("{name}.stem"), c_in, c_out, 1, 1),
            residual: (0..depth).map(|i| ConvBlock::new(format!("{name}.res{i}"), c_out, c_out, 3, 1)).collect(),
            tail: ConvBlock::new(format!("{name}.tail"), c_out, c_out, 3, 1),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        std::iter::once(&self.stem).chain(&self.residual).chain(std::iter::once(&self.tail))
    }

    pub fn register(&self, store: &mut ParamStore) {
        self.blocks().for_each(|b| b.register(store));
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(ctx, x)?;
        for unit in &self.residual {
            h = h.add(&unit.forward(ctx, &h)?)?;
        }
        self.tail.forward(ctx, &h)
    }

    pub fn flops(&self, h: usize, w: usize, table: &mut FlopTable) {
        self.blocks().for_each(|b| {
            b.flops(h, w, table);
        });
    }
}

#[derive(Clone, Debug)]
pub struct RepNCSPELAN4 {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub c3: usize,
    pub c4: usize,
    pub cv1: ConvBlock,
    pub cv2: CspPath,
    pub cv3: CspPath,
    pub se: Option<SqueezeExcite>,
    pub cv4: ConvBlock,
}

impl RepNCSPELAN4 {
    /// `with_se` turns this into RepNCSPELAN4_SE: identical layers plus an SE gate before `cv4`.
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, c3: usize, c4: usize, depth: usize, with_se: bool) -> Result<Self> {
        let name = name.into();
        if c3 % 2 != 0 {
            return Err(Error::Invalid(format!("{name}: c3 = {c3} must be even to split")));
        }
        let cat = c3 + 2 * c4;
        let se = with_se.then(|| SqueezeExcite::new(format!("{name}.se"), cat, SE_REDUCTION)).transpose()?;
        Ok(Self {
            cv1: ConvBlock::new(format!("{name}.cv1"), c_in, c3, 1, 1),
            cv2: CspPath::new(&format!("{name}.cv2"), c3 / 2, c4, depth),
            cv3: CspPath::new(&format!("{name}.cv3"), c4, c4, depth),
            se,
            cv4: ConvBlock::new(format!("{name}.cv4"), cat, c_out, 1, 1),
            name,
            c_in,
            c_out,
            c3,
            c4,
        })
    }

    pub fn concat_channels(&self) -> usize {
        self.c3 + 2 * self.c4
    }

    pub fn register(&self, store: &mut ParamStore) {
        self.cv1.register(store);
        self.cv2.register(store);
        self.cv3.register(store);
        if let Some(se) = &self.se {
            se.register(store);
        }
        self.cv4.register(store);
    }

    /// Everything up to the concatenation `y`.
    pub fn aggregate(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.shape()[1] != self.c_in {
            return Err(Error::shape("rep_ncspelan4", format!("input {:?}, expected {} channels", x.shape(), self.c_in))
                .in_stage(&self.cv1.name));
        }
        let xp = self.cv1.forward(ctx, x)?;
        let half = self.c3 / 2;
        let parts = xp.split(&[half, half], 1).map_err(|e| e.in_stage(format!("{}.split", self.name)))?;
        let p1 = self.cv2.forward(ctx, &parts[1])?;
        let p2 = self.cv3.forward(ctx, &p1)?;
        Tensor::concat(&[parts[0].clone(), parts[1].clone(), p1, p2], 1).map_err(|e| e.in_stage(format!("{}.concat", self.name)))
    }

    /// SE (if enabled and requested) followed by `cv4`.
    pub fn fuse(&self, ctx: &ForwardCtx, y: &Tensor, use_se: bool) -> Result<Tensor> {
        match (&self.se, use_se) {
            (Some(se), true) => self.cv4.forward(ctx, &se.forward(ctx, y)?),
            _ => self.cv4.forward(ctx, y),
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        self.forward_with(ctx, x, true)
    }

    /// `use_se = false` bypasses the gate, reproducing the plain RepNCSPELAN4 dataflow.
    pub fn forward_with(&self, ctx: &ForwardCtx, x: &Tensor, use_se: bool) -> Result<Tensor> {
        let y = self.aggregate(ctx, x)?;
        self.fuse(ctx, &y, use_se)
    }

    pub fn flops(&self, h: usize, w: usize, table: &mut FlopTable) {
        self.cv1.flops(h, w, table);
        self.cv2.flops(h, w, table);
        self.cv3.flops(h, w, table);
        if let Some(se) = &self.se {
            se.flops(h, w, table);
        }
        self.cv4.flops(h, w, table);
    }
}

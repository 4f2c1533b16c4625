use super::params::{Init, ParamKind, ParamStore};
use super::{conv_flops, FlopTable, ForwardCtx};
use crate::error::Result;
use crate::tensor::{conv_out_extent, Tensor};

/// `conv (no bias) -> batchnorm -> SiLU`, padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride }
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn register(&self, store: &mut ParamStore) {
        let k = self.kernel;
        store.register(
            format!("{}.conv.weight", self.name),
            &[self.c_out, self.c_in, k, k],
            Init::KaimingUniform { fan_in: self.c_in * k * k },
            ParamKind::Learnable,
        );
        let c = [self.c_out];
        store.register(format!("{}.bn.weight", self.name), &c, Init::Const(1.0), ParamKind::Learnable);
        store.register(format!("{}.bn.bias", self.name), &c, Init::Const(0.0), ParamKind::Learnable);
        store.register(format!("{}.bn.running_mean", self.name), &c, Init::Const(0.0), ParamKind::Buffer);
        store.register(format!("{}.bn.running_var", self.name), &c, Init::Const(1.0), ParamKind::Buffer);
        store.register(format!("{}.bn.num_batches_tracked", self.name), &[1], Init::Const(0.0), ParamKind::Buffer);
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: &Tensor) -> Result<Tensor> {
        let run = || -> Result<Tensor> {
            let w = ctx.param(&format!("{}.conv.weight", self.name))?;
            let y = x.conv2d(&w, None, self.stride, self.padding())?;
            let bn = format!("{}.bn", self.name);
            let (y, stats) = y.batch_norm2d(
                &ctx.param(&format!("{bn}.weight"))?,
                &ctx.param(&format!("{bn}.bias"))?,
                &ctx.running_stats(&bn)?,
                ctx.mode(),
            )?;
            if let Some(stats) = stats {
                ctx.record_bn(&bn, stats);
            }
            y.silu()
        };
        run().map_err(|e| e.in_stage(&self.name))
    }

    pub fn out_extent(&self, size: usize) -> usize {
        conv_out_extent(size, self.kernel, self.stride, self.padding()).unwrap_or(0)
    }

    pub fn flops(&self, h: usize, w: usize, table: &mut FlopTable) -> (usize, usize) {
        let (ho, wo) = (self.out_extent(h), self.out_extent(w));
        table.push(&self.name, conv_flops(self.c_out, self.c_in, self.kernel, ho, wo));
        (ho, wo)
    }
}

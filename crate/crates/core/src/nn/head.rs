use super::params::{Init, ParamKind, ParamStore};
use super::{conv_flops, FlopTable, ForwardCtx};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial objectness probability of every cell.
pub const OBJ_PRIOR: f64 = 0.01;

/// Anchor-free detection head: one 1x1 conv per scale emitting
/// `(tx, ty, tw, th, objectness, class logits...)` for every grid cell.
#[derive(Clone, Debug)]
pub struct DetectHead {
    pub name: String,
    pub in_channels: Vec<usize>,
    pub num_classes: usize,
}

impl DetectHead {
    pub fn new(name: impl Into<String>, in_channels: Vec<usize>, num_classes: usize) -> Self {
        Self { name: name.into(), in_channels, num_classes }
    }

    pub fn outputs(&self) -> usize {
        5 + self.num_classes
    }

    pub fn register(&self, store: &mut ParamStore) {
        for (i, &c) in self.in_channels.iter().enumerate() {
            store.register(
                format!("{}.{i}.weight", self.name),
                &[self.outputs(), c, 1, 1],
                Init::KaimingUniform { fan_in: c },
                ParamKind::Learnable,
            );
            let bias = format!("{}.{i}.bias", self.name);
            store.register(bias.clone(), &[self.outputs()], Init::Const(0.0), ParamKind::Learnable);
            let mut b = vec![0.0; self.outputs()];
            b[4] = (OBJ_PRIOR / (1.0 - OBJ_PRIOR)).ln();
            store.set(&bias, b).expect("bias shape");
        }
    }

    /// Raw logits, one `[N, 5 + classes, Hs, Ws]` map per input feature map.
    pub fn forward(&self, ctx: &ForwardCtx, features: &[Tensor]) -> Result<Vec<Tensor>> {
        if features.len() != self.in_channels.len() {
            return Err(Error::shape(
                "head_forward",
                format!("{} feature maps for {} scales", features.len(), self.in_channels.len()),
            ));
        }
        features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let w = ctx.param(&format!("{}.{i}.weight", self.name))?;
                let b = ctx.param(&format!("{}.{i}.bias", self.name))?;
                f.conv2d(&w, Some(&b), 1, 0).map_err(|e| e.in_stage(format!("{}.{i}", self.name)))
            })
            .collect()
    }

    pub fn flops(&self, extents: &[(usize, usize)], table: &mut FlopTable) {
        for (i, (&c, &(h, w))) in self.in_channels.iter().zip(extents).enumerate() {
            table.push(&format!("{}.{i}", self.name), conv_flops(self.outputs(), c, 1, h, w));
        }
    }
}

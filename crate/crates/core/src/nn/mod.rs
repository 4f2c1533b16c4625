//! Network building blocks: conv/BN/SiLU units, squeeze-and-excitation,
//! the GELAN aggregation block, the ViT branch and the detection head.
//!
//! Layers are plain descriptions; their tensors live in a [`ParamStore`] and
//! are bound to graph leaves per pass through a [`ForwardCtx`].

mod conv_block;
mod elan;
mod head;
mod params;
mod se;
mod vit;


use serde::{Deserialize, Serialize};

pub use conv_block::ConvBlock;
pub use elan::{CspPath, RepNCSPELAN4};
pub use head::{DetectHead, OBJ_PRIOR};
pub use params::{ForwardCtx, Param, ParamKind, ParamStore};
pub use se::{se_forward, se_gates, SeWeights, SqueezeExcite, SE_REDUCTION};
pub use vit::{attention, VitBranch, VitConfig};

/// `2 * C_out * C_in * k * k * H_out * W_out`
pub fn conv_flops(c_out: usize, c_in: usize, kernel: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (c_out * c_in * kernel * kernel * h_out * w_out) as u64
}

/// Per-layer floating-point operation counts, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopTable {
    pub entries: Vec<(String, u64)>,
}

impl FlopTable {
    pub fn push(&mut self, name: &str, flops: u64) {
        self.entries.push((name.to_string(), flops));
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|(_, f)| f).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 * 1e-9
    }

    /// Sum over entries whose name contains `needle` as a dotted path segment.
    pub fn total_matching(&self, segment: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(n, _)| n.split('.').any(|s| s == segment))
            .map(|(_, f)| f)
            .sum()
    }
}

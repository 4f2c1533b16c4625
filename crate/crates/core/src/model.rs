//! The three detector variants behind one spec-driven builder.
//!
//! All variants share the GELAN backbone and PAN neck:
//!
//! ```text
//! stem(s2) -> down1(s2) -> elan1 -> down2(s2) -> elan2 = P3 (stride 8)
//!          -> down3(s2) -> elan3 = P4 (stride 16) -> down4(s2) -> elan4 = P5 (stride 32)
//! P5' = P5                              gelan_t
//! P5' = fuse(concat(P5, vit(P_k)))      ViT variants; P_k chosen so the token grid matches P5
//! N4  = n4(concat(up(P5'), P4))
//! N3  = n3(concat(up(N4), P3))                    -> head scale 0
//! H4  = h4(concat(down(N3), N4))   [SE in vit_se] -> head scale 1
//! H5  = h5(concat(down(H4), P5'))  [SE in vit_se] -> head scale 2
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, DetectHead, FlopTable, ForwardCtx, ParamStore, RepNCSPELAN4, VitBranch, VitConfig};
use crate::tensor::{read_weights, write_weights, NormMode, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];
const BASE_WIDTHS: [usize; 5] = [8, 12, 28, 40, 56];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GelanT,
    GelanVit,
    GelanVitSe,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::GelanT, Variant::GelanVit, Variant::GelanVitSe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GelanT => "gelan_t",
            Variant::GelanVit => "gelan_vit",
            Variant::GelanVitSe => "gelan_vit_se",
        }
    }

    pub fn has_vit(self) -> bool {
        self != Variant::GelanT
    }

    pub fn has_se(self) -> bool {
        self == Variant::GelanVitSe
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?} (expected gelan_t, gelan_vit or gelan_vit_se)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_size: usize,
    pub width: f64,
    pub depth: usize,
    pub num_classes: usize,
    pub strides: Vec<usize>,
    pub vit: VitConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::new(Variant::GelanVitSe)
    }
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            input_size: 160,
            width: 1.0,
            depth: 1,
            num_classes: 1,
            strides: STRIDES.to_vec(),
            vit: VitConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides != STRIDES {
            return Err(Error::Invalid(format!("strides {:?} unsupported; the detector is built for {STRIDES:?}", self.strides)));
        }
        let largest = STRIDES[2];
        if self.input_size == 0 || self.input_size % largest != 0 {
            return Err(Error::Invalid(format!("input size {} not divisible by stride {largest}", self.input_size)));
        }
        if !(self.width > 0.0 && self.width.is_finite()) || self.depth == 0 || self.num_classes == 0 {
            return Err(Error::Invalid("width, depth and num_classes must be positive".into()));
        }
        if self.variant.has_vit() {
            let p = self.vit.patch;
            if !matches!(p, 1 | 2 | 4) || self.input_size % p != 0 {
                return Err(Error::Invalid(format!("ViT patch {p} must be 1, 2 or 4 and divide the input size")));
            }
        }
        Ok(())
    }

    /// Stage widths `[c0..c4]`, rounded to multiples of 4.
    pub fn widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|c| (((c as f64 * self.width) / 4.0).round() as usize).max(1) * 4)
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.strides.iter().map(|s| self.input_size / s).collect()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn elan(name: &str, c_in: usize, c_out: usize, depth: usize, se: bool) -> Result<RepNCSPELAN4> {
    RepNCSPELAN4::new(name, c_in, c_out, c_out, c_out / 2, depth, se)
}

struct Vit {
    branch: VitBranch,
    /// Index into `[P3, P4, P5]` of the map the branch reads.
    source: usize,
    fuse: ConvBlock,
}

pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    stem: ConvBlock,
    stages: Vec<(ConvBlock, RepNCSPELAN4)>,
    vit: Option<Vit>,
    n4: RepNCSPELAN4,
    n3: RepNCSPELAN4,
    down3: ConvBlock,
    h4: RepNCSPELAN4,
    down4: ConvBlock,
    h5: RepNCSPELAN4,
    head: DetectHead,
    flops: FlopTable,
}

impl Model {
    /// Deterministic in `seed`. Parameters are initialized per name, so layers
    /// common to two variants start from identical values.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let [c0, c1, c2, c3, c4] = spec.widths();
        let d = spec.depth;
        let s = spec.input_size;
        let stem = ConvBlock::new("backbone.stem", 3, c0, 3, 2);
        let mut stages = Vec::new();
        for (i, (ci, co)) in [(c0, c1), (c1, c2), (c2, c3), (c3, c4)].into_iter().enumerate() {
            let k = i + 1;
            stages.push((ConvBlock::new(format!("backbone.down{k}"), ci, co, 3, 2), elan(&format!("backbone.elan{k}"), co, co, d, false)?));
        }
        let vit = if spec.variant.has_vit() {
            let source = match spec.vit.patch {
                4 => 0,
                2 => 1,
                _ => 2,
            };
            let extent = s / STRIDES[source];
            let c_src = [c2, c3, c4][source];
            Some(Vit {
                branch: VitBranch::new("vit", c_src, extent, extent, spec.vit)?,
                source,
                fuse: ConvBlock::new("vit_fuse", c4 + spec.vit.dim, c4, 1, 1),
            })
        } else {
            None
        };
        let se = spec.variant.has_se();
        let mut model = Model {
            n4: elan("neck.n4", c4 + c3, c3, d, false)?,
            n3: elan("neck.n3", c3 + c2, c2, d, false)?,
            down3: ConvBlock::new("neck.down3", c2, c2, 3, 2),
            h4: elan("neck.h4", c2 + c3, c3, d, se)?,
            down4: ConvBlock::new("neck.down4", c3, c3, 3, 2),
            h5: elan("neck.h5", c3 + c4, c4, d, se)?,
            head: DetectHead::new("head", vec![c2, c3, c4], spec.num_classes),
            spec: spec.clone(),
            params: ParamStore::new(seed),
            stem,
            stages,
            vit,
            flops: FlopTable::default(),
        };
        let mut store = ParamStore::new(seed);
        model.register(&mut store);
        model.params = store;
        model.flops = model.count_flops_table();
        Ok(model)
    }

    fn register(&self, store: &mut ParamStore) {
        self.stem.register(store);
        for (down, block) in &self.stages {
            down.register(store);
            block.register(store);
        }
        if let Some(v) = &self.vit {
            v.branch.register(store);
            v.fuse.register(store);
        }
        for b in [&self.n4, &self.n3] {
            b.register(store);
        }
        self.down3.register(store);
        self.h4.register(store);
        self.down4.register(store);
        self.h5.register(store);
        self.head.register(store);
    }

    /// Raw prediction maps `[N, 5 + classes, S/stride, S/stride]`, one per stride.
    pub fn forward(&self, ctx: &ForwardCtx, images: &Tensor) -> Result<Vec<Tensor>> {
        let s = self.spec.input_size;
        let sh = images.shape();
        if sh.len() != 4 || sh[1] != 3 || sh[2] != s || sh[3] != s {
            return Err(Error::shape("model_forward", format!("input {sh:?}, expected [N, 3, {s}, {s}]")));
        }
        let mut x = self.stem.forward(ctx, images)?;
        let mut pyramid = Vec::new();
        for (i, (down, block)) in self.stages.iter().enumerate() {
            x = block.forward(ctx, &down.forward(ctx, &x)?)?;
            if i >= 1 {
                pyramid.push(x.clone());
            }
        }
        let (p3, p4, mut p5) = (pyramid[0].clone(), pyramid[1].clone(), pyramid[2].clone());
        if let Some(v) = &self.vit {
            let tokens = v.branch.forward(ctx, &pyramid[v.source])?;
            let cat = Tensor::concat(&[p5, tokens], 1).map_err(|e| e.in_stage("vit_fuse"))?;
            p5 = v.fuse.forward(ctx, &cat)?;
        }
        let cat = |name: &str, parts: [Tensor; 2]| Tensor::concat(&parts, 1).map_err(|e| e.in_stage(name));
        let up = |name: &str, t: &Tensor| t.upsample_nearest(2).map_err(|e| e.in_stage(name));

        let n4 = self.n4.forward(ctx, &cat("neck.n4", [up("neck.n4", &p5)?, p4])?)?;
        let n3 = self.n3.forward(ctx, &cat("neck.n3", [up("neck.n3", &n4)?, p3])?)?;
        let h4 = self.h4.forward(ctx, &cat("neck.h4", [self.down3.forward(ctx, &n3)?, n4])?)?;
        let h5 = self.h5.forward(ctx, &cat("neck.h5", [self.down4.forward(ctx, &h4)?, p5])?)?;
        self.head.forward(ctx, &[n3, h4, h5])
    }

    /// Inference-mode forward without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.forward(&ForwardCtx::new(&self.params, NormMode::Infer, false), images)
    }

    pub fn flops(&self) -> &FlopTable {
        &self.flops
    }

    fn count_flops_table(&self) -> FlopTable {
        let mut t = FlopTable::default();
        let s = self.spec.input_size;
        let (mut h, mut w) = self.stem.flops(s, s, &mut t);
        for (down, block) in &self.stages {
            (h, w) = down.flops(h, w, &mut t);
            block.flops(h, w, &mut t);
        }
        let g = self.spec.grid_sizes();
        if let Some(v) = &self.vit {
            v.branch.flops(&mut t);
            v.fuse.flops(g[2], g[2], &mut t);
        }
        self.n4.flops(g[1], g[1], &mut t);
        self.n3.flops(g[0], g[0], &mut t);
        self.down3.flops(g[0], g[0], &mut t);
        self.h4.flops(g[1], g[1], &mut t);
        self.down4.flops(g[1], g[1], &mut t);
        self.h5.flops(g[2], g[2], &mut t);
        self.head.flops(&[(g[0], g[0]), (g[1], g[1]), (g[2], g[2])], &mut t);
        t
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_weights(BufWriter::new(f), &self.params.to_records())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let records = read_weights(BufReader::new(f))?;
        self.params.load_records(&records)
    }
}

/// Per-layer FLOPs of `model` (multiply-accumulate counted as two operations).
pub fn count_flops(model: &Model) -> FlopTable {
    model.count_flops_table()
}

//! Ground-truth assignment to grid cells and the inverse box decoding.

use crate::metrics::{nms, Detection};
use crate::sim::LabelBox;
use crate::tensor::Tensor;

/// Size logits are capped at `ln 4`, i.e. boxes up to four strides wide.
pub const MAX_SIZE_LOGIT: f64 = std::f64::consts::LN_2 * 2.0;

/// Target for one positive cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub row: usize,
    pub col: usize,
    pub class: usize,
    /// Pixel corners `(x1, y1, x2, y2)`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleTargets {
    pub stride: usize,
    pub grid: usize,
    pub positives: Vec<CellTarget>,
}

impl ScaleTargets {
    /// Row-major `grid x grid` objectness mask.
    pub fn objectness(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.grid * self.grid];
        for p in &self.positives {
            m[p.row * self.grid + p.col] = 1.0;
        }
        m
    }
}

/// Per-image targets, one entry per stride.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetMap {
    pub scales: Vec<ScaleTargets>,
    /// Ground truths that found every candidate cell already occupied.
    pub dropped: usize,
}

impl TargetMap {
    pub fn num_positives(&self) -> usize {
        self.scales.iter().map(|s| s.positives.len()).sum()
    }
}

/// Index into `strides` (ascending) for a box whose larger side is `max_dim` px:
/// the largest stride `s` with `2 s <= max_dim`, or the smallest stride when none qualifies.
pub fn preferred_scale(max_dim: f64, strides: &[usize]) -> usize {
    strides.iter().rposition(|&s| 2.0 * s as f64 <= max_dim).unwrap_or(0)
}

/// Each ground truth goes to the cell containing its centre at its preferred
/// scale. When that cell is taken, the same centre is tried at the other
/// scales, nearest first.
pub fn assign_targets(gts: &[LabelBox], image_size: usize, strides: &[usize]) -> TargetMap {
    let mut map = TargetMap {
        scales: strides.iter().map(|&s| ScaleTargets { stride: s, grid: image_size / s, positives: Vec::new() }).collect(),
        dropped: 0,
    };
    let size = image_size as f64;
    for gt in gts {
        let bbox = gt.to_pixels(image_size, image_size);
        let (cx, cy) = (gt.cx * size, gt.cy * size);
        let first = preferred_scale((gt.w * size).max(gt.h * size), strides);
        let mut order: Vec<usize> = (0..strides.len()).collect();
        order.sort_by_key(|&k| (k.abs_diff(first), k < first));
        let slot = order.into_iter().find_map(|k| {
            let st = &map.scales[k];
            let cell = |v: f64| ((v / st.stride as f64).floor().max(0.0) as usize).min(st.grid - 1);
            let (row, col) = (cell(cy), cell(cx));
            st.positives.iter().all(|p| (p.row, p.col) != (row, col)).then_some((k, row, col))
        });
        match slot {
            Some((k, row, col)) => map.scales[k].positives.push(CellTarget { row, col, class: gt.class, bbox }),
            None => map.dropped += 1,
        }
    }
    map
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw `(tx, ty, tw, th)` that decode to `bbox` at the given cell. Offsets are
/// kept strictly inside the cell so the logits stay finite.
pub fn encode_box(bbox: [f64; 4], row: usize, col: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let frac = |centre: f64, cell: usize| (centre / s - cell as f64).clamp(1e-6, 1.0 - 1e-6);
    let (cx, cy) = ((bbox[0] + bbox[2]) / 2.0, (bbox[1] + bbox[3]) / 2.0);
    [
        logit(frac(cx, col)),
        logit(frac(cy, row)),
        ((bbox[2] - bbox[0]) / s).ln(),
        ((bbox[3] - bbox[1]) / s).ln(),
    ]
}

/// Pixel box for raw offsets at a cell: centre `(cell + sigmoid(t)) * stride`,
/// size `stride * exp(t)` with the exponent capped at 4x stride, then clipped to the image.
pub fn decode_box(t: [f64; 4], row: usize, col: usize, stride: usize, image_size: usize) -> [f64; 4] {
    let s = stride as f64;
    let size = image_size as f64;
    let cx = (col as f64 + sigmoid(t[0])) * s;
    let cy = (row as f64 + sigmoid(t[1])) * s;
    let w = (s * t[2].min(MAX_SIZE_LOGIT).exp()).min(size);
    let h = (s * t[3].min(MAX_SIZE_LOGIT).exp()).min(size);
    [
        (cx - w / 2.0).clamp(0.0, size),
        (cy - h / 2.0).clamp(0.0, size),
        (cx + w / 2.0).clamp(0.0, size),
        (cy + h / 2.0).clamp(0.0, size),
    ]
}

/// Detections with confidence `sigmoid(obj) * sigmoid(best class)` at or above
/// `conf_threshold`, for image `n` of a batch of raw maps.
pub fn decode(maps: &[Tensor], strides: &[usize], image_size: usize, n: usize, conf_threshold: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for (map, &stride) in maps.iter().zip(strides) {
        let sh = map.shape();
        let (c, g) = (sh[1], sh[2]);
        let hw = g * sh[3];
        let base = n * c * hw;
        let d = map.data();
        for row in 0..g {
            for col in 0..sh[3] {
                let at = |ch: usize| d[base + ch * hw + row * sh[3] + col];
                let obj = sigmoid(at(4));
                let (class, cls) = (5..c)
                    .map(|ch| (ch - 5, sigmoid(at(ch))))
                    .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
                let confidence = obj * cls;
                if confidence >= conf_threshold {
                    let bbox = decode_box([at(0), at(1), at(2), at(3)], row, col, stride, image_size);
                    out.push(Detection { class, confidence, bbox });
                }
            }
        }
    }
    out
}

/// `decode` followed by per-class NMS, for every image in the batch.
pub fn postprocess(maps: &[Tensor], strides: &[usize], image_size: usize, conf_threshold: f64, iou_threshold: f64) -> Vec<Vec<Detection>> {
    let batch = maps.first().map_or(0, |m| m.shape()[0]);
    (0..batch)
        .map(|n| nms(&decode(maps, strides, image_size, n, conf_threshold), iou_threshold))
        .collect()
}

use serde::{Deserialize, Serialize};

use super::assign::{TargetMap, MAX_SIZE_LOGIT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    /// Adds the squared centre offset, in units of the true box's width and
    /// height, to `1 - IoU`. This keeps a gradient on the centre when predicted
    /// and true boxes do not overlap, and stays strong for one-pixel boxes.
    pub center_penalty: bool,
    /// Adds the squared log ratio of predicted to true width and height. IoU
    /// stops pulling on a side once the box has collapsed; this term does not.
    pub size_penalty: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bbox: 5.0, obj: 1.0, cls: 0.5, center_penalty: true, size_penalty: true }
    }
}

/// The differentiable total plus the unweighted term values.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    /// Mean box term over positive cells.
    pub bbox: f64,
    /// Objectness BCE summed over every cell of every scale, averaged over images.
    pub obj: f64,
    /// Mean class BCE over positive cells and classes.
    pub cls: f64,
}

fn constant(values: Vec<f64>) -> Tensor {
    Tensor::from_vec(&[values.len()], values).expect("1-d")
}

/// Size logits capped at [`MAX_SIZE_LOGIT`] in value, with the gradient passed
/// straight through so an oversized box can still shrink.
fn capped(t: &Tensor) -> Result<Tensor> {
    t.sub(&t.sub(&t.clamp_max(MAX_SIZE_LOGIT))?.detach())
}

/// `w_box * mean(1 - IoU [+ centre term] [+ size term]) + w_obj * BCE(obj) per image + w_cls * mean BCE(cls)`.
/// `maps[k]` is `[N, 5 + classes, g, g]`; `targets[n]` holds image `n`'s assignment.
pub fn detection_loss(maps: &[Tensor], targets: &[TargetMap], w: &LossWeights) -> Result<LossParts> {
    let batch = targets.len();
    let mut obj_sum: Option<Tensor> = None;
    let mut box_sum: Option<Tensor> = None;
    let mut cls_sum: Option<Tensor> = None;
    let (mut positives, mut classes) = (0usize, 0usize);
    let acc = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(s) => s.add(&t)?,
            None => t,
        });
        Ok(())
    };

    for (k, map) in maps.iter().enumerate() {
        let sh = map.shape();
        if sh.len() != 4 || sh[0] != batch || sh[1] < 6 || sh[2] != sh[3] {
            return Err(Error::shape("detection_loss", format!("map {k} has shape {sh:?} for a batch of {batch}")));
        }
        let (c, g) = (sh[1], sh[2]);
        let gg = g * g;
        let at = |n: usize, ch: usize, row: usize, col: usize| (n * c + ch) * gg + row * g + col;

        let mut obj_idx = Vec::with_capacity(batch * gg);
        let mut obj_t = Vec::with_capacity(batch * gg);
        for (n, t) in targets.iter().enumerate() {
            let st = t
                .scales
                .get(k)
                .filter(|s| s.grid == g)
                .ok_or_else(|| Error::shape("detection_loss", format!("targets for image {n} do not cover scale {k} ({g}x{g})")))?;
            obj_idx.extend((0..gg).map(|cell| (n * c + 4) * gg + cell));
            obj_t.extend(st.objectness());
        }
        acc(&mut obj_sum, map.gather(&obj_idx)?.bce_with_logits(&obj_t).map_err(|e| e.in_stage("obj term"))?.sum())?;

        let stride = (targets[0].scales[k].stride) as f64;
        let pos: Vec<(usize, &super::assign::CellTarget)> =
            targets.iter().enumerate().flat_map(|(n, t)| t.scales[k].positives.iter().map(move |p| (n, p))).collect();
        if pos.is_empty() {
            continue;
        }
        let pick = |ch: usize| map.gather(&pos.iter().map(|(n, p)| at(*n, ch, p.row, p.col)).collect::<Vec<_>>());
        let cols = constant(pos.iter().map(|(_, p)| p.col as f64).collect());
        let rows = constant(pos.iter().map(|(_, p)| p.row as f64).collect());
        let gt = |i: usize| constant(pos.iter().map(|(_, p)| p.bbox[i]).collect());

        let in_box = |e: Error| e.in_stage("box term");
        let cx = pick(0)?.sigmoid().map_err(in_box)?.add(&cols)?.scale(stride);
        let cy = pick(1)?.sigmoid().map_err(in_box)?.add(&rows)?.scale(stride);
        let pw = capped(&pick(2)?)?.exp().scale(stride);
        let ph = capped(&pick(3)?)?.exp().scale(stride);
        let (x1, x2) = (cx.sub(&pw.scale(0.5))?, cx.add(&pw.scale(0.5))?);
        let (y1, y2) = (cy.sub(&ph.scale(0.5))?, cy.add(&ph.scale(0.5))?);
        let (gx1, gy1, gx2, gy2) = (gt(0), gt(1), gt(2), gt(3));
        let iw = x2.minimum(&gx2)?.sub(&x1.maximum(&gx1)?)?.relu()?;
        let ih = y2.minimum(&gy2)?.sub(&y1.maximum(&gy1)?)?.relu()?;
        let inter = iw.mul(&ih)?;
        let g_area = gx2.sub(&gx1)?.mul(&gy2.sub(&gy1)?)?;
        let union = pw.mul(&ph)?.add(&g_area)?.sub(&inter)?;
        let iou = inter.div(&union)?;
        let mut term = iou.neg().add_scalar(1.0);
        if w.center_penalty {
            let extent = |lo: usize, hi: usize| constant(pos.iter().map(|(_, p)| 1.0 / (p.bbox[hi] - p.bbox[lo]).max(1e-6)).collect());
            let dx = cx.sub(&gx1.add(&gx2)?.scale(0.5))?.mul(&extent(0, 2))?;
            let dy = cy.sub(&gy1.add(&gy2)?.scale(0.5))?.mul(&extent(1, 3))?;
            term = term.add(&dx.mul(&dx)?.add(&dy.mul(&dy)?)?)?;
        }
        if w.size_penalty {
            // Targets above the cap are clamped to it, so the straight-through
            // gradient cannot push a size logit up without bound.
            let target = |lo: usize, hi: usize| {
                constant(pos.iter().map(|(_, p)| ((p.bbox[hi] - p.bbox[lo]).max(1e-6) / stride).ln().min(MAX_SIZE_LOGIT)).collect())
            };
            let dw = capped(&pick(2)?)?.sub(&target(0, 2))?;
            let dh = capped(&pick(3)?)?.sub(&target(1, 3))?;
            term = term.add(&dw.mul(&dw)?.add(&dh.mul(&dh)?)?)?;
        }
        acc(&mut box_sum, term.sum())?;

        let nc = c - 5;
        let mut idx = Vec::with_capacity(pos.len() * nc);
        let mut tgt = Vec::with_capacity(pos.len() * nc);
        for (n, p) in &pos {
            for j in 0..nc {
                idx.push(at(*n, 5 + j, p.row, p.col));
                tgt.push(if p.class == j { 1.0 } else { 0.0 });
            }
        }
        acc(&mut cls_sum, map.gather(&idx)?.bce_with_logits(&tgt).map_err(|e| e.in_stage("cls term"))?.sum())?;
        positives += pos.len();
        classes = nc;
    }

    let obj = obj_sum
        .ok_or_else(|| Error::shape("detection_loss", "no prediction maps"))?
        .scale(1.0 / batch as f64);
    let mut total = obj.scale(w.obj);
    let (mut bbox_v, mut cls_v) = (0.0, 0.0);
    if let (Some(b), Some(cl)) = (box_sum, cls_sum) {
        let b = b.scale(1.0 / positives as f64);
        let cl = cl.scale(1.0 / (positives * classes) as f64);
        bbox_v = b.item()?;
        cls_v = cl.item()?;
        total = total.add(&b.scale(w.bbox))?.add(&cl.scale(w.cls))?;
    }
    let obj_v = obj.item()?;
    for (name, v) in [("box", bbox_v), ("obj", obj_v), ("cls", cls_v)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: format!("detection_loss ({name} term)") });
        }
    }
    Ok(LossParts { total, bbox: bbox_v, obj: obj_v, cls: cls_v })
}

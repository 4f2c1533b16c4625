//! Detection metrics: IoU, greedy NMS, COCO-style 101-point AP, mAP50 and mAP50:95.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Pixel-space corners `(x1, y1, x2, y2)`.
pub type BBox = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; 0 when either box has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    inter / (aa + ab - inter)
}

/// Indices of `dets` ordered by descending confidence, ties by lower index.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence).then(i.cmp(&j)));
    order
}

/// Greedy per-class non-maximum suppression: a detection is dropped when its
/// IoU with an already kept detection of the same class exceeds `iou_threshold`.
/// Survivors are returned in confidence order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in confidence_order(dets) {
        let d = dets[i];
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// `(recall, precision)` after each group of equally confident detections.
    pub pr: Vec<[f64; 2]>,
    /// Set when the class had no ground truth, so AP is 0 by convention.
    pub no_ground_truth: bool,
}

/// True-positive flags for one image's detections of a single class, in the
/// given order: each detection takes the unmatched ground truth with the
/// highest IoU at or above the threshold (ties to the lower index).
fn match_image(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// 101-point interpolated area under the precision envelope.
pub fn interpolated_ap(pr: &[[f64; 2]]) -> f64 {
    let mut envelope = vec![0.0; pr.len()];
    let mut best: f64 = 0.0;
    for i in (0..pr.len()).rev() {
        best = best.max(pr[i][1]);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < pr.len() && pr[j][0] < r {
            j += 1;
        }
        if j < pr.len() {
            sum += envelope[j];
        }
    }
    sum / 101.0
}

/// AP of one class over a corpus (`dets[i]` and `gts[i]` belong to image `i`).
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, iou_threshold: f64) -> ApResult {
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|g| g.class == class).count()).sum();
    // (confidence, is_tp) for every detection of the class.
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (img, img_dets) in dets.iter().enumerate() {
        let mine: Vec<Detection> = img_dets.iter().filter(|d| d.class == class).copied().collect();
        let ordered: Vec<&Detection> = confidence_order(&mine).into_iter().map(|i| &mine[i]).collect();
        let img_gts: Vec<&GroundTruth> = gts.get(img).map(|g| g.iter().filter(|g| g.class == class).collect()).unwrap_or_default();
        let tp = match_image(&ordered, &img_gts, iou_threshold);
        scored.extend(ordered.iter().zip(tp).map(|(d, t)| (d.confidence, t)));
    }
    if n_gt == 0 {
        return ApResult { ap: 0.0, pr: Vec::new(), no_ground_truth: true };
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(conf, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = scored.get(i + 1).is_none_or(|next| next.0.total_cmp(&conf) != Ordering::Equal);
        if group_ends {
            pr.push([tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64]);
        }
    }
    ApResult { ap: interpolated_ap(&pr), pr, no_ground_truth: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map50: f64,
    pub map50_95: f64,
    pub per_threshold: Vec<ThresholdAp>,
    /// PR samples at IoU 0.5 for the lowest class id with ground truth.
    pub pr_curve: Vec<[f64; 2]>,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub classes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// mAP over the classes that have ground truth. Detections of classes without
/// any ground truth do not contribute.
pub fn map_at(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], iou_threshold: f64) -> (f64, Vec<ApResult>) {
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|g| g.class).collect();
    if classes.is_empty() {
        return (0.0, Vec::new());
    }
    let per: Vec<ApResult> = classes.iter().map(|&c| average_precision(dets, gts, c, iou_threshold)).collect();
    let mean = per.iter().map(|r| r.ap).sum::<f64>() / per.len() as f64;
    (mean, per)
}

pub fn map_suite(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>]) -> MetricsReport {
    let classes: Vec<usize> = gts.iter().flatten().map(|g| g.class).collect::<BTreeSet<_>>().into_iter().collect();
    let mut per_threshold = Vec::with_capacity(10);
    let mut pr_curve = Vec::new();
    for (k, thr) in coco_thresholds().into_iter().enumerate() {
        let (ap, per) = map_at(dets, gts, thr);
        if k == 0 {
            pr_curve = per.first().map(|r| r.pr.clone()).unwrap_or_default();
        }
        per_threshold.push(ThresholdAp { iou: thr, ap });
    }
    let map50_95 = per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64;
    let ground_truths = gts.iter().map(Vec::len).sum();
    let detections = dets.iter().map(Vec::len).sum();
    let warning = (ground_truths == 0).then(|| {
        if detections == 0 {
            "no ground truth and no detections; AP reported as 0".to_string()
        } else {
            "no ground truth; AP reported as 0".to_string()
        }
    });
    MetricsReport {
        map50: per_threshold[0].ap,
        map50_95,
        per_threshold,
        pr_curve,
        images: gts.len().max(dets.len()),
        ground_truths,
        detections,
        classes,
        warning,
    }
}

/// Precision-recall staircase as a standalone SVG document.
pub fn pr_curve_svg(pr: &[[f64; 2]], title: &str) -> String {
    let (w, h, m) = (400.0, 400.0, 40.0);
    let sx = |r: f64| m + r * (w - 2.0 * m);
    let sy = |p: f64| h - m - p * (h - 2.0 * m);
    let mut points = format!("{:.2},{:.2}", sx(0.0), sy(pr.first().map_or(0.0, |p| p[1])));
    for p in pr {
        write!(points, " {:.2},{:.2}", sx(p[0]), sy(p[1])).expect("string write");
    }
    let escaped = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<text x="{tx}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{escaped}</text>
<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>
<text x="{tx}" y="{lx}" font-family="sans-serif" font-size="12" text-anchor="middle">recall</text>
<text x="12" y="{ty}" font-family="sans-serif" font-size="12" transform="rotate(-90 12 {ty})" text-anchor="middle">precision</text>
<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{points}"/>
</svg>
"##,
        tx = w / 2.0,
        ty = h / 2.0,
        b = h - m,
        r = w - m,
        lx = h - 10.0,
    )
}

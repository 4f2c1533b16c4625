use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sod_core::metrics::*;

// ---- independent reference implementations ----

/// IoU by counting unit cells covered by integer-cornered boxes.
fn grid_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in -8..40 {
        for x in -8..40 {
            let c = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = |r: &BBox| r[0] < c.0 && c.0 < r[2] && r[1] < c.1 && c.1 < r[3];
            let (ia, ib) = (inside(a), inside(b));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 || a[2] <= a[0] || a[3] <= a[1] || b[2] <= b[0] || b[3] <= b[1] {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn ref_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if dets[i].confidence > dets[best].confidence || (dets[i].confidence == dets[best].confidence && i < best) {
                best = i;
            }
        }
        keep.push(dets[best]);
        remaining.retain(|&i| i != best && !(dets[i].class == dets[best].class && grid_iou(&dets[i].bbox, &dets[best].bbox) > thr));
    }
    keep
}

/// TP flags per detection (by original position) using greedy matching.
fn ref_tp(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> Vec<Option<bool>> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    idx.sort_by(|&i, &j| dets[j].confidence.partial_cmp(&dets[i].confidence).unwrap().then(i.cmp(&j)));
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in idx {
        let mut cands: Vec<(f64, usize)> = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| gt.class == class && !used[*g])
            .map(|(g, gt)| (grid_iou(&dets[i].bbox, &gt.bbox), g))
            .filter(|(v, _)| *v >= thr)
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        out[i] = Some(if let Some(&(_, g)) = cands.first() {
            used[g] = true;
            true
        } else {
            false
        });
    }
    out
}

/// Enumerates every confidence cut-off, then takes the precision envelope at each of the 101 recall levels.
fn ref_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thr: f64) -> f64 {
    let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
    if n_gt == 0 {
        return 0.0;
    }
    let mut scored = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        for (det, tp) in d.iter().zip(ref_tp(d, g, class, thr)) {
            if let Some(tp) = tp {
                scored.push((det.confidence, tp));
            }
        }
    }
    let mut cuts: Vec<f64> = scored.iter().map(|s| s.0).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let points: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&c| {
            let kept: Vec<bool> = scored.iter().filter(|s| s.0 >= c).map(|s| s.1).collect();
            let tp = kept.iter().filter(|&&t| t).count() as f64;
            (tp / n_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn ref_map(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| ref_ap(dets, gts, c, thr)).sum::<f64>() / classes.len() as f64
}

// ---- random instances ----

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0..12) as f64, rng.random_range(0..12) as f64);
    [x, y, x + rng.random_range(1..6) as f64, y + rng.random_range(1..6) as f64]
}

fn rand_det(rng: &mut ChaCha8Rng, classes: usize) -> Detection {
    Detection { class: rng.random_range(0..classes), confidence: rng.random_range(1..10) as f64 / 10.0, bbox: rand_box(rng) }
}

fn rand_corpus(rng: &mut ChaCha8Rng, images: usize, classes: usize) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<GroundTruth> =
            (0..rng.random_range(0..4)).map(|_| GroundTruth { class: rng.random_range(0..classes), bbox: rand_box(rng) }).collect();
        let mut d: Vec<Detection> = (0..rng.random_range(0..6)).map(|_| rand_det(rng, classes)).collect();
        // Some detections near a ground truth so true positives occur at every threshold.
        for gt in &g {
            if rng.random_bool(0.7) {
                let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-1..=1) as f64 * if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                let b = [j(gt.bbox[0], rng), j(gt.bbox[1], rng), gt.bbox[2], gt.bbox[3]];
                let b = if b[0] < b[2] && b[1] < b[3] { b } else { gt.bbox };
                d.push(Detection { class: gt.class, confidence: rng.random_range(1..10) as f64 / 10.0, bbox: b });
            }
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

// ---- tests ----

#[test]
fn overlapping_squares_fixture_is_one_seventh() {
    assert_eq!(iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]), 1.0 / 7.0);
    assert_eq!(grid_iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]), 1.0 / 7.0);
}

#[test]
fn iou_edge_cases() {
    let a = [1.0, 2.0, 4.0, 6.0];
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
    assert_eq!(iou(&a, &[4.0, 2.0, 5.0, 6.0]), 0.0, "touching edges");
    assert_eq!(iou(&a, &[2.0, 2.0, 2.0, 5.0]), 0.0, "degenerate");
}

#[test]
fn iou_matches_cell_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        assert!((iou(&a, &b) - grid_iou(&a, &b)).abs() <= 1e-9);
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::array::uniform4(0.0..50.0f64), b in prop::array::uniform4(0.0..50.0f64)) {
        let a = [a[0].min(a[2]), a[1].min(a[3]), a[0].max(a[2]) + 0.1, a[1].max(a[3]) + 0.1];
        let b = [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]) + 0.1, b[1].max(b[3]) + 0.1];
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_output_is_pairwise_separated(seed in 0u64..1000, thr in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<Detection> = (0..15).map(|_| rand_det(&mut rng, 2)).collect();
        let kept = nms(&dets, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class != b.class || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
    }
}

#[test]
fn nms_basic_cases() {
    let b = [0.0, 0.0, 4.0, 4.0];
    let d = |c: f64, bbox: BBox| Detection { class: 0, confidence: c, bbox };
    let kept = nms(&[d(0.8, b), d(0.9, b)], 0.5);
    assert_eq!(kept, vec![d(0.9, b)]);
    let disjoint = [d(0.3, b), d(0.9, [10.0, 10.0, 12.0, 12.0]), d(0.5, [5.0, 0.0, 6.0, 1.0])];
    assert_eq!(nms(&disjoint, 0.5).len(), 3);
    let other_class = Detection { class: 1, ..d(0.5, b) };
    assert_eq!(nms(&[d(0.9, b), other_class], 0.5).len(), 2);
    // Equal confidence: the lower index survives.
    let tie = nms(&[d(0.7, b), d(0.7, [0.0, 0.0, 4.0, 3.9])], 0.5);
    assert_eq!(tie[0].bbox, b);
}

#[test]
fn nms_matches_reference_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let dets: Vec<Detection> = (0..10).map(|_| rand_det(&mut rng, 2)).collect();
        let thr = [0.3, 0.45, 0.5, 0.7][rng.random_range(0..4)];
        assert_eq!(nms(&dets, thr), ref_nms(&dets, thr));
    }
}

#[test]
fn ap_basic_cases() {
    let gt = vec![vec![GroundTruth { class: 0, bbox: [0.0, 0.0, 4.0, 4.0] }]];
    let hit = vec![vec![Detection { class: 0, confidence: 0.9, bbox: [0.0, 0.0, 4.0, 4.0] }]];
    let miss = vec![vec![Detection { class: 0, confidence: 0.9, bbox: [10.0, 10.0, 14.0, 14.0] }]];
    assert_eq!(average_precision(&hit, &gt, 0, 0.5).ap, 1.0);
    assert_eq!(average_precision(&miss, &gt, 0, 0.5).ap, 0.0);
    let empty = average_precision(&[vec![]], &[vec![]], 0, 0.5);
    assert_eq!(empty.ap, 0.0);
    assert!(empty.no_ground_truth);
}

#[test]
fn ap_three_gts_five_dets_by_hand() {
    // Confidence order: TP, FP, TP, FP, TP  ->  PR points
    // (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2), (1, 3/5).
    // Envelope: recall <= 1/3 -> 1, (1/3, 2/3] -> 2/3, (2/3, 1] -> 3/5.
    let g = |x: f64| GroundTruth { class: 0, bbox: [x, 0.0, x + 2.0, 2.0] };
    let d = |c: f64, x: f64| Detection { class: 0, confidence: c, bbox: [x, 0.0, x + 2.0, 2.0] };
    let gts = vec![vec![g(0.0), g(10.0), g(20.0)]];
    let dets = vec![vec![d(0.9, 0.0), d(0.8, 40.0), d(0.7, 10.0), d(0.6, 50.0), d(0.5, 20.0)]];
    // Recall levels 0..=0.33 (34 levels), 0.34..=0.66 (33), 0.67..=1.00 (34).
    let want = (34.0 * 1.0 + 33.0 * (2.0 / 3.0) + 34.0 * 0.6) / 101.0;
    let got = average_precision(&dets, &gts, 0, 0.5);
    assert!((got.ap - want).abs() < 1e-12, "{} vs {want}", got.ap);
    assert!((ref_ap(&dets, &gts, 0, 0.5) - want).abs() < 1e-12);
    assert_eq!(got.pr.len(), 5);
}

#[test]
fn ap_matches_reference_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let images = rng.random_range(1..4);
        let (dets, gts) = rand_corpus(&mut rng, images, 2);
        for thr in coco_thresholds() {
            for class in 0..2 {
                let got = average_precision(&dets, &gts, class, thr).ap;
                assert!((got - ref_ap(&dets, &gts, class, thr)).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn map_suite_matches_reference_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (dets, gts) = rand_corpus(&mut rng, 20, 2);
        let report = map_suite(&dets, &gts);
        let per: Vec<f64> = coco_thresholds().iter().map(|&t| ref_map(&dets, &gts, t)).collect();
        assert!((report.map50 - per[0]).abs() <= 1e-9);
        assert!((report.map50_95 - per.iter().sum::<f64>() / 10.0).abs() <= 1e-9);
        for (t, r) in report.per_threshold.iter().zip(&per) {
            assert!((t.ap - r).abs() <= 1e-9);
        }
        assert_eq!(report.map50_95, report.per_threshold.iter().map(|t| t.ap).sum::<f64>() / 10.0);
    }
}

#[test]
fn thresholds_are_the_coco_ladder() {
    let t = coco_thresholds();
    assert_eq!(t[0], 0.5);
    assert_eq!(t[1], 0.55);
    assert_eq!(t[9], 0.95);
}

#[test]
fn perfect_and_empty_detectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, gts) = rand_corpus(&mut rng, 20, 2);
    let perfect: Vec<Vec<Detection>> =
        gts.iter().map(|g| g.iter().map(|g| Detection { class: g.class, confidence: 0.8, bbox: g.bbox }).collect()).collect();
    let r = map_suite(&perfect, &gts);
    assert_eq!((r.map50, r.map50_95), (1.0, 1.0));
    let none = vec![Vec::new(); gts.len()];
    let r = map_suite(&none, &gts);
    assert_eq!((r.map50, r.map50_95), (0.0, 0.0));
    assert!(r.warning.is_none());
    let r = map_suite(&[vec![]], &[vec![]]);
    assert_eq!(r.map50, 0.0);
    assert!(r.warning.is_some());
}

#[test]
fn results_do_not_depend_on_image_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (dets, gts) = rand_corpus(&mut rng, 10, 2);
        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut rng);
        let d2: Vec<_> = order.iter().map(|&i| dets[i].clone()).collect();
        let g2: Vec<_> = order.iter().map(|&i| gts[i].clone()).collect();
        let (a, b) = (map_suite(&dets, &gts), map_suite(&d2, &g2));
        assert!((a.map50 - b.map50).abs() < 1e-12 && (a.map50_95 - b.map50_95).abs() < 1e-12);
        assert_eq!(a.pr_curve, b.pr_curve);
    }
}

#[test]
fn report_serializes_and_plots() {
    let gts = vec![vec![GroundTruth { class: 0, bbox: [0.0, 0.0, 4.0, 4.0] }]];
    let dets = vec![vec![Detection { class: 0, confidence: 0.9, bbox: [0.0, 0.0, 4.0, 4.0] }]];
    let r = map_suite(&dets, &gts);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"map50\":1.0"));
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let svg = pr_curve_svg(&r.pr_curve, "PR <test>");
    assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.contains("&lt;test&gt;"));
}


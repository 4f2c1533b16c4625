use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sod_core::error::Error;
use sod_core::metrics::iou;
use sod_core::model::{Model, ModelSpec, Variant, STRIDES};
use sod_core::sim::{generate_frame, GenConfig, LabelBox, RgbImage};
use sod_core::tensor::{finite_diff_check, Tensor};
use sod_core::train::*;

const LN2: f64 = std::f64::consts::LN_2;

fn label(cx: f64, cy: f64, w: f64, h: f64) -> LabelBox {
    LabelBox { class: 0, cx, cy, w, h }
}

fn cells(size: usize) -> usize {
    STRIDES.iter().map(|s| (size / s) * (size / s)).sum()
}

/// Maps filled with `fill` everywhere, `[n, 5 + classes, g, g]` per stride.
fn filled_maps(n: usize, classes: usize, size: usize, fill: f64) -> Vec<Vec<f64>> {
    STRIDES.iter().map(|s| vec![fill; n * (5 + classes) * (size / s) * (size / s)]).collect()
}

fn to_tensors(maps: &[Vec<f64>], n: usize, classes: usize, size: usize) -> Vec<Tensor> {
    maps.iter()
        .zip(STRIDES)
        .map(|(m, s)| Tensor::from_vec(&[n, 5 + classes, size / s, size / s], m.clone()).unwrap())
        .collect()
}

/// Logits that reproduce every assigned box exactly, with objectness and class
/// saturated at `mag`.
fn ideal_maps(targets: &[TargetMap], classes: usize, size: usize, mag: f64) -> Vec<Vec<f64>> {
    let n = targets.len();
    let mut maps = filled_maps(n, classes, size, -mag);
    let c = 5 + classes;
    for (i, t) in targets.iter().enumerate() {
        for (k, st) in t.scales.iter().enumerate() {
            let g = st.grid;
            for p in &st.positives {
                let at = |ch: usize| (i * c + ch) * g * g + p.row * g + p.col;
                let enc = encode_box(p.bbox, p.row, p.col, st.stride);
                for ch in 0..4 {
                    maps[k][at(ch)] = enc[ch];
                }
                maps[k][at(4)] = mag;
                maps[k][at(5 + p.class)] = mag;
            }
        }
    }
    maps
}

fn bce(logit: f64, target: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

// ---------------------------------------------------------------- assignment

#[test]
fn centred_16px_box_goes_to_the_middle_cell_of_scale_0() {
    let t = assign_targets(&[label(0.5, 0.5, 0.1, 0.1)], 160, &STRIDES);
    assert_eq!(t.num_positives(), 1);
    let p = t.scales[0].positives[0];
    assert_eq!((p.row, p.col), (10, 10));
    assert_eq!(p.bbox, [72.0, 72.0, 88.0, 88.0]);
}

#[test]
fn empty_ground_truth_gives_all_zero_objectness() {
    let t = assign_targets(&[], 160, &STRIDES);
    assert_eq!(t.scales.len(), 3);
    for (st, g) in t.scales.iter().zip([20, 10, 5]) {
        assert_eq!(st.grid, g);
        assert!(st.objectness().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn two_boxes_in_different_cells_give_two_positives() {
    let t = assign_targets(&[label(0.2, 0.2, 0.05, 0.05), label(0.7, 0.6, 0.05, 0.05)], 160, &STRIDES);
    assert_eq!(t.num_positives(), 2);
    let mask = t.scales[0].objectness();
    assert_eq!(mask.iter().sum::<f64>(), 2.0);
    assert_eq!(mask[4 * 20 + 4], 1.0);
    assert_eq!(mask[12 * 20 + 14], 1.0);
}

#[test]
fn scale_choice_matches_a_direct_scan() {
    for dim in 0..200 {
        let d = dim as f64 * 0.75;
        let mut expect = 0;
        for (k, s) in STRIDES.iter().enumerate() {
            if (2 * s) as f64 <= d {
                expect = k;
            }
        }
        assert_eq!(preferred_scale(d, &STRIDES), expect, "max dim {d}");
    }
}

#[test]
fn occupied_cell_falls_back_to_the_neighbouring_scale() {
    let a = label(0.5, 0.5, 0.05, 0.05);
    let t = assign_targets(&[a, a], 160, &STRIDES);
    assert_eq!(t.scales[0].positives.len(), 1);
    assert_eq!(t.scales[1].positives.len(), 1);
    let t = assign_targets(&[a, a, a, a], 160, &STRIDES);
    assert_eq!(t.num_positives(), 3);
    assert_eq!(t.dropped, 1);
}

proptest! {
    #[test]
    fn every_box_is_assigned_once_or_counted_as_dropped(
        boxes in prop::collection::vec((0.01f64..0.99, 0.01f64..0.99, 0.005f64..0.6, 0.005f64..0.6), 0..12)
    ) {
        let gts: Vec<LabelBox> = boxes.iter().map(|&(cx, cy, w, h)| label(cx, cy, w, h)).collect();
        let t = assign_targets(&gts, 160, &STRIDES);
        prop_assert_eq!(t.num_positives() + t.dropped, gts.len());
        for st in &t.scales {
            let mut seen = std::collections::BTreeSet::new();
            for p in &st.positives {
                prop_assert!(seen.insert((p.row, p.col)), "cell used twice");
                let cx = (p.bbox[0] + p.bbox[2]) / 2.0;
                let cy = (p.bbox[1] + p.bbox[3]) / 2.0;
                let s = st.stride as f64;
                prop_assert!(cx >= p.col as f64 * s && cx <= (p.col + 1) as f64 * s);
                prop_assert!(cy >= p.row as f64 * s && cy <= (p.row + 1) as f64 * s);
            }
        }
    }
}

// ---------------------------------------------------------------- decoding

#[test]
fn zero_logits_emit_nothing_at_threshold_0_3() {
    let maps = to_tensors(&filled_maps(1, 1, 160, 0.0), 1, 1, 160);
    assert!(decode(&maps, &STRIDES, 160, 0, 0.3).is_empty());
    let all = decode(&maps, &STRIDES, 160, 0, 0.25);
    assert_eq!(all.len(), cells(160));
    assert!(all.iter().all(|d| (d.confidence - 0.25).abs() < 1e-15));
}

#[test]
fn decoded_sizes_are_capped_at_four_strides() {
    let b = decode_box([0.0, 0.0, 50.0, 50.0], 2, 2, 8, 160);
    assert_eq!(b, [4.0, 4.0, 36.0, 36.0]);
    // Centre (16, 16), width capped at the 64 px image, then clipped.
    let b = decode_box([0.0, 0.0, 50.0, 50.0], 0, 0, 32, 64);
    assert_eq!(b, [0.0, 0.0, 48.0, 48.0]);
}

proptest! {
    #[test]
    fn encode_then_decode_recovers_the_box(
        boxes in prop::collection::vec((0.15f64..0.85, 0.15f64..0.85, 0.004f64..0.25, 0.004f64..0.25), 1..6)
    ) {
        let gts: Vec<LabelBox> = boxes.iter().map(|&(cx, cy, w, h)| label(cx, cy, w, h)).collect();
        let t = assign_targets(&gts, 160, &STRIDES);
        let maps = to_tensors(&ideal_maps(std::slice::from_ref(&t), 1, 160, 12.0), 1, 1, 160);
        let dets = decode(&maps, &STRIDES, 160, 0, 0.5);
        prop_assert_eq!(dets.len(), t.num_positives());
        for st in &t.scales {
            for p in &st.positives {
                let hit = dets.iter().any(|d| d.bbox.iter().zip(&p.bbox).all(|(a, b)| (a - b).abs() <= 1.0));
                prop_assert!(hit, "no detection within 1 px of {:?}", p.bbox);
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_detections(seed in 0u64..1000, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut maps = filled_maps(2, 2, 64, 0.0);
        for m in &mut maps {
            for v in m.iter_mut() {
                *v = rng.random_range(-4.0..4.0);
            }
        }
        let maps = to_tensors(&maps, 2, 2, 64);
        for n in 0..2 {
            let a = decode(&maps, &STRIDES, 64, n, lo);
            let b = decode(&maps, &STRIDES, 64, n, hi);
            prop_assert!(b.len() <= a.len());
            prop_assert!(b.iter().all(|d| a.contains(d)));
        }
        let a = postprocess(&maps, &STRIDES, 64, lo, 0.5);
        let b = postprocess(&maps, &STRIDES, 64, hi, 0.5);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y.len() <= x.len());
        }
    }
}

// ---------------------------------------------------------------- loss

#[test]
fn zero_logits_on_an_empty_image_cost_ln2_per_cell() {
    let w = LossWeights::default();
    for n in [1, 3] {
        let maps = to_tensors(&filled_maps(n, 1, 160, 0.0), n, 1, 160);
        let targets = vec![assign_targets(&[], 160, &STRIDES); n];
        let parts = detection_loss(&maps, &targets, &w).unwrap();
        let expect = w.obj * LN2 * cells(160) as f64;
        assert!((parts.total.item().unwrap() - expect).abs() < 1e-9 * expect);
        assert_eq!((parts.bbox, parts.cls), (0.0, 0.0));
    }
}

#[test]
fn saturated_ideal_logits_drive_the_loss_to_zero() {
    let frames: Vec<_> = (0..4).map(|i| generate_frame(&GenConfig::default(), i)).collect();
    let targets: Vec<TargetMap> = frames.iter().map(|f| assign_targets(&f.boxes, 160, &STRIDES)).collect();
    assert!(targets.iter().map(TargetMap::num_positives).sum::<usize>() > 0);
    let w = LossWeights::default();
    let loss = |mag: f64| {
        let maps = to_tensors(&ideal_maps(&targets, 1, 160, mag), 4, 1, 160);
        detection_loss(&maps, &targets, &w).unwrap().total.item().unwrap()
    };
    // Magnitude 10: every cell costs about ln(1 + e^-10) = 4.5e-5.
    assert!(loss(10.0) / (cells(160) as f64) < 1e-3);
    assert!(loss(20.0) < 1e-3);
    assert!(loss(20.0) < loss(10.0) && loss(10.0) < loss(5.0));
}

/// Independent scalar evaluation of the loss on the raw map values.
fn reference_loss(maps: &[Vec<f64>], targets: &[TargetMap], classes: usize, size: usize, w: &LossWeights) -> f64 {
    let c = 5 + classes;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (mut obj, mut bx, mut cl, mut npos) = (0.0, 0.0, 0.0, 0usize);
    for (i, t) in targets.iter().enumerate() {
        for (k, st) in t.scales.iter().enumerate() {
            let g = size / STRIDES[k];
            let s = STRIDES[k] as f64;
            let mask = st.objectness();
            for cell in 0..g * g {
                obj += bce(maps[k][(i * c + 4) * g * g + cell], mask[cell]);
            }
            for p in &st.positives {
                let at = |ch: usize| maps[k][(i * c + ch) * g * g + p.row * g + p.col];
                let cx = (p.col as f64 + sig(at(0))) * s;
                let cy = (p.row as f64 + sig(at(1))) * s;
                let pw = s * at(2).min(MAX_SIZE_LOGIT).exp();
                let ph = s * at(3).min(MAX_SIZE_LOGIT).exp();
                let pred = [cx - pw / 2.0, cy - ph / 2.0, cx + pw / 2.0, cy + ph / 2.0];
                let g_box = p.bbox;
                let mut term = 1.0 - iou(&pred, &g_box);
                if w.center_penalty {
                    let gcx = (g_box[0] + g_box[2]) / 2.0;
                    let gcy = (g_box[1] + g_box[3]) / 2.0;
                    term += ((cx - gcx) / (g_box[2] - g_box[0])).powi(2) + ((cy - gcy) / (g_box[3] - g_box[1])).powi(2);
                }
                if w.size_penalty {
                    let gw = (g_box[2] - g_box[0]).min(s * 4.0);
                    let gh = (g_box[3] - g_box[1]).min(s * 4.0);
                    term += (pw / gw).ln().powi(2) + (ph / gh).ln().powi(2);
                }
                bx += term;
                for j in 0..classes {
                    cl += bce(at(5 + j), if p.class == j { 1.0 } else { 0.0 });
                }
                npos += 1;
            }
        }
    }
    let mut total = w.obj * obj / targets.len() as f64;
    if npos > 0 {
        total += w.bbox * bx / npos as f64 + w.cls * cl / (npos * classes) as f64;
    }
    total
}

fn random_case(seed: u64, size: usize, n: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<TargetMap>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = filled_maps(n, classes, size, 0.0);
    for m in &mut maps {
        for v in m.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let targets = (0..n)
        .map(|_| {
            let gts: Vec<LabelBox> = (0..rng.random_range(1..4))
                .map(|_| {
                    let w = rng.random_range(2.0..30.0) / size as f64;
                    let h = rng.random_range(2.0..30.0) / size as f64;
                    LabelBox {
                        class: rng.random_range(0..classes),
                        cx: rng.random_range(0.2..0.8),
                        cy: rng.random_range(0.2..0.8),
                        w,
                        h,
                    }
                })
                .collect();
            assign_targets(&gts, size, &STRIDES)
        })
        .collect();
    (maps, targets)
}

#[test]
fn loss_matches_a_scalar_reference() {
    for seed in 0..20 {
        for (center_penalty, size_penalty) in [(false, false), (true, false), (false, true), (true, true)] {
            let w = LossWeights { center_penalty, size_penalty, ..LossWeights::default() };
            let (maps, targets) = random_case(seed, 64, 2, 3);
            let parts = detection_loss(&to_tensors(&maps, 2, 3, 64), &targets, &w).unwrap();
            let reference = reference_loss(&maps, &targets, 3, 64, &w);
            let got = parts.total.item().unwrap();
            assert!((got - reference).abs() < 1e-12 * reference.max(1.0), "seed {seed}: {got} vs {reference}");
            let recombined = w.bbox * parts.bbox + w.obj * parts.obj + w.cls * parts.cls;
            assert!((got - recombined).abs() < 1e-12 * got);
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let w = LossWeights::default();
    for seed in 0..5 {
        let (maps, targets) = random_case(100 + seed, 64, 2, 2);
        for k in 0..3 {
            let point = to_tensors(&maps, 2, 2, 64)[k].clone();
            let check = finite_diff_check(
                |x| {
                    let mut ts = to_tensors(&maps, 2, 2, 64);
                    ts[k] = x.clone();
                    Ok(detection_loss(&ts, &targets, &w)?.total)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "seed {seed} scale {k}: {}", check.max_rel_error);
        }
    }
}

#[test]
fn size_logits_above_the_cap_get_a_straight_through_gradient() {
    let targets = vec![assign_targets(&[label(0.5, 0.5, 0.1, 0.1)], 64, &STRIDES)];
    let st = &targets[0].scales[0];
    let (p, g) = (st.positives[0], st.grid);
    let at = 2 * g * g + p.row * g + p.col;
    let run = |tw: f64| {
        let mut maps = filled_maps(1, 1, 64, 0.0);
        maps[0][at] = tw;
        let mut ts = to_tensors(&maps, 1, 1, 64);
        ts[0] = ts[0].requires_grad();
        let loss = detection_loss(&ts, &targets, &LossWeights::default()).unwrap().total;
        loss.backward().unwrap();
        (loss.item().unwrap(), ts[0].grad().unwrap()[at])
    };
    let (at_cap, grad_at_cap) = run(MAX_SIZE_LOGIT);
    let (above, grad_above) = run(3.0);
    assert_eq!(above, at_cap);
    assert_eq!(grad_above, grad_at_cap);
    // The box is far smaller than the capped prediction, so the push is downward.
    assert!(grad_above > 0.0, "{grad_above}");
}

#[test]
fn a_collapsed_side_still_gets_pulled_back() {
    let targets = vec![assign_targets(&[label(0.5, 0.5, 0.1, 0.1)], 64, &STRIDES)];
    let st = &targets[0].scales[0];
    let (p, g) = (st.positives[0], st.grid);
    let at = 3 * g * g + p.row * g + p.col;
    let grad = |size_penalty: bool| {
        let mut maps = filled_maps(1, 1, 64, 0.0);
        maps[0][at] = -12.0;
        let mut ts = to_tensors(&maps, 1, 1, 64);
        ts[0] = ts[0].requires_grad();
        let w = LossWeights { size_penalty, ..LossWeights::default() };
        detection_loss(&ts, &targets, &w).unwrap().total.backward().unwrap();
        ts[0].grad().unwrap()[at]
    };
    assert!(grad(false).abs() < 1e-3, "{}", grad(false));
    // 2 * (-12 - ln(6.4 / 8)) * w_box for the single positive.
    let want = 2.0 * (-12.0 - (6.4f64 / 8.0).ln()) * LossWeights::default().bbox;
    assert!((grad(true) - want).abs() < 1e-3 * want.abs(), "{} vs {want}", grad(true));
}

proptest! {
    #[test]
    fn loss_is_non_negative(seed in 0u64..500) {
        let (maps, targets) = random_case(seed, 64, 2, 2);
        let parts = detection_loss(&to_tensors(&maps, 2, 2, 64), &targets, &LossWeights::default()).unwrap();
        prop_assert!(parts.total.item().unwrap() >= 0.0);
        prop_assert!(parts.bbox >= 0.0 && parts.obj >= 0.0 && parts.cls >= 0.0);
    }
}

#[test]
fn empty_image_loss_falls_as_objectness_moves_down() {
    let targets = vec![assign_targets(&[], 64, &STRIDES)];
    let mut last = f64::INFINITY;
    for step in 0..8 {
        let maps = to_tensors(&filled_maps(1, 1, 64, 1.0 - step as f64), 1, 1, 64);
        let v = detection_loss(&maps, &targets, &LossWeights::default()).unwrap().total.item().unwrap();
        assert!(v < last);
        last = v;
    }
}

#[test]
fn non_finite_logits_name_the_term() {
    let targets = vec![assign_targets(&[label(0.5, 0.5, 0.1, 0.1)], 64, &STRIDES)];
    let mut maps = filled_maps(1, 1, 64, 0.0);
    maps[0][4 * 64] = f64::NAN;
    let err = detection_loss(&to_tensors(&maps, 1, 1, 64), &targets, &LossWeights::default()).unwrap_err();
    assert!(err.to_string().contains("obj"), "{err}");

    let mut maps = filled_maps(1, 1, 64, 0.0);
    let p = targets[0].scales[0].positives[0];
    maps[0][8 * 8 * 5 + p.row * 8 + p.col] = f64::NAN;
    let err = detection_loss(&to_tensors(&maps, 1, 1, 64), &targets, &LossWeights::default()).unwrap_err();
    assert!(err.to_string().contains("cls"), "{err}");
}

#[test]
fn mismatched_targets_are_rejected() {
    let maps = to_tensors(&filled_maps(2, 1, 64, 0.0), 2, 1, 64);
    let targets = vec![assign_targets(&[], 64, &STRIDES)];
    assert!(matches!(detection_loss(&maps, &targets, &LossWeights::default()), Err(Error::Shape { .. })));
    let targets = vec![assign_targets(&[], 96, &STRIDES); 2];
    assert!(detection_loss(&maps, &targets, &LossWeights::default()).is_err());
}

// ---------------------------------------------------------------- training

fn tiny_spec() -> ModelSpec {
    ModelSpec { input_size: 64, width: 0.5, ..ModelSpec::new(Variant::GelanVitSe) }
}

fn tiny_data(n: usize) -> Vec<Sample> {
    let cfg = GenConfig { image_size: 64, seed: 5, ..GenConfig::default() };
    (0..n).map(|i| Sample::from_frame(&generate_frame(&cfg, i), &STRIDES).unwrap()).collect()
}

fn learnable(m: &Model) -> Vec<(String, Vec<f64>)> {
    m.params.learnable().map(|(k, p)| (k.to_string(), p.value.to_vec())).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = tiny_data(4);
    let mut model = Model::build(&tiny_spec(), 1).unwrap();
    let before = learnable(&model);
    let mut cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
    cfg.optimizer.lr = 0.0;
    train(&mut model, &data, &cfg).unwrap();
    assert_eq!(before, learnable(&model));

    cfg.optimizer.lr = 1e-3;
    train(&mut model, &data, &cfg).unwrap();
    assert_ne!(before, learnable(&model));
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let data = tiny_data(4);
    let cfg = TrainConfig { epochs: 3, batch_size: 2, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut model = Model::build(&tiny_spec(), 2).unwrap();
        let log = train(&mut model, &data, &cfg).unwrap();
        (log, learnable(&model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.epoch, i + 1);
        assert!(row.loss.is_finite() && row.loss > 0.0);
    }
}

#[test]
fn sgd_runs_and_is_deterministic() {
    let data = tiny_data(2);
    let mut cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
    cfg.optimizer.kind = OptimizerKind::Sgd;
    cfg.optimizer.lr = 1e-3;
    let mut a = Model::build(&tiny_spec(), 3).unwrap();
    let mut b = Model::build(&tiny_spec(), 3).unwrap();
    assert_eq!(train(&mut a, &data, &cfg).unwrap(), train(&mut b, &data, &cfg).unwrap());
}

#[test]
fn training_reduces_the_loss_on_a_fixed_batch() {
    let data = tiny_data(2);
    let mut model = Model::build(&tiny_spec(), 4).unwrap();
    let mut cfg = TrainConfig { epochs: 40, batch_size: 2, ..TrainConfig::default() };
    cfg.optimizer.lr = 5e-3;
    let log = train(&mut model, &data, &cfg).unwrap();
    assert!(log.last().unwrap().loss < 0.5 * log[0].loss, "{:?}", log.iter().map(|r| r.loss).collect::<Vec<_>>());
}

#[test]
fn non_finite_input_aborts_with_the_epoch() {
    let mut data = tiny_data(2);
    data[1].pixels[0] = f64::NAN;
    let mut model = Model::build(&tiny_spec(), 5).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() };
    match train(&mut model, &data, &cfg) {
        Err(Error::Diverged { epoch, term }) => {
            assert_eq!(epoch, 1);
            assert!(!term.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Trainer::new(TrainConfig { epochs: 0, ..TrainConfig::default() }).is_err());
    assert!(Trainer::new(TrainConfig { batch_size: 0, ..TrainConfig::default() }).is_err());
    let mut cfg = TrainConfig::default();
    cfg.optimizer.lr = f64::NAN;
    assert!(Trainer::new(cfg).is_err());
    let mut model = Model::build(&tiny_spec(), 0).unwrap();
    assert!(train(&mut model, &[], &TrainConfig::default()).is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(4);
    let cfg = TrainConfig { epochs: 3, batch_size: 2, seed: 4, ..TrainConfig::default() };

    let mut straight = Model::build(&tiny_spec(), 6).unwrap();
    let full = train(&mut straight, &data, &cfg).unwrap();

    let mut model = Model::build(&tiny_spec(), 6).unwrap();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.train_epoch(&mut model, &data).unwrap();
    trainer.train_epoch(&mut model, &data).unwrap();
    let ckpt = dir.path().join("run.sodw");
    save_checkpoint(&ckpt, &model, &trainer, 6).unwrap();

    let (mut resumed, mut t2) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(t2.epoch, 2);
    assert_eq!(t2.optimizer, trainer.optimizer);
    let last = t2.train_epoch(&mut resumed, &data).unwrap();
    assert_eq!(last, full[2]);
    assert_eq!(learnable(&resumed), learnable(&straight));
}

#[test]
fn log_csv_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(2);
    let mut model = Model::build(&tiny_spec(), 7).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, eval_every: 2, ..TrainConfig::default() };
    let log = train(&mut model, &data, &cfg).unwrap();
    assert!(log[0].map50.is_none());
    assert!(log[1].map50.is_some_and(|m| (0.0..=1.0).contains(&m)));
    let path = dir.path().join("log.csv");
    write_log_csv(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(','));
    assert_eq!(lines[2].split(',').count(), 7);
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.epochs, cfg.batch_size, cfg.optimizer.kind), (300, 8, OptimizerKind::Adam));
    assert_eq!((cfg.loss.bbox, cfg.loss.obj, cfg.loss.cls), (5.0, 1.0, 0.5));
    assert_eq!((cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2), (1e-3, 0.9, 0.999));
    let text = serde_json::to_string(&cfg).unwrap();
    assert!(text.contains("\"box\":5.0"));
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "optimizer": {"kind": "sgd"}}"#).unwrap();
    assert_eq!(partial.epochs, 5);
    assert_eq!(partial.optimizer.kind, OptimizerKind::Sgd);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
}

#[test]
fn evaluate_scores_a_blank_image_set() {
    let img = RgbImage::new(64, 64);
    let samples = vec![Sample::new(&img, vec![label(0.5, 0.5, 0.2, 0.2)], &STRIDES).unwrap()];
    let model = Model::build(&tiny_spec(), 8).unwrap();
    let report = evaluate(&model, &samples, 0.001, 0.5).unwrap();
    assert_eq!(report.images, 1);
    assert_eq!(report.ground_truths, 1);
    assert!((0.0..=1.0).contains(&report.map50));
}

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sod_core::model::{count_flops, Model, ModelSpec, Variant};
use sod_core::Tensor;

fn build(v: Variant, seed: u64) -> Model {
    Model::build(&ModelSpec::new(v), seed).unwrap()
}

fn random_images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, 3, 160, 160], (0..n * 3 * 160 * 160).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn names(m: &Model) -> BTreeSet<String> {
    m.params.names().map(String::from).collect()
}

#[test]
fn every_variant_emits_three_maps_of_the_same_shape() {
    let x = random_images(1, 0);
    for v in Variant::ALL {
        let out = build(v, 1).predict(&x).unwrap();
        let shapes: Vec<Vec<usize>> = out.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 6, 20, 20], vec![1, 6, 10, 10], vec![1, 6, 5, 5]], "{v}");
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    for v in Variant::ALL {
        let (a, b) = (build(v, 7), build(v, 7));
        let c = build(v, 8);
        let mut differs = false;
        for (name, p) in a.params.iter() {
            let q = b.params.get(name).unwrap();
            assert!(p.value.iter().zip(q.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
            differs |= p.value != c.params.get(name).unwrap().value;
        }
        assert!(differs);
    }
}

#[test]
fn se_variant_only_adds_se_parameters() {
    for seed in 0..4 {
        let vit = build(Variant::GelanVit, seed);
        let se = build(Variant::GelanVitSe, seed);
        let (a, b) = (names(&vit), names(&se));
        assert!(a.is_subset(&b));
        let extra: Vec<&String> = b.difference(&a).collect();
        assert_eq!(extra.len(), 8);
        for n in &extra {
            assert!(n.starts_with("neck.h4.se.") || n.starts_with("neck.h5.se."), "{n}");
        }
        for n in &a {
            assert_eq!(vit.params.get(n).unwrap().value, se.params.get(n).unwrap().value, "{n}");
        }
    }
}

#[test]
fn vit_variant_only_adds_the_branch_and_fusion_conv() {
    let t = names(&build(Variant::GelanT, 0));
    let v = names(&build(Variant::GelanVit, 0));
    assert!(t.is_subset(&v));
    assert!(v.difference(&t).all(|n| n.starts_with("vit.") || n.starts_with("vit_fuse.")));
}

#[test]
fn se_flops_delta_matches_closed_form() {
    let vit = build(Variant::GelanVit, 0);
    let se = build(Variant::GelanVitSe, 0);
    let [_, _, _, c3, c4] = se.spec.widths();
    // Channels entering the gate are c3 + 2 * (c3 / 2) for h4 (10x10) and 2 * c4 for h5 (5x5).
    let gate = |c: u64, hw: u64| 2 * c * hw + 2 * c * (c / 4) * 2;
    let expected = gate(2 * c3 as u64, 100) + gate(2 * c4 as u64, 25);
    let delta = se.flops().total() - vit.flops().total();
    assert_eq!(delta, expected);
    assert_eq!(se.flops().total_matching("se"), expected);
    assert!((delta as f64) < 0.005 * se.flops().total() as f64);
}

#[test]
fn vit_flops_delta_is_the_branch_plus_fusion() {
    let t = build(Variant::GelanT, 0);
    let v = build(Variant::GelanVit, 0);
    let branch: u64 = v
        .flops()
        .entries
        .iter()
        .filter(|(n, _)| n.starts_with("vit.") || n == "vit_fuse")
        .map(|(_, f)| f)
        .sum();
    assert_eq!(v.flops().total() - t.flops().total(), branch);
}

#[test]
fn flops_ignore_parameter_values_and_are_additive() {
    let mut m = build(Variant::GelanVitSe, 0);
    let before = count_flops(&m);
    m.params.fill_learnable(3.0);
    assert_eq!(count_flops(&m), before);
    assert_eq!(before.total(), before.entries.iter().map(|(_, f)| f).sum::<u64>());
    let g = before.gflops();
    assert!(g > 0.03 && g < 0.08, "{g}");
}

#[test]
fn zero_input_and_weights_give_zero_logits() {
    for v in Variant::ALL {
        let mut m = build(v, 0);
        m.params.fill_learnable(0.0);
        for t in m.predict(&Tensor::zeros(&[1, 3, 160, 160])).unwrap() {
            assert!(t.data().iter().all(|&x| x == 0.0), "{v}");
        }
    }
}

#[test]
fn batching_is_consistent_in_infer_mode() {
    let m = build(Variant::GelanVitSe, 3);
    let x = random_images(2, 4);
    let a = Tensor::from_vec(&[1, 3, 160, 160], x.data()[..76800].to_vec()).unwrap();
    let b = Tensor::from_vec(&[1, 3, 160, 160], x.data()[76800..].to_vec()).unwrap();
    let both = m.predict(&x).unwrap();
    let (oa, ob) = (m.predict(&a).unwrap(), m.predict(&b).unwrap());
    for s in 0..3 {
        let stacked: Vec<f64> = oa[s].data().iter().chain(ob[s].data()).copied().collect();
        for (p, q) in both[s].data().iter().zip(&stacked) {
            assert!((p - q).abs() <= 1e-10);
        }
    }
}

#[test]
fn infer_forward_is_pure() {
    let m = build(Variant::GelanVit, 5);
    let x = random_images(1, 6);
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn wrong_input_size_is_rejected() {
    let m = build(Variant::GelanT, 0);
    assert!(m.predict(&Tensor::zeros(&[1, 3, 128, 128])).is_err());
    assert!(m.predict(&Tensor::zeros(&[1, 1, 160, 160])).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = ModelSpec::new(Variant::GelanVitSe);
    s.input_size = 100;
    assert!(Model::build(&s, 0).is_err());
    let mut s = ModelSpec::new(Variant::GelanT);
    s.strides = vec![4, 8, 16];
    assert!(Model::build(&s, 0).is_err());
    let mut s = ModelSpec::new(Variant::GelanVit);
    s.vit.patch = 3;
    assert!(Model::build(&s, 0).is_err());
}

#[test]
fn smaller_patch_reads_a_deeper_map() {
    for patch in [1, 2] {
        let mut s = ModelSpec::new(Variant::GelanVitSe);
        s.input_size = 64;
        s.vit.patch = patch;
        let m = Model::build(&s, 0).unwrap();
        let out = m.predict(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(out[2].shape(), &[1, 6, 2, 2]);
    }
}

#[test]
fn spec_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.json");
    let mut s = ModelSpec::new(Variant::GelanT);
    s.width = 0.5;
    std::fs::write(&path, serde_json::to_string_pretty(&s).unwrap()).unwrap();
    assert_eq!(ModelSpec::from_json_file(&path).unwrap(), s);

    std::fs::write(&path, r#"{"variant": "gelan_vit"}"#).unwrap();
    let partial = ModelSpec::from_json_file(&path).unwrap();
    assert_eq!(partial.variant, Variant::GelanVit);
    assert_eq!(partial.input_size, 160);

    std::fs::write(&path, r#"{"variant": "gelan_x"}"#).unwrap();
    assert!(ModelSpec::from_json_file(&path).is_err());
    assert_eq!("GELAN-ViT-SE".parse::<Variant>().unwrap(), Variant::GelanVitSe);
}

#[test]
fn weights_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.sodw");
    let a = build(Variant::GelanVitSe, 1);
    a.save_weights(&path).unwrap();
    let mut b = build(Variant::GelanVitSe, 2);
    b.load_weights(&path).unwrap();
    for (name, p) in a.params.iter() {
        assert_eq!(p.value, b.params.get(name).unwrap().value);
    }
    let mut t = build(Variant::GelanT, 0);
    assert!(t.load_weights(&path).is_ok(), "extra records are ignored");
    let t_path = dir.path().join("t.sodw");
    t.save_weights(&t_path).unwrap();
    assert!(b.load_weights(&t_path).is_err());
}

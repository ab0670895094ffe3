use super::*;
use crate::numerics::grad_check;
use proptest::prelude::{prop_assert_eq, proptest};

fn registry_with(classes: usize, dim: usize, rng: &mut Rng) -> PrototypeRegistry {
    let mut reg = PrototypeRegistry::new(classes, 0, dim);
    for c in 0..classes {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal().abs() + 0.5).collect();
        reg.update(c, &v).unwrap();
    }
    reg
}

/// True when some gradient entry is nonzero but below the finite-difference
/// noise floor; relative error is meaningless there.
fn has_flat_direction(grad: &[f64]) -> bool {
    grad.iter().any(|g| *g != 0.0 && g.abs() < 1e-7)
}

fn min_abs_preactivation(h: &Hallucinator, inputs: &Matrix) -> f64 {
    let (_, cache) = h.forward(inputs).unwrap();
    cache
        .layers
        .iter()
        .take(cache.layers.len() - 1)
        .flat_map(|c| c.preactivation.as_slice().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn architecture_shapes() {
    let mut rng = Rng::new(0, "arch");
    let c = init_hallucinator(8, Variant::Conservative, 0.02, &mut rng).unwrap();
    let a = init_hallucinator(8, Variant::Aggressive, 0.02, &mut rng).unwrap();
    assert_eq!(c.layers().len(), 2);
    assert_eq!(a.layers().len(), 3);
    for h in [&c, &a] {
        assert_eq!(h.layers()[0].input_dim(), 24);
        assert!(h.layers().iter().all(|l| l.output_dim() == 8));
    }
    assert!(init_hallucinator(0, Variant::Conservative, 0.0, &mut rng).is_err());
}

proptest! {
    #[test]
    fn identity_init_reproduces_nonnegative_seeds(
        seed in proptest::collection::vec(0.0f64..50.0, 6),
        proto in proptest::collection::vec(-5.0f64..5.0, 6),
        variant in proptest::sample::select(vec![Variant::Conservative, Variant::Aggressive]),
    ) {
        let h = init_hallucinator(6, variant, 0.0, &mut Rng::new(0, "id")).unwrap();
        let mut reg = PrototypeRegistry::new(1, 0, 6);
        reg.update(0, &proto).unwrap();
        let f = LabeledFeature::real(seed.clone(), Label::Class(0));
        let out = hallucinate(&h, &reg, &f, &NoiseSpec::zero(6), &mut Rng::new(0, "n")).unwrap();
        prop_assert_eq!(out.vector, seed);
        prop_assert_eq!(out.label, Label::Class(0));
        prop_assert_eq!(out.origin, Origin::Hallucinated);
    }
}

#[test]
fn init_noise_has_requested_spread() {
    let h = init_hallucinator(64, Variant::Conservative, 0.02, &mut Rng::new(1, "init")).unwrap();
    let mut off = Vec::new();
    for (li, layer) in h.layers().iter().enumerate() {
        for r in 0..layer.weights.rows() {
            for c in 0..layer.weights.cols() {
                let on_identity = if li == 0 { c == 64 + r } else { c == r };
                if !on_identity {
                    off.push(layer.weights.get(r, c));
                }
            }
        }
    }
    assert!(off.len() > 10_000);
    let n = off.len() as f64;
    let mean = off.iter().sum::<f64>() / n;
    let std = (off.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - 0.02).abs() < 0.02 * 0.03, "{std}");
    assert!(h.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));

    let again = init_hallucinator(64, Variant::Conservative, 0.02, &mut Rng::new(1, "init")).unwrap();
    assert_eq!(h, again);
}

#[test]
fn initial_hallucinations_stay_near_seed() {
    let d = 32;
    let mut rng = Rng::new(2, "near");
    // Typical post-ReLU features: nonnegative, moderate spread.
    let feats: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..d).map(|_| (1.0 + rng.normal()).max(0.0)).collect())
        .collect();
    let noise = fit_noise_spec(&feats).unwrap();
    let mut reg = PrototypeRegistry::new(1, 0, d);
    for f in &feats[..50] {
        reg.update(0, f).unwrap();
    }
    let h = init_hallucinator(d, Variant::Conservative, 0.02, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    for f in &feats[100..300] {
        let seed = LabeledFeature::real(f.clone(), Label::Class(0));
        let out = hallucinate(&h, &reg, &seed, &noise, &mut rng).unwrap();
        let diff: f64 = out.vector.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    assert!(worst < 0.5, "{worst}");
}

#[test]
fn hallucinate_contracts() {
    let h = init_hallucinator(3, Variant::Conservative, 0.0, &mut Rng::new(0, "c")).unwrap();
    let reg = PrototypeRegistry::new(2, 0, 3);
    let seed = LabeledFeature::real(vec![1.0; 3], Label::Class(1));
    assert!(matches!(
        hallucinate(&h, &reg, &seed, &NoiseSpec::zero(3), &mut Rng::new(0, "n")),
        Err(Error::Contract(_))
    ));
    let bg = LabeledFeature::real(vec![1.0; 3], Label::Background);
    assert!(matches!(
        hallucinate(&h, &reg, &bg, &NoiseSpec::zero(3), &mut Rng::new(0, "n")),
        Err(Error::Contract(_))
    ));
}

#[test]
fn noise_spec_fitting() {
    let spec = fit_noise_spec(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
    assert_eq!(spec.mean, vec![1.0, 1.0]);
    assert!((spec.std[0] - 2f64.sqrt()).abs() < 1e-15);
    let flat = fit_noise_spec(&[[3.0, -1.0]; 5]).unwrap();
    assert_eq!(flat.std, vec![0.0, 0.0]);
    assert!(fit_noise_spec(&[vec![1.0]]).is_err());

    // Two-pass oracle on a large set.
    let mut rng = Rng::new(4, "noise");
    let feats: Vec<Vec<f64>> = (0..5000)
        .map(|_| (0..4).map(|i| 100.0 * i as f64 + rng.normal() * (i + 1) as f64).collect())
        .collect();
    let spec = fit_noise_spec(&feats).unwrap();
    for i in 0..4 {
        let mean = feats.iter().map(|f| f[i]).sum::<f64>() / 5000.0;
        let var = feats.iter().map(|f| (f[i] - mean).powi(2)).sum::<f64>() / 4999.0;
        assert!((spec.mean[i] - mean).abs() < 1e-9);
        assert!((spec.std[i] - var.sqrt()).abs() < 1e-9);
    }
}

fn random_setup(seed: u64, variant: Variant) -> (Hallucinator, ClassifierHead, HallucinationInputs) {
    let d = 5;
    let mut rng = Rng::new(seed, "hl");
    let h = init_hallucinator(d, variant, 0.3, &mut rng).unwrap();
    let head = ClassifierHead::new(HeadKind::Cosine, 3, d, 5.0, 1.0, &mut rng);
    let reg = registry_with(3, d, &mut rng);
    let noise = NoiseSpec {
        mean: vec![0.5; d],
        std: vec![0.5; d],
    };
    let seeds: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(d, 1.0)).collect();
    let requests: Vec<(usize, &[f64])> = seeds.iter().enumerate().map(|(i, s)| (i % 3, s.as_slice())).collect();
    let inputs = HallucinationInputs::build(&reg, &requests, &noise, &mut rng).unwrap();
    (h, head, inputs)
}

#[test]
fn hallucination_loss_uniform_head() {
    let (h, _, inputs) = random_setup(0, Variant::Conservative);
    let head = ClassifierHead {
        kind: HeadKind::FullyConnected,
        weights: Matrix::zeros(4, 5),
        scale: 1.0,
    };
    let (loss, _) = hallucination_loss(&h, None, &head, &inputs).unwrap();
    assert!((loss - 6.0 * 4f64.ln()).abs() < 1e-12);
    let empty = HallucinationInputs {
        inputs: Matrix::zeros(0, 15),
        classes: vec![],
    };
    assert!(matches!(hallucination_loss(&h, None, &head, &empty), Err(Error::Argument(_))));
}

#[test]
fn hallucination_loss_gradients() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        seed += 1;
        let variant = if seed % 2 == 0 { Variant::Conservative } else { Variant::Aggressive };
        let (h, head, inputs) = random_setup(seed, variant);
        // Cosine logits are undefined at the origin; skip points whose output collapsed there.
        let collapsed = h.apply(&inputs.inputs).unwrap().row_iter().any(|r| r.iter().all(|v| v.abs() < 1e-6));
        let (_, g) = hallucination_loss(&h, None, &head, &inputs).unwrap();
        if min_abs_preactivation(&h, &inputs.inputs) < 1e-3 || collapsed || has_flat_direction(&g.flatten()) {
            continue;
        }
        let head_before = head.clone();
        let err = grad_check(
            |p| {
                let mut hh = h.clone();
                hh.load(p);
                let (l, g) = hallucination_loss(&hh, None, &head, &inputs)?;
                Ok((l, g.flatten()))
            },
            &h.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
        assert_eq!(head, head_before);
        checked += 1;
    }
}

#[test]
fn hallucination_loss_through_frozen_transform() {
    let (h, head, inputs) = random_setup(3, Variant::Aggressive);
    let t = Affine::new(
        Matrix::from_vec(5, 5, Rng::new(3, "t").normal_vec(25, 0.6)).unwrap(),
        vec![0.4; 5],
    )
    .unwrap();
    let err = grad_check(
        |p| {
            let mut hh = h.clone();
            hh.load(p);
            let (l, g) = hallucination_loss(&hh, Some(&t), &head, &inputs)?;
            Ok((l, g.flatten()))
        },
        &h.flatten(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

struct AggressiveCase {
    h: Hallucinator,
    t: Affine,
    val: Matrix,
    val_classes: Vec<usize>,
    halluc: HallucinationInputs,
}

fn aggressive_case(seed: u64) -> AggressiveCase {
    let d = 4;
    let mut rng = Rng::new(seed, "agg");
    let h = init_hallucinator(d, Variant::Aggressive, 0.3, &mut rng).unwrap();
    let t = Affine::new(
        Matrix::from_vec(d, d, rng.normal_vec(d * d, 0.7)).unwrap(),
        vec![0.5; d],
    )
    .unwrap();
    let reg = registry_with(3, d, &mut rng);
    let noise = NoiseSpec {
        mean: vec![0.2; d],
        std: vec![0.4; d],
    };
    let seeds: Vec<Vec<f64>> = (0..9).map(|_| rng.normal_vec(d, 1.0)).collect();
    let requests: Vec<(usize, &[f64])> = seeds.iter().enumerate().map(|(i, s)| (i % 3, s.as_slice())).collect();
    let halluc = HallucinationInputs::build(&reg, &requests, &noise, &mut rng).unwrap();
    let val = Matrix::from_vec(6, d, rng.normal_vec(6 * d, 1.0)).unwrap();
    AggressiveCase {
        h,
        t,
        val,
        val_classes: vec![0, 1, 2, 2, 1, 0],
        halluc,
    }
}

#[test]
fn aggressive_loss_gradients() {
    let mut checked = 0;
    let mut seed = 100;
    while checked < 20 {
        seed += 1;
        let c = aggressive_case(seed);
        let (gen, _) = c.h.forward(&c.halluc.inputs).unwrap();
        let (_, tc1) = c.t.forward(&gen, Activation::Relu).unwrap();
        let (_, tc2) = c.t.forward(&c.val, Activation::Relu).unwrap();
        let t_min = tc1
            .preactivation
            .as_slice()
            .iter()
            .chain(tc2.preactivation.as_slice())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let (_, gh, _) = aggressive_prototypical_loss(&c.h, &c.t, &c.val, &c.val_classes, &c.halluc, 4.0).unwrap();
        if min_abs_preactivation(&c.h, &c.halluc.inputs) < 1e-3 || t_min < 1e-3 || has_flat_direction(&gh.flatten()) {
            continue;
        }
        let nh = c.h.param_count();
        let mut params = c.h.flatten();
        c.t.flatten_into(&mut params);
        let err = grad_check(
            |p| {
                let mut hh = c.h.clone();
                hh.load(&p[..nh]);
                let mut tt = c.t.clone();
                tt.load_from(&p[nh..]);
                let (l, gh, gt) = aggressive_prototypical_loss(&hh, &tt, &c.val, &c.val_classes, &c.halluc, 4.0)?;
                let mut g = gh.flatten();
                gt.flatten_into(&mut g);
                Ok((l, g))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
        checked += 1;
    }
}

#[test]
fn aggressive_loss_aligned_case_is_small() {
    let d = 3;
    let h = init_hallucinator(d, Variant::Aggressive, 0.0, &mut Rng::new(0, "a")).unwrap();
    let t = Affine::new(Matrix::identity(d), vec![0.0; d]).unwrap();
    let mut reg = PrototypeRegistry::new(3, 0, d);
    let basis = [[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]];
    for (c, b) in basis.iter().enumerate() {
        reg.update(c, b).unwrap();
    }
    let requests: Vec<(usize, &[f64])> = basis.iter().enumerate().map(|(c, b)| (c, b.as_slice())).collect();
    let halluc = HallucinationInputs::build(&reg, &requests, &NoiseSpec::zero(d), &mut Rng::new(0, "n")).unwrap();
    let val = Matrix::from_rows(&basis).unwrap();
    let (loss, _, _) = aggressive_prototypical_loss(&h, &t, &val, &[0, 1, 2], &halluc, 20.0).unwrap();
    assert!(loss < 1e-8, "{loss}");

    let err = aggressive_prototypical_loss(&h, &t, &val, &[0, 1, 3], &halluc, 20.0);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn aggressive_loss_label_permutation_symmetry() {
    let c = aggressive_case(7);
    let (base, _, _) = aggressive_prototypical_loss(&c.h, &c.t, &c.val, &c.val_classes, &c.halluc, 4.0).unwrap();
    let perm = [2usize, 0, 1];
    let mut halluc = c.halluc.clone();
    halluc.classes.iter_mut().for_each(|k| *k = perm[*k]);
    let val_classes: Vec<usize> = c.val_classes.iter().map(|&k| perm[k]).collect();
    let (permuted, _, _) = aggressive_prototypical_loss(&c.h, &c.t, &c.val, &val_classes, &halluc, 4.0).unwrap();
    assert!((base - permuted).abs() < 1e-12);
}

#[test]
fn hallucinator_roundtrip() {
    let h = init_hallucinator(4, Variant::Aggressive, 0.02, &mut Rng::new(5, "kv")).unwrap();
    let back = Hallucinator::from_kv_str(&h.to_kv_string()).unwrap();
    assert_eq!(back, h);
}



use super::*;
use crate::numerics::grad_check;
use proptest::prelude::{prop_assert_eq, proptest};

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn ensemble(weights: Matrix, biases: Vec<f64>) -> RpnEnsemble {
    RpnEnsemble {
        weights,
        biases,
        coop_threshold: 0.3,
        div_epsilon: 1e-6,
        loss_weights: CorpnsLossWeights::default(),
    }
}

#[test]
fn zero_scorers_give_half() {
    let e = ensemble(Matrix::zeros(3, 4), vec![0.0; 3]);
    let x = Matrix::from_vec(5, 4, Rng::new(1, "x").normal_vec(20, 1.0)).unwrap();
    let f = head_scores(&e, &x).unwrap();
    assert_eq!((f.rows(), f.cols()), (3, 5));
    assert!(f.as_slice().iter().all(|&v| v == 0.5));
}

#[test]
fn scores_match_scalar_evaluation() {
    let mut rng = Rng::new(3, "scores");
    let e = RpnEnsemble::new(2, 4, 1.0, 0.3, 1e-6, &mut rng).unwrap();
    let x = Matrix::from_vec(3, 4, rng.normal_vec(12, 1.0)).unwrap();
    let f = head_scores(&e, &x).unwrap();
    for j in 0..2 {
        for i in 0..3 {
            let mut z = e.biases[j];
            for k in 0..4 {
                z += e.weights.get(j, k) * x.get(i, k);
            }
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((f.get(j, i) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn scores_reject_bad_input() {
    let e = ensemble(Matrix::zeros(2, 4), vec![0.0; 2]);
    assert!(matches!(head_scores(&e, &Matrix::zeros(2, 3)), Err(Error::Shape(_))));
    assert!(head_scores(&e, &Matrix::zeros(0, 4)).is_err());
    assert!(RpnEnsemble::new(1, 4, 1.0, 0.3, 1e-6, &mut Rng::new(0, "e")).is_err());
}

#[test]
fn selection_examples() {
    assert_eq!(select_head(&[0.6, 0.95, 0.2]), 1);
    assert_eq!(select_head(&[0.5, 0.5]), 0);
    assert_eq!(select_head(&[0.05, 0.9]), 0);
}

proptest! {
    #[test]
    fn selection_ignores_monotone_reparameterization(scores in proptest::collection::vec(0.001f64..0.999, 2..6)) {
        let j = select_head(&scores);
        let best = scores.iter().map(|f| ((f - 0.5f64).abs()).powi(3)).fold(f64::NEG_INFINITY, f64::max);
        let cubed: Vec<usize> = scores.iter().enumerate()
            .filter(|(_, f)| ((*f - 0.5f64).abs()).powi(3) == best)
            .map(|(i, _)| i).collect();
        prop_assert_eq!(j, cubed[0]);
    }
}

#[test]
fn divergence_matches_hand_covariance() {
    let f = m(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0]]);
    let (loss, _) = divergence_loss(&f, 0.0).unwrap();
    assert!((loss - 27f64.ln()).abs() < 1e-9);
}

#[test]
fn divergence_with_identical_heads_is_large_but_finite() {
    let f = m(&[&[0.2, 0.7, 0.4], &[0.2, 0.7, 0.4]]);
    let (loss, g) = divergence_loss(&f, 1e-6).unwrap();
    assert!(loss.is_finite() && loss > 10.0);
    assert!(g.as_slice().iter().all(|v| v.is_finite()));
    assert!(divergence_loss(&f, 0.0).is_err());
    assert!(divergence_loss(&m(&[&[0.1], &[0.2]]), 1e-6).is_err());
}

#[test]
fn divergence_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed, "div");
        let f: Vec<f64> = (0..3 * 8).map(|_| rng.uniform()).collect();
        let rel = grad_check(
            |p| {
                let (l, g) = divergence_loss(&Matrix::from_vec(3, 8, p.to_vec())?, 1e-6)?;
                Ok((l, g.into_vec()))
            },
            &f,
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-5, "seed {seed}: {rel}");
    }
}

#[test]
fn cooperation_hinge_cases() {
    assert_eq!(cooperation_loss(&m(&[&[0.5]]), 0.3).0, 0.0);
    assert!((cooperation_loss(&m(&[&[0.1]]), 0.3).0 - 0.2).abs() < 1e-15);
    let (loss, g) = cooperation_loss(&m(&[&[0.3, 0.1], &[0.2, 0.9]]), 0.3);
    assert!((loss - 0.075).abs() < 1e-15);
    assert_eq!(g.as_slice(), &[0.0, -0.25, -0.25, 0.0]);
    let (loss, g) = cooperation_loss(&Matrix::zeros(3, 0), 0.3);
    assert_eq!(loss, 0.0);
    assert!(g.as_slice().is_empty());
}

proptest! {
    #[test]
    fn cooperation_is_zero_iff_all_above_bound(f in proptest::collection::vec(0.0f64..1.0, 6)) {
        let (loss, _) = cooperation_loss(&Matrix::from_vec(2, 3, f.clone()).unwrap(), 0.3);
        prop_assert_eq!(loss == 0.0, f.iter().all(|&v| v >= 0.3));
    }
}

#[test]
fn identical_heads_without_regularizers_reduce_to_bce() {
    let mut rng = Rng::new(5, "single");
    let single = ObjectnessHead::new(4, 1.0, &mut rng);
    let mut w = Matrix::zeros(2, 4);
    w.row_mut(0).copy_from_slice(&single.weights);
    w.row_mut(1).copy_from_slice(&single.weights);
    let mut e = ensemble(w, vec![single.bias; 2]);
    e.loss_weights.div = 0.0;
    e.loss_weights.coop = 0.0;
    let x = Matrix::from_vec(6, 4, rng.normal_vec(24, 1.0)).unwrap();
    let y = [true, false, true, false, false, true];
    let (loss, grads) = corpns_total_loss(&e, &x, &y).unwrap();
    let (bce, bce_grad) = single.loss_and_grads(&x, &y).unwrap();
    assert!((loss.total() - bce).abs() < 1e-14);
    // Ties route every box to head 0.
    for (a, b) in grads.weights.row(0).iter().zip(&bce_grad[..4]) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(grads.weights.row(1).iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_reaches_only_the_selected_head() {
    let e = RpnEnsemble {
        loss_weights: CorpnsLossWeights { ce: 1.0, div: 0.0, coop: 0.0 },
        ..ensemble(m(&[&[3.0, 0.0], &[0.1, 0.0]]), vec![0.0, 0.0])
    };
    let x = m(&[&[1.0, 2.0]]);
    let (_, g) = corpns_total_loss(&e, &x, &[true]).unwrap();
    assert!(g.weights.row(0)[0] != 0.0);
    assert!(g.weights.row(1).iter().all(|&v| v == 0.0));
    assert_eq!(g.biases[1], 0.0);
}

fn random_instance(seed: u64) -> (RpnEnsemble, Matrix, Vec<bool>) {
    let mut rng = Rng::new(seed, "corpns-total");
    let e = RpnEnsemble::new(3, 5, 0.8, 0.3, 1e-6, &mut rng).unwrap();
    let x = Matrix::from_vec(10, 5, rng.normal_vec(50, 1.0)).unwrap();
    let y = (0..10).map(|_| rng.uniform() < 0.4).collect();
    (e, x, y)
}

/// Distance of the instance from a selection switch or a hinge corner.
fn kink_margin(e: &RpnEnsemble, x: &Matrix, y: &[bool]) -> f64 {
    let f = head_scores(e, x).unwrap();
    let mut margin = f64::INFINITY;
    for i in 0..f.cols() {
        let mut c: Vec<f64> = (0..f.rows()).map(|j| (f.get(j, i) - 0.5).abs()).collect();
        c.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(c[0] - c[1]);
        if y[i] {
            for j in 0..f.rows() {
                margin = margin.min((f.get(j, i) - e.coop_threshold).abs());
            }
        }
    }
    margin
}

#[test]
fn total_is_sum_of_components() {
    let (e, x, y) = random_instance(11);
    let (parts, _) = corpns_total_loss(&e, &x, &y).unwrap();
    let f = head_scores(&e, &x).unwrap();
    let div = divergence_loss(&f, e.div_epsilon).unwrap().0;
    let fg: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut fg_scores = Matrix::zeros(3, fg.len());
    for j in 0..3 {
        for (k, &i) in fg.iter().enumerate() {
            fg_scores.set(j, k, f.get(j, i));
        }
    }
    let coop = cooperation_loss(&fg_scores, e.coop_threshold).0;
    assert!((parts.div - div).abs() < 1e-14);
    assert!((parts.coop - coop).abs() < 1e-14);
    assert!((parts.total() - (parts.ce + div + coop)).abs() < 1e-14);
}

#[test]
fn total_gradient_matches_finite_differences() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 {
        let (e, x, y) = random_instance(seed);
        seed += 1;
        if kink_margin(&e, &x, &y) < 1e-3 {
            continue;
        }
        let rel = grad_check(
            |p| {
                let mut ee = e.clone();
                ee.load(p);
                let (l, g) = corpns_total_loss(&ee, &x, &y)?;
                Ok((l.total(), g.flatten()))
            },
            &e.flatten(),
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-5, "seed {}: {rel}", seed - 1);
        checked += 1;
    }
}

#[test]
fn objectness_head_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed, "objectness");
        let h = ObjectnessHead::new(4, 1.0, &mut rng);
        let x = Matrix::from_vec(6, 4, rng.normal_vec(24, 1.0)).unwrap();
        let y: Vec<bool> = (0..6).map(|_| rng.uniform() < 0.5).collect();
        let rel = grad_check(
            |p| {
                let mut hh = h.clone();
                hh.load(p);
                hh.loss_and_grads(&x, &y)
            },
            &h.flatten(),
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-5);
    }
}

#[test]
fn correlation_of_identical_and_opposed_heads() {
    let f = m(&[&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9], &[0.9, 0.5, 0.1]]);
    // pairs: +1, -1, -1
    assert!((mean_pairwise_correlation(&f) + 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn kv_round_trip() {
    let (mut e, _, _) = random_instance(2);
    e.loss_weights.div = 0.0;
    let back = RpnEnsemble::from_kv_str(&e.to_kv_string()).unwrap();
    assert_eq!(back, e);
    let h = ObjectnessHead::new(3, 1.0, &mut Rng::new(9, "h"));
    assert_eq!(ObjectnessHead::from_kv_str(&h.to_kv_string()).unwrap(), h);
}

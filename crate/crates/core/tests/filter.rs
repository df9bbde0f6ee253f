use fltlm::filter::{
    classify, filter_loss, flt_parts, loss_flt, loss_infonce, loss_infonce_star, FilterError, FilterLoss,
};
use fltlm::numerics::{finite_diff_check_many, GradCheckOptions};
use fltlm::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect()
}

/// `log(1 + e^{-s_p/τ} + Σ_n e^{s_n/τ} + Σ_n e^{(s_n - s_p)/τ})`, summed term
/// by term.
fn star_expanded(s: &[f64], p: usize, tau: f64) -> f64 {
    let mut total = 1.0 + (-s[p] / tau).exp();
    for (i, &v) in s.iter().enumerate() {
        if i != p {
            total += (v / tau).exp() + ((v - s[p]) / tau).exp();
        }
    }
    total.ln()
}

#[test]
fn star_loss_factorizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.gen_range(2..12);
        let s = random_scores(&mut rng, n);
        let p = rng.gen_range(0..n);
        let tau = rng.gen_range(0.5..2.0);
        let factored = loss_infonce_star(&s, p, tau).unwrap();
        assert!((factored - star_expanded(&s, p, tau)).abs() < 1e-7);
    }
}

#[test]
fn infonce_is_shift_invariant_others_are_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut star_moved, mut flt_moved) = (0, 0);
    for _ in 0..200 {
        let n = rng.gen_range(2..10);
        let s = random_scores(&mut rng, n);
        let p = rng.gen_range(0..n);
        let c: f64 = rng.gen_range(1.0..3.0) * if rng.gen() { 1.0 } else { -1.0 };
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let labels: Vec<bool> = (0..n).map(|i| i == p).collect();
        assert!((loss_infonce(&s, p, 1.0).unwrap() - loss_infonce(&shifted, p, 1.0).unwrap()).abs() < 1e-7);
        let star = loss_infonce_star(&s, p, 1.0).unwrap() - loss_infonce_star(&shifted, p, 1.0).unwrap();
        let flt = loss_flt(&s, &labels, 1.0, 0.5).unwrap() - loss_flt(&shifted, &labels, 1.0, 0.5).unwrap();
        star_moved += usize::from(star.abs() > 1e-3);
        flt_moved += usize::from(flt.abs() > 1e-3);
    }
    // a shift can cancel between the two terms for isolated vectors
    assert!(star_moved >= 190 && flt_moved >= 190, "{star_moved} {flt_moved}");
    let s = [1.0, -2.0, 0.5];
    let up = [2.0, -1.0, 1.5];
    assert!((loss_infonce_star(&s, 0, 1.0).unwrap() - loss_infonce_star(&up, 0, 1.0).unwrap()).abs() > 1e-3);
}

#[test]
fn reference_values() {
    // log(1 + e^{-1}) + log(1 + e^{-2} + e^{0.5})
    let want = (1.0 + (-1.0f64).exp()).ln() + (1.0 + (-2.0f64).exp() + 0.5f64.exp()).ln();
    let got = loss_flt(&[1.0, -2.0, 0.5], &[true, false, false], 1.0, 0.0).unwrap();
    assert!((got - want).abs() < 1e-12);
    // margin 1 moves the positive term to log 2
    let got = loss_flt(&[1.0, -2.0, 0.5], &[true, false, false], 1.0, 1.0).unwrap();
    assert!((got - (2.0f64.ln() + (1.0 + (-2.0f64).exp() + 0.5f64.exp()).ln())).abs() < 1e-12);
    // ln(1 + e^{-1} + e^{-2}), evaluated with mpmath
    let want = 0.407_605_964_444_380_4;
    assert!((loss_infonce(&[2.0, 1.0, 0.0], 0, 1.0).unwrap() - want).abs() < 1e-12);
    assert!((loss_infonce(&[7.0, 6.0, 5.0], 0, 1.0).unwrap() - want).abs() < 1e-7);
    assert_eq!(loss_flt(&[], &[], 1.0, 1.0).unwrap(), 0.0);
    assert!(matches!(loss_flt(&[1.0], &[true, false], 1.0, 0.0), Err(FilterError::Labels { .. })));
    assert_eq!(classify(&[2.625, -12.1875, 0.0, 3.5]), vec![0, 3]);
}

proptest! {
    #[test]
    fn flt_loss_is_monotone(
        s in prop::collection::vec(-6.0f64..6.0, 2..10),
        k in 0usize..10,
        delta in 0.01f64..2.0,
    ) {
        let n = s.len();
        let k = k % n;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let base = loss_flt(&s, &labels, 1.0, 0.3).unwrap();
        let mut up = s.clone();
        up[k] += delta;
        let moved = loss_flt(&up, &labels, 1.0, 0.3).unwrap();
        if labels[k] {
            prop_assert!(moved < base);
        } else {
            prop_assert!(moved > base);
        }
        prop_assert!(base >= 0.0 && base.is_finite());
    }

    #[test]
    fn flt_gradient_signs(s in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let labels: Vec<bool> = (0..s.len()).map(|i| i % 3 == 0).collect();
        let parts = flt_parts(&s, &labels, 1.0, 1.0).unwrap();
        for (d, &l) in parts.d_scores.iter().zip(&labels) {
            let ok = if l { *d <= 0.0 } else { *d >= 0.0 };
            prop_assert!(ok);
        }
        prop_assert!(parts.d_margin >= 0.0);
    }
}

#[test]
fn graph_losses_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = GradCheckOptions { eps: 1e-5, ..Default::default() };
    for _ in 0..20 {
        let n = rng.gen_range(2..8);
        let s = Tensor::from_f64(&[n], &random_scores(&mut rng, n)).unwrap();
        let theta = Tensor::scalar(rng.gen_range(-0.5..0.5));
        let gamma = Tensor::scalar(rng.gen_range(-1.0..0.5));
        let labels: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.3)).collect();
        let p = rng.gen_range(0..n);
        for kind in [
            FilterLoss::Flt { labels: &labels },
            FilterLoss::InfoNce { positive: p },
            FilterLoss::InfoNceStar { positive: p },
        ] {
            let err = finite_diff_check_many(
                |g: &mut Graph<f64>, v| {
                    filter_loss(g, v[0], kind, v[1], v[2]).map_err(fltlm::Error::from)
                },
                &[s.clone(), theta.clone(), gamma.clone()],
                &opts,
            )
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err:e}");
        }
    }
}

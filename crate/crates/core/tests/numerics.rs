use std::sync::Arc;

use fltlm::numerics::{
    cross_entropy, finite_diff_check, finite_diff_check_many, matmul, softmax_rows,
    AttentionMask, GradCheckOptions, NumericsError, SpanBias,
};
use fltlm::{Graph, Tensor, Tensor64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_scalar() {
    let eye = Tensor::<f32>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Tensor::<f32>::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    assert_eq!(matmul(&eye, &b).unwrap(), b);
    let two = Tensor::<f32>::from_rows(&[vec![2.0]]).unwrap();
    let three = Tensor::<f32>::from_rows(&[vec![3.0]]).unwrap();
    assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor64::uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let b = Tensor64::uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let got = matmul(&a, &b).unwrap();
    let want = triple_loop(&a, &b);
    let diff = got
        .data()
        .iter()
        .zip(&want)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-6, "{diff}");

    // f32 path against the f64 oracle
    let a32: Tensor<f32> = a.cast();
    let b32: Tensor<f32> = b.cast();
    let got32 = matmul(&a32, &b32).unwrap();
    let want32 = triple_loop(&a32.cast(), &b32.cast());
    for (x, y) in got32.data().iter().zip(&want32) {
        assert!((*x as f64 - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[4, 2]);
    let err = matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let x = Tensor::<f32>::from_rows(&[vec![0.0, 0.0]]).unwrap();
    assert_eq!(softmax_rows(&x, None).unwrap().data(), &[0.5, 0.5]);
    let hard = Tensor::<f32>::from_rows(&[vec![0.0, f32::NEG_INFINITY]]).unwrap();
    assert_eq!(softmax_rows(&x, Some(&hard)).unwrap().data(), &[1.0, 0.0]);

    let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    let b = Tensor::<f64>::from_rows(&[vec![0.0, -1.0, 0.0]]).unwrap();
    let got = softmax_rows(&x, Some(&b)).unwrap();
    // direct evaluation: exp(1), exp(1), exp(3) normalised
    let z = 1f64.exp() + 1f64.exp() + 3f64.exp();
    let want = [1f64.exp() / z, 1f64.exp() / z, 3f64.exp() / z];
    for (g, w) in got.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn softmax_all_masked_row_rejected() {
    let x = Tensor::<f32>::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let b = Tensor::<f32>::full(&[1, 2], f32::NEG_INFINITY);
    assert!(matches!(
        softmax_rows(&x, Some(&b)),
        Err(NumericsError::EmptyRow { row: 0 })
    ));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        xs in proptest::collection::vec(-20.0f32..20.0, 1..16),
        bias in proptest::collection::vec(-50.0f32..0.0, 16),
    ) {
        let n = xs.len();
        let x = Tensor::new(vec![1, n], xs).unwrap();
        let b = Tensor::new(vec![1, n], bias[..n].to_vec()).unwrap();
        let p = softmax_rows(&x, Some(&b)).unwrap();
        let s: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_oracle_property(seed in 0u64..500, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f32>::uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[k, n], -1.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a.cast(), &b.cast());
        for (x, y) in got.data().iter().zip(&want) {
            prop_assert!((*x as f64 - y).abs() < 1e-6);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let v = 7;
    let mut row = vec![0.0f32; v];
    row[3] = 1e4;
    let logits = Tensor::new(vec![1, v], row).unwrap();
    assert!(cross_entropy(&logits, &[3], &[true]).unwrap() < 1e-6);

    let uniform = Tensor::<f32>::zeros(&[2, v]);
    let ce = cross_entropy(&uniform, &[0, 5], &[true, true]).unwrap();
    assert!((ce - (v as f64).ln()).abs() < 1e-6);

    let err = cross_entropy(&uniform, &[0, 5], &[false, false]).unwrap_err();
    assert!(matches!(err, NumericsError::EmptyMask));
}

#[test]
fn cross_entropy_random_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = Tensor64::uniform(&[4, 9], -3.0, 3.0, &mut rng);
    let targets = [1usize, 8, 0, 4];
    let mask = [true, false, true, true];
    let got = cross_entropy(&logits, &targets, &mask).unwrap();
    let mut want = 0.0;
    let mut n = 0.0;
    for r in 0..4 {
        if !mask[r] {
            continue;
        }
        let lse = logits.row(r).iter().map(|x| x.exp()).sum::<f64>().ln();
        want += lse - logits.at(r, targets[r]);
        n += 1.0;
    }
    assert!((got - want / n).abs() < 1e-12);
}

#[test]
fn gradcheck_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor64::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradcheck_rejects_bad_step() {
    let x = Tensor64::zeros(&[2]);
    assert!(matches!(
        finite_diff_check(|g, v| Ok(g.sum(v)), &x, 0.5),
        Err(NumericsError::BadStep(_))
    ));
}

#[test]
fn gradcheck_rejects_non_finite_loss() {
    let x = Tensor64::full(&[1], f64::INFINITY);
    assert!(finite_diff_check(|g, v| Ok(g.sum(v)), &x, 1e-4).is_err());
}

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-4,
        ..Default::default()
    }
}

#[test]
fn gradcheck_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor64::uniform(&[5, 8], -1.0, 1.0, &mut rng);
    let w = Tensor64::uniform(&[8, 8], -1.0, 1.0, &mut rng);
    let gain = Tensor64::uniform(&[8], 0.5, 1.5, &mut rng);
    let row = Tensor64::uniform(&[8], -1.0, 1.0, &mut rng);
    let probe = Tensor64::uniform(&[5, 8], -1.0, 1.0, &mut rng);

    // matmul, add_row, silu, rms_norm, rope, select_rows, softmax_rows
    let err = finite_diff_check_many(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[3])?;
            let h = g.silu(h);
            let h = g.rms_norm(h, v[2], 1e-6)?;
            let h = g.rope(h, 2, 3, 10000.0)?;
            let h = g.softmax_rows(h, None)?;
            let sel = g.select_rows(h, &[4, 0, 4])?;
            let p = g.constant(probe.clone());
            let pr = g.select_rows(p, &[0, 1, 2])?;
            let prod = g.mul(sel, pr)?;
            Ok::<_, NumericsError>(g.sum(prod))
        },
        &[a.clone(), w.clone(), gain.clone(), row.clone()],
        &opts(),
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");

    // embedding, sub, scale, reshape, mul_scalar, add_scalar, min_zero, cross_entropy
    let table = Tensor64::uniform(&[6, 4], -1.0, 1.0, &mut rng);
    let s = Tensor64::scalar(0.7);
    let b = Tensor64::scalar(-0.3);
    let err = finite_diff_check_many(
        |g, v| {
            let e = g.embedding(v[0], &[1, 3, 3, 5])?;
            let f = g.embedding(v[0], &[0, 2, 4, 1])?;
            let d = g.sub(e, f)?;
            let d = g.scale(d, 1.5);
            let d = g.mul_scalar(d, v[1])?;
            let d = g.add_scalar(d, v[2])?;
            let m = g.min_zero(d);
            let flat = g.reshape(m, vec![2, 8])?;
            let ce = g.cross_entropy(flat, &[3, 7], &[true, true])?;
            let tail = g.sum(d);
            let tail = g.scale(tail, 0.1);
            g.add(ce, tail)
        },
        &[table, s, b],
        &opts(),
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradcheck_attention_with_soft_intensities() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let len = 9;
    let q = Tensor64::uniform(&[len, 8], -1.0, 1.0, &mut rng);
    let k = Tensor64::uniform(&[len, 8], -1.0, 1.0, &mut rng);
    let v = Tensor64::uniform(&[len, 8], -1.0, 1.0, &mut rng);
    let probe = Tensor64::uniform(&[len, 8], -1.0, 1.0, &mut rng);
    let intens = Tensor64::from_f64(&[2], &[-0.4, -1.3]).unwrap();
    let mask = Arc::new(
        AttentionMask::with_spans(vec![
            SpanBias { cols: 1..4, from_row: 3 },
            SpanBias { cols: 4..7, from_row: 6 },
        ])
        .with_isolation(vec![None, Some(0), Some(0), Some(0), Some(1), Some(1), Some(1), None, None]),
    );
    let err = finite_diff_check_many(
        |g, vs| {
            let out = g.attention(vs[0], vs[1], vs[2], 2, mask.clone(), Some(vs[3]))?;
            let p = g.constant(probe.clone());
            let prod = g.mul(out, p)?;
            Ok::<_, NumericsError>(g.sum(prod))
        },
        &[q, k, v, intens],
        &opts(),
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn attention_rejects_positive_intensity() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[3, 4]));
    let i = g.param(Tensor::scalar(0.5));
    let mask = Arc::new(AttentionMask::with_spans(vec![SpanBias { cols: 0..1, from_row: 1 }]));
    assert!(matches!(
        g.attention(x, x, x, 2, mask, Some(i)),
        Err(NumericsError::PositiveBias { .. })
    ));
}

mod common;

use common::{model, params, samples, vocab};
use fltlm::evaluator::{
    answer_samples, filter_metrics, oracle_scores, qa_f1, random_scores, recall_curve, run_matrix, select_documents,
    set_scores, summary_table, write_report_csv, Condition, DecodeOptions, Reader, ReportRow, System, REPORT_HEADER,
};
use fltlm::filter::{classify, Strategy};
use fltlm::forward::PassSpec;
use fltlm::input::reorder_sample;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn qa_f1_examples() {
    assert_eq!(qa_f1("1964", "1964"), 1.0);
    assert_eq!(qa_f1("1911", "1964"), 0.0);
    assert!((qa_f1("in 1964", "1964") - 0.6667).abs() < 1e-4);
    assert!((qa_f1("x y z", "z y w") - 2.0 / 3.0).abs() < 1e-12);
    assert!((qa_f1("a b c", "c b d") - 0.8).abs() < 1e-12);
    assert!((qa_f1("x x", "x") - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn set_metric_examples() {
    let all = set_scores(&[1, 6, 9], &[1, 6, 9]);
    assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
    let half = set_scores(&[1], &[1, 2]);
    assert_eq!((half.precision, half.recall), (1.0, 0.5));
    assert!((half.f1 - 0.6667).abs() < 1e-4);
    assert_eq!(set_scores(&[], &[3]).f1, 0.0);
    assert_eq!(set_scores(&[], &[]).f1, 1.0);
    let m = filter_metrics(&[vec![1], vec![1, 6, 9]], &[vec![1, 2], vec![1, 6, 9]]).unwrap();
    assert!((m.recall - 0.75).abs() < 1e-12);
    assert!(filter_metrics(&[vec![]], &[]).is_err());
    let scores = [2.625, -4.46875, -6.6875, -6.3125, -7.125, 7.84375, -12.1875, -8.9375, 3.65625, -11.3125];
    assert_eq!(classify(&scores), vec![0, 5, 8]);
}

proptest! {
    #[test]
    fn recall_curve_is_monotone_and_bounded(
        seed in 0u64..1000,
        n in 2usize..10,
        gold_mask in prop::collection::vec(any::<bool>(), 10),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold: Vec<usize> = (0..n).filter(|&i| gold_mask[i]).collect();
        let scores = vec![random_scores(n, &mut rng), random_scores(n, &mut rng)];
        let golds = vec![gold.clone(), gold.clone()];
        let curve = recall_curve(&scores, &golds, n).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
        prop_assert!(curve.iter().all(|&c| (0.0..=1.0).contains(&c)));
        if !gold.is_empty() {
            prop_assert!((curve[n - 1] - 1.0).abs() < 1e-12);
            let oracle = recall_curve(&[oracle_scores(n, &gold)], &[gold.clone()], n).unwrap();
            prop_assert!((oracle[gold.len() - 1] - 1.0).abs() < 1e-12);
            for k in 0..gold.len() {
                prop_assert!((oracle[k] - (k + 1) as f64 / gold.len() as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn random_scorer_recall_is_k_over_n_on_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 8;
    let scores: Vec<Vec<f64>> = (0..4000).map(|_| random_scores(n, &mut rng)).collect();
    let gold = vec![vec![2]; 4000];
    let curve = recall_curve(&scores, &gold, n).unwrap();
    for (k, c) in curve.iter().enumerate() {
        assert!((c - (k + 1) as f64 / n as f64).abs() < 0.03, "k={} {c}", k + 1);
    }
}

#[test]
fn conditions_and_selection() {
    let v = vocab();
    let s = &samples(&v, 5, 2, 1)[0];
    for c in Condition::all() {
        assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        let applied = c.apply(s);
        assert_eq!(applied.question, s.question);
    }
    let re = reorder_sample(s);
    let labels: Vec<bool> = re.documents.iter().map(|d| d.relevant).collect();
    assert!(labels[0] && labels[4] && labels[1..4].iter().all(|l| !l));
    let picked = select_documents(s, &[-1.0, 0.5, -2.0, 3.0, -0.1]);
    assert_eq!(picked.documents, vec![s.documents[1].clone(), s.documents[3].clone()]);
    let fallback = select_documents(s, &[-1.0, -0.5, -2.0, -3.0, -0.1]);
    assert_eq!(fallback.documents, vec![s.documents[4].clone()]);
}

#[test]
fn matrix_report() {
    let v = vocab();
    let m = model(&v);
    let p = params(&m, &v, 1);
    let spec = PassSpec::fltlm(Strategy::Naive);
    let lm = PassSpec::lm_only();
    let reader = Reader { params: &p, model: &m, spec: &spec };
    let plain = Reader { params: &p, model: &m, spec: &lm };
    let eval = samples(&v, 3, 1, 6);
    let systems = [
        System::OneStage { name: "fltlm".into(), reader },
        System::TwoStage { name: "two".into(), filter: reader, reader: plain },
        System::Missing { name: "bm25".into(), reason: "not built".into() },
    ];
    let conds = [Condition::ORIGINAL, Condition::REORDERED];
    let rows = run_matrix(&systems, &v, &eval, &conds, DecodeOptions::default()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].filter.is_some() && rows[2].filter.is_some());
    assert_eq!(rows[4].status, "skipped: not built");
    let direct = answer_samples(reader, &v, &eval, DecodeOptions::default()).unwrap();
    assert_eq!(rows[0], ReportRow::from_results("fltlm", "original/pos+neg", &direct));
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &rows).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPORT_HEADER);
    assert_eq!(text.lines().count(), 7);
    assert!(summary_table(&rows).contains("reordered/pos+neg"));
}

mod common;

use proptest::prelude::*;
use rand::Rng;
use trendlab::baselines::{Tcn, TcnConfig};
use trendlab::evaluation::*;
use trendlab::exec::Execution;
use trendlab::nn::Forecaster;
use trendlab::series_io::{make_windows, Normaliser};

const TOL: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

// Brute-force references written directly from the metric definitions.
struct Oracle {
    mae: f64,
    rmse: f64,
    mase: f64,
    rmsse: f64,
}

fn oracle(train: &[f64], actual: &[f64], pred: &[f64]) -> Oracle {
    let h = actual.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..actual.len() {
        abs += (actual[i] - pred[i]).abs();
        sq += (actual[i] - pred[i]).powi(2);
    }
    let mut dabs = 0.0;
    let mut dsq = 0.0;
    for i in 1..train.len() {
        dabs += (train[i] - train[i - 1]).abs();
        dsq += (train[i] - train[i - 1]).powi(2);
    }
    let n1 = (train.len() - 1) as f64;
    Oracle {
        mae: abs / h,
        rmse: (sq / h).sqrt(),
        mase: (abs / h) / (dabs / n1),
        rmsse: ((sq / h) / (dsq / n1)).sqrt(),
    }
}

#[test]
fn regression_metrics_match_brute_force_oracle() {
    let mut rng = common::rng(11);
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let h = rng.gen_range(1..40);
        let train: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let actual: Vec<f64> = (0..h).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let pred: Vec<f64> = (0..h).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let input = MetricInput::new(&train, &actual, &pred).unwrap();
        let m = regression_metrics(&input).unwrap();
        let o = oracle(&train, &actual, &pred);
        assert!(close(m.mae, o.mae), "{} vs {}", m.mae, o.mae);
        assert!(close(m.rmse, o.rmse));
        assert!(close(m.mase, o.mase));
        assert!(close(m.rmsse, o.rmsse));
    }
}

#[test]
fn mase_half_example() {
    // Training steps all have magnitude 2; forecast errors all have magnitude 1.
    let train = [0.0, 2.0, 0.0, 2.0, 4.0];
    let actual = [10.0, 11.0, 12.0];
    let pred = [11.0, 10.0, 13.0];
    let input = MetricInput::new(&train, &actual, &pred).unwrap();
    assert!((mase(&input).unwrap() - 0.5).abs() < TOL);
    assert!((rmsse(&input).unwrap() - 0.5).abs() < TOL);
}

#[test]
fn naive_forecast_on_constant_step_series_has_unit_mase() {
    let c = 0.7;
    let series: Vec<f64> = (0..40).map(|i| if i % 3 == 0 { -c } else { c }).scan(5.0, |s, d| {
        *s += d;
        Some(*s)
    }).collect();
    let (train, test) = series.split_at(25);
    let pred = &series[24..39];
    let input = MetricInput::new(train, test, pred).unwrap();
    assert!((mase(&input).unwrap() - 1.0).abs() < TOL);
    assert!((rmsse(&input).unwrap() - 1.0).abs() < TOL);
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(matches!(MetricInput::new(&[1.0, 2.0], &[], &[]), Err(EvalError::NoForecasts)));
    assert!(matches!(MetricInput::new(&[1.0], &[1.0], &[1.0]), Err(EvalError::ShortTraining(1))));
    assert!(matches!(
        MetricInput::new(&[1.0, 2.0], &[1.0], &[1.0, 2.0]),
        Err(EvalError::LengthMismatch { .. })
    ));
    assert!(matches!(
        MetricInput::new(&[1.0, f64::NAN], &[1.0], &[1.0]),
        Err(EvalError::NonFinite(_))
    ));
    let flat = MetricInput::new(&[3.0, 3.0, 3.0], &[1.0], &[2.0]).unwrap();
    assert!(matches!(mase(&flat), Err(EvalError::ConstantTraining)));
    assert!(matches!(rmsse(&flat), Err(EvalError::ConstantTraining)));
    assert_eq!(mae(&flat), 1.0);
}

#[test]
fn confusion_example() {
    let o = DirectionalOutcome { tp: 3, fp: 1, tn: 5, fn_: 1 };
    assert_eq!(o.accuracy(), Some(0.8));
    assert_eq!(o.recall(), Some(0.75));
    assert_eq!(o.precision_rise(), Some(0.75));
    assert!((o.precision_fall().unwrap() - 5.0 / 6.0).abs() < TOL);
    assert!((o.f1().unwrap() - 0.75).abs() < TOL);
}

#[test]
fn undefined_ratios_are_absent() {
    let o = DirectionalOutcome { tp: 0, fp: 0, tn: 4, fn_: 0 };
    assert_eq!(o.recall(), None);
    assert_eq!(o.precision_rise(), None);
    assert_eq!(o.f1(), None);
    assert_eq!(o.precision_fall(), Some(1.0));
    assert_eq!(DirectionalOutcome::default().accuracy(), None);
    let zero = DirectionalOutcome { tp: 0, fp: 2, tn: 0, fn_: 2 };
    assert_eq!(zero.f1(), Some(0.0));
}

#[test]
fn directional_outcomes_match_brute_force() {
    let mut rng = common::rng(12);
    for _ in 0..1000 {
        let n = rng.gen_range(1..50);
        // Coarse values so that ties occur.
        let mut draw = || rng.gen_range(0..5) as f64;
        let prev: Vec<f64> = (0..n).map(|_| draw()).collect();
        let actual: Vec<f64> = (0..n).map(|_| draw()).collect();
        let pred: Vec<f64> = (0..n).map(|_| draw()).collect();
        let o = directional_outcomes(&prev, &actual, &pred, TieRule::Fall).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for i in 0..n {
            let ar = actual[i] > prev[i];
            let pr = pred[i] > prev[i];
            match (ar, pr) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                (true, false) => fn_ += 1,
            }
        }
        assert_eq!(o, DirectionalOutcome { tp, fp, tn, fn_ });
        let total = n as f64;
        assert!(close(o.accuracy().unwrap(), (tp + tn) as f64 / total));
        if tp + fp > 0 && tp + fn_ > 0 {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert!(close(o.f1().unwrap(), f1));
        }
    }
}

#[test]
fn tie_rule_decides_flat_moves() {
    assert!(!is_rise(1.0, 1.0, TieRule::Fall));
    assert!(is_rise(1.0, 1.0, TieRule::Rise));
    assert!(is_rise(1.0, 1.5, TieRule::Fall));
    assert!(!is_rise(1.0, 0.5, TieRule::Rise));
    assert!(matches!(
        directional_outcomes(&[1.0], &[1.0, 2.0], &[1.0], TieRule::Fall),
        Err(EvalError::LengthMismatch { .. })
    ));
}

proptest! {
    #[test]
    fn scaled_metrics_are_affine_invariant(
        train in prop::collection::vec(-10.0f64..10.0, 3..30),
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
        a in 0.1f64..20.0,
        b in -100.0f64..100.0,
    ) {
        let (actual, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let input = MetricInput::new(&train, &actual, &pred).unwrap();
        prop_assume!(mase(&input).is_ok());
        let t = |xs: &[f64]| xs.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let (tt, ta, tp) = (t(&train), t(&actual), t(&pred));
        let scaled = MetricInput::new(&tt, &ta, &tp).unwrap();
        let (m0, m1) = (mase(&input).unwrap(), mase(&scaled).unwrap());
        prop_assert!((m0 - m1).abs() <= 1e-9 * m0.max(1.0));
        let (r0, r1) = (rmsse(&input).unwrap(), rmsse(&scaled).unwrap());
        prop_assert!((r0 - r1).abs() <= 1e-9 * r0.max(1.0));
        prop_assert!((mae(&scaled) - a * mae(&input)).abs() <= 1e-9 * mae(&scaled).max(1.0));
    }

    #[test]
    fn directions_are_invariant_under_increasing_maps(
        triples in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..40),
    ) {
        let prev: Vec<f64> = triples.iter().map(|t| t.0).collect();
        let actual: Vec<f64> = triples.iter().map(|t| t.1).collect();
        let pred: Vec<f64> = triples.iter().map(|t| t.2).collect();
        let f = |xs: &[f64]| xs.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
        let base = directional_outcomes(&prev, &actual, &pred, TieRule::Fall).unwrap();
        let mapped = directional_outcomes(&f(&prev), &f(&actual), &f(&pred), TieRule::Fall).unwrap();
        prop_assert_eq!(base, mapped);
        prop_assert_eq!(base.total(), triples.len());
    }

    #[test]
    fn metrics_are_nonnegative_and_ordered(
        train in prop::collection::vec(-10.0f64..10.0, 2..30),
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
    ) {
        let (actual, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let input = MetricInput::new(&train, &actual, &pred).unwrap();
        prop_assert!(mae(&input) >= 0.0);
        prop_assert!(rmse(&input) + 1e-12 >= mae(&input));
    }
}

fn toy_series(n: usize) -> (Vec<f64>, Vec<f64>) {
    let original: Vec<f64> = (0..n)
        .map(|i| 100.0 + 5.0 * (i as f64 * 0.3).sin() + if i % 4 == 0 { 0.8 } else { -0.3 })
        .collect();
    let denoised: Vec<f64> = (0..n).map(|i| 100.0 + 5.0 * (i as f64 * 0.3).sin()).collect();
    (original, denoised)
}

#[test]
fn naive_protocol_predicts_previous_original_and_never_rises() {
    let (original, denoised) = toy_series(120);
    let ranges = [0..80, 80..100, 100..120];
    let normaliser = Normaliser::fit_values(&denoised[0..80]).unwrap();
    let data = ProtocolData {
        original: &original,
        denoised: &denoised,
        ranges: &ranges,
        normaliser: &normaliser,
    };
    let report = evaluate_protocol(
        "toy",
        "Naive",
        Predictor::Naive { window_length: 5 },
        &data,
        ProtocolOptions::default(),
        Execution::Sequential,
    )
    .unwrap();
    assert_eq!(report.test.points.len(), 15);
    assert_eq!(report.test.points[0].index, 105);
    let mut rises = 0;
    for p in &report.test.points {
        assert_eq!(p.predicted, original[p.index - 1]);
        assert_eq!(p.prev_actual, original[p.index - 1]);
        assert!(!p.predicted_rise);
        rises += p.actual_rise as usize;
    }
    let expected_acc = 1.0 - rises as f64 / 15.0;
    assert!((report.test.outcome.accuracy().unwrap() - expected_acc).abs() < TOL);
    let actual: Vec<f64> = original[105..120].to_vec();
    let pred: Vec<f64> = original[104..119].to_vec();
    let o = oracle(&original[0..80], &actual, &pred);
    assert!(close(report.regression.mase, o.mase));
    assert!(close(report.regression.rmse, o.rmse));
}

#[test]
fn model_protocol_inverts_predictions_and_scores_against_original() {
    let (original, denoised) = toy_series(150);
    let ranges = [0..90, 90..120, 120..150];
    let normaliser = Normaliser::fit_values(&denoised[0..90]).unwrap();
    let model = Tcn::new(
        TcnConfig {
            sequence_length: 12,
            num_filters: 3,
            kernel_size: 3,
            ..TcnConfig::default()
        },
        4,
    )
    .unwrap();
    let data = ProtocolData {
        original: &original,
        denoised: &denoised,
        ranges: &ranges,
        normaliser: &normaliser,
    };
    let report = evaluate_protocol(
        "toy",
        "TCN",
        Predictor::Model(&model),
        &data,
        ProtocolOptions::default(),
        Execution::Sequential,
    )
    .unwrap();

    // Independent pipeline for the test split.
    let w = make_windows(&normaliser.apply_all(&denoised[120..150]), 12).unwrap();
    let flat: Vec<f64> = w.inputs().flatten().copied().collect();
    let raw = model.predict(&flat, Execution::Sequential).unwrap();
    assert_eq!(report.test.points.len(), raw.len());
    let mut tp = 0;
    for (p, r) in report.test.points.iter().zip(&raw) {
        assert!((p.predicted - normaliser.inverse(*r)).abs() < 1e-12);
        assert_eq!(p.actual, original[p.index]);
        assert_eq!(p.actual_rise, original[p.index] > original[p.index - 1]);
        assert_eq!(p.predicted_rise, p.predicted > original[p.index - 1]);
        tp += (p.actual_rise && p.predicted_rise) as usize;
    }
    assert_eq!(report.test.outcome.tp, tp);
    assert_eq!(report.train.points.len(), 90 - 12);
    assert_eq!(report.validation.points[0].index, 102);

    let md = report.to_markdown();
    assert!(md.contains("| Dataset | Model | MAE | RMSE | RMSSE | MASE |"));
    assert!(md.contains("| Precision (Rise) | Precision (Fall) | F1 Score |"));
    let text = report.to_text();
    assert!(text.starts_with("dataset: toy\nmodel: TCN\n"));
    assert!(text.contains("test.forecasts: 18"));

    let denoised_ref = evaluate_protocol(
        "toy",
        "TCN",
        Predictor::Model(&model),
        &data,
        ProtocolOptions {
            reference: DirectionReference::DenoisedPrevious,
            ..ProtocolOptions::default()
        },
        Execution::Sequential,
    )
    .unwrap();
    for p in &denoised_ref.test.points {
        assert_eq!(p.predicted_rise, p.predicted > denoised[p.index - 1]);
    }
}

#[test]
fn protocol_rejects_misaligned_series() {
    let (original, denoised) = toy_series(50);
    let normaliser = Normaliser::fit_values(&denoised).unwrap();
    let ranges = [0..30, 30..40, 40..50];
    let data = ProtocolData {
        original: &original[..49],
        denoised: &denoised,
        ranges: &ranges,
        normaliser: &normaliser,
    };
    let r = evaluate_protocol(
        "x",
        "Naive",
        Predictor::Naive { window_length: 3 },
        &data,
        ProtocolOptions::default(),
        Execution::Sequential,
    );
    assert!(matches!(r, Err(EvalError::LengthMismatch { .. })));
}

//! Regression and directional metrics, and the evaluation protocol:
//! models see denoised inputs, but every score is computed against the
//! original prices.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::nn::{Forecaster, ModelError};
use crate::series_io::{make_windows, Normaliser, Partition, SeriesError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no forecasts to score")]
    NoForecasts,
    #[error("training series needs at least two observations, got {0}")]
    ShortTraining(usize),
    #[error("training series has no variation; scaled errors are undefined")]
    ConstantTraining,
    #[error("{what}: lengths {left} and {right} differ")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Training history plus aligned test actuals and forecasts, all on the
/// price scale.
#[derive(Debug, Clone, Copy)]
pub struct MetricInput<'a> {
    train: &'a [f64],
    actual: &'a [f64],
    predicted: &'a [f64],
}

impl<'a> MetricInput<'a> {
    pub fn new(train: &'a [f64], actual: &'a [f64], predicted: &'a [f64]) -> Result<Self, EvalError> {
        if actual.is_empty() {
            return Err(EvalError::NoForecasts);
        }
        if train.len() < 2 {
            return Err(EvalError::ShortTraining(train.len()));
        }
        if actual.len() != predicted.len() {
            return Err(EvalError::LengthMismatch {
                what: "actual vs predicted",
                left: actual.len(),
                right: predicted.len(),
            });
        }
        for (name, xs) in [("training series", train), ("actuals", actual), ("predictions", predicted)] {
            if xs.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::NonFinite(name));
            }
        }
        Ok(Self {
            train,
            actual,
            predicted,
        })
    }

    pub fn horizon(&self) -> usize {
        self.actual.len()
    }

    fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.actual.iter().zip(self.predicted).map(|(a, p)| a - p)
    }

    fn train_diffs(&self) -> impl Iterator<Item = f64> + '_ {
        self.train.windows(2).map(|w| w[1] - w[0])
    }
}

pub fn mae(input: &MetricInput) -> f64 {
    input.errors().map(f64::abs).sum::<f64>() / input.horizon() as f64
}

pub fn rmse(input: &MetricInput) -> f64 {
    (input.errors().map(|e| e * e).sum::<f64>() / input.horizon() as f64).sqrt()
}

/// Test MAE over the in-sample MAE of the previous-value forecast.
pub fn mase(input: &MetricInput) -> Result<f64, EvalError> {
    let n1 = (input.train.len() - 1) as f64;
    let scale = input.train_diffs().map(f64::abs).sum::<f64>() / n1;
    if scale == 0.0 {
        return Err(EvalError::ConstantTraining);
    }
    Ok(mae(input) / scale)
}

/// Root of test MSE over the in-sample MSE of the previous-value forecast.
pub fn rmsse(input: &MetricInput) -> Result<f64, EvalError> {
    let n1 = (input.train.len() - 1) as f64;
    let scale = input.train_diffs().map(|d| d * d).sum::<f64>() / n1;
    if scale == 0.0 {
        return Err(EvalError::ConstantTraining);
    }
    let mse = input.errors().map(|e| e * e).sum::<f64>() / input.horizon() as f64;
    Ok((mse / scale).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub rmsse: f64,
    pub mase: f64,
}

pub fn regression_metrics(input: &MetricInput) -> Result<RegressionMetrics, EvalError> {
    Ok(RegressionMetrics {
        mae: mae(input),
        rmse: rmse(input),
        rmsse: rmsse(input)?,
        mase: mase(input)?,
    })
}

/// How a move of exactly zero is labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    #[default]
    Fall,
    Rise,
}

/// `true` for a rise from `prev` to `next`.
pub fn is_rise(prev: f64, next: f64, tie: TieRule) -> bool {
    match next.partial_cmp(&prev) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Equal) => tie == TieRule::Rise,
        _ => false,
    }
}

/// Confusion counts with Rise as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DirectionalOutcome {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl DirectionalOutcome {
    pub fn record(&mut self, actual_rise: bool, predicted_rise: bool) {
        match (actual_rise, predicted_rise) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision_rise(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn precision_fall(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fn_)
    }

    /// Harmonic mean of Rise precision and recall.
    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision_rise()?, self.recall()?);
        if p + r == 0.0 {
            Some(0.0)
        } else {
            Some(2.0 * p * r / (p + r))
        }
    }
}

/// Counts true versus predicted direction, both measured from
/// `prev_actuals[i]`.
pub fn directional_outcomes(
    prev_actuals: &[f64],
    actuals: &[f64],
    predictions: &[f64],
    tie: TieRule,
) -> Result<DirectionalOutcome, EvalError> {
    if prev_actuals.len() != actuals.len() || actuals.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            what: "directional inputs",
            left: prev_actuals.len(),
            right: if prev_actuals.len() != actuals.len() {
                actuals.len()
            } else {
                predictions.len()
            },
        });
    }
    let mut out = DirectionalOutcome::default();
    for ((&p, &a), &f) in prev_actuals.iter().zip(actuals).zip(predictions) {
        out.record(is_rise(p, a, tie), is_rise(p, f, tie));
    }
    Ok(out)
}

/// Reference price the predicted direction is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionReference {
    /// The last original observation.
    #[default]
    OriginalPrevious,
    /// The last denoised value.
    DenoisedPrevious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolOptions {
    pub tie: TieRule,
    pub reference: DirectionReference,
}

/// What produces the forecasts being evaluated.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a dyn Forecaster),
    /// The previous original observation; `window_length` aligns its
    /// forecast positions with those of the windowed models.
    Naive { window_length: usize },
}

impl Predictor<'_> {
    pub fn window_length(&self) -> usize {
        match self {
            Predictor::Model(m) => m.window_length(),
            Predictor::Naive { window_length } => *window_length,
        }
    }
}

/// Aligned series and split boundaries for [`evaluate_protocol`].
#[derive(Debug, Clone, Copy)]
pub struct ProtocolData<'a> {
    pub original: &'a [f64],
    pub denoised: &'a [f64],
    /// Train, validation and test index ranges.
    pub ranges: &'a [Range<usize>; 3],
    /// Fitted on the denoised training split.
    pub normaliser: &'a Normaliser,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionPoint {
    /// Position in the full series.
    pub index: usize,
    pub prev_actual: f64,
    pub actual: f64,
    pub predicted: f64,
    pub actual_rise: bool,
    pub predicted_rise: bool,
}

impl PredictionPoint {
    pub fn correct(&self) -> bool {
        self.actual_rise == self.predicted_rise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub partition: Partition,
    pub outcome: DirectionalOutcome,
    pub points: Vec<PredictionPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub model: String,
    /// Test-split regression scores on the price scale.
    pub regression: RegressionMetrics,
    pub train: SplitEvaluation,
    pub validation: SplitEvaluation,
    pub test: SplitEvaluation,
}

fn evaluate_split(
    predictor: Predictor,
    data: &ProtocolData,
    partition: Partition,
    range: Range<usize>,
    options: ProtocolOptions,
    exec: Execution,
) -> Result<SplitEvaluation, EvalError> {
    let l = predictor.window_length();
    let denoised = &data.denoised[range.clone()];
    let windows = make_windows(&data.normaliser.apply_all(denoised), l)?.with_offset(range.start);
    let indices = windows.source_indices().to_vec();
    let predicted: Vec<f64> = match predictor {
        Predictor::Model(model) => {
            let flat: Vec<f64> = windows.inputs().flatten().copied().collect();
            data.normaliser.inverse_all(&model.predict(&flat, exec)?)
        }
        Predictor::Naive { .. } => indices.iter().map(|&i| data.original[i - 1]).collect(),
    };
    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite("predictions"));
    }
    let mut outcome = DirectionalOutcome::default();
    let points = indices
        .iter()
        .zip(&predicted)
        .map(|(&i, &f)| {
            let prev_actual = data.original[i - 1];
            let reference = match options.reference {
                DirectionReference::OriginalPrevious => prev_actual,
                DirectionReference::DenoisedPrevious => data.denoised[i - 1],
            };
            let actual = data.original[i];
            let p = PredictionPoint {
                index: i,
                prev_actual,
                actual,
                predicted: f,
                actual_rise: is_rise(prev_actual, actual, options.tie),
                predicted_rise: is_rise(reference, f, options.tie),
            };
            outcome.record(p.actual_rise, p.predicted_rise);
            p
        })
        .collect();
    Ok(SplitEvaluation {
        partition,
        outcome,
        points,
    })
}

/// Scores `predictor` on every split. Windows are drawn from the
/// normalised denoised series of each split independently; forecasts are
/// mapped back to the price scale and compared with the original series.
pub fn evaluate_protocol(
    dataset: &str,
    model_name: &str,
    predictor: Predictor,
    data: &ProtocolData,
    options: ProtocolOptions,
    exec: Execution,
) -> Result<EvaluationReport, EvalError> {
    if data.original.len() != data.denoised.len() {
        return Err(EvalError::LengthMismatch {
            what: "original vs denoised series",
            left: data.original.len(),
            right: data.denoised.len(),
        });
    }
    if data.ranges.iter().any(|r| r.end > data.original.len()) {
        return Err(EvalError::LengthMismatch {
            what: "split ranges vs series",
            left: data.ranges[2].end,
            right: data.original.len(),
        });
    }
    let [tr, va, te] = data.ranges.clone();
    let train = evaluate_split(predictor, data, Partition::Train, tr.clone(), options, exec)?;
    let validation = evaluate_split(predictor, data, Partition::Validation, va, options, exec)?;
    let test = evaluate_split(predictor, data, Partition::Test, te, options, exec)?;
    let actual: Vec<f64> = test.points.iter().map(|p| p.actual).collect();
    let predicted: Vec<f64> = test.points.iter().map(|p| p.predicted).collect();
    let input = MetricInput::new(&data.original[tr], &actual, &predicted)?;
    Ok(EvaluationReport {
        dataset: dataset.to_string(),
        model: model_name.to_string(),
        regression: regression_metrics(&input)?,
        train,
        validation,
        test,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

fn full(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| x.to_string())
}

/// Regression table (MAE, RMSE, RMSSE, MASE) followed by the directional
/// table, one row per report.
pub fn markdown_tables(reports: &[EvaluationReport]) -> String {
    let mut s = String::from("| Dataset | Model | MAE | RMSE | RMSSE | MASE |\n|---|---|---|---|---|---|\n");
    for r in reports {
        let m = &r.regression;
        let _ = writeln!(
            s,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |",
            r.dataset, r.model, m.mae, m.rmse, m.rmsse, m.mase
        );
    }
    s.push_str(
        "\n| Dataset | Model | Train Accuracy | Val Accuracy | Test Accuracy | Recall | Precision (Rise) | Precision (Fall) | F1 Score |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        let t = &r.test.outcome;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.dataset,
            r.model,
            pct(r.train.outcome.accuracy()),
            pct(r.validation.outcome.accuracy()),
            pct(t.accuracy()),
            pct(t.recall()),
            pct(t.precision_rise()),
            pct(t.precision_fall()),
            pct(t.f1())
        );
    }
    s
}

impl EvaluationReport {
    pub fn to_markdown(&self) -> String {
        markdown_tables(std::slice::from_ref(self))
    }

    /// `key: value` lines at full precision.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {}", self.dataset);
        let _ = writeln!(s, "model: {}", self.model);
        let m = &self.regression;
        let _ = writeln!(s, "test.mae: {}", m.mae);
        let _ = writeln!(s, "test.rmse: {}", m.rmse);
        let _ = writeln!(s, "test.rmsse: {}", m.rmsse);
        let _ = writeln!(s, "test.mase: {}", m.mase);
        for split in [&self.train, &self.validation, &self.test] {
            let name = split.partition.to_string();
            let o = &split.outcome;
            let _ = writeln!(s, "{name}.forecasts: {}", o.total());
            let _ = writeln!(s, "{name}.tp: {}", o.tp);
            let _ = writeln!(s, "{name}.fp: {}", o.fp);
            let _ = writeln!(s, "{name}.tn: {}", o.tn);
            let _ = writeln!(s, "{name}.fn: {}", o.fn_);
            let _ = writeln!(s, "{name}.accuracy: {}", full(o.accuracy()));
            let _ = writeln!(s, "{name}.recall: {}", full(o.recall()));
            let _ = writeln!(s, "{name}.precision_rise: {}", full(o.precision_rise()));
            let _ = writeln!(s, "{name}.precision_fall: {}", full(o.precision_fall()));
            let _ = writeln!(s, "{name}.f1: {}", full(o.f1()));
        }
        s
    }
}

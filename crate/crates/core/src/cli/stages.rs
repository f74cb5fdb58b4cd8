//! Pipeline stages. Each stage reads its inputs from files written by the
//! previous one, so running them one by one gives the same bytes as
//! `trendlab run`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::artifacts::{self as art, DenoisedSeries};
use super::config::{DenoiseScope, InputSeries, ModelKind, RunConfig, SplitRule};
use super::CliError;
use crate::baselines::{Tcn, TcnConfig};
use crate::evaluation::{evaluate_protocol, markdown_tables, EvaluationReport, Predictor, ProtocolData, ProtocolOptions};
use crate::exec::Execution;
use crate::nn::Forecaster;
use crate::series_io::{make_windows, parse_csv, split, Normaliser, Partition, SplitSpec};
use crate::training::{fit, TrainConfig, TrainError};
use crate::wavelet::denoise;
use crate::xlstm_ts::{XlstmTs, XlstmTsConfig};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_dataset(run: &RunConfig) -> Result<Vec<u8>, CliError> {
    fs::read(&run.dataset).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Usage(format!("dataset file not found: {}", run.dataset.display()))
        } else {
            CliError::Usage(format!("cannot read dataset {}: {e}", run.dataset.display()))
        }
    })
}

#[derive(Serialize)]
struct DenoiseKey<'a> {
    stage: &'static str,
    dataset_sha256: String,
    frequency: crate::series_io::Frequency,
    column: super::config::PriceColumn,
    split: &'a super::config::SplitSection,
    denoise: &'a super::config::DenoiseSection,
}

#[derive(Serialize)]
struct TrainKey<'a> {
    stage: &'static str,
    upstream: &'a str,
    model: ModelKind,
    xlstm: Option<&'a XlstmTsConfig>,
    tcn: Option<&'a TcnConfig>,
    train: &'a TrainConfig,
    seed: u64,
    train_on: InputSeries,
}

#[derive(Serialize)]
struct EvaluateKey<'a> {
    stage: &'static str,
    upstream: &'a str,
    label: &'a str,
    model: ModelKind,
    window_length: usize,
    train_on: InputSeries,
    evaluation: &'a ProtocolOptions,
    plot: bool,
}

/// Fingerprints of every stage for `run`, chained so that a change
/// upstream invalidates everything after it.
pub struct Fingerprints {
    pub denoise: String,
    pub train: Option<String>,
    pub evaluate: String,
}

impl Fingerprints {
    pub fn compute(run: &RunConfig) -> Result<Self, CliError> {
        let denoise = art::fingerprint(&DenoiseKey {
            stage: "denoise",
            dataset_sha256: art::sha256_hex(&read_dataset(run)?),
            frequency: run.frequency,
            column: run.column,
            split: &run.split,
            denoise: &run.denoise,
        });
        let train = (run.model != ModelKind::Naive).then(|| {
            art::fingerprint(&TrainKey {
                stage: "train",
                upstream: &denoise,
                model: run.model,
                xlstm: (run.model == ModelKind::XlstmTs).then_some(&run.xlstm),
                tcn: (run.model == ModelKind::Tcn).then_some(&run.tcn),
                train: &run.train,
                seed: run.seed,
                train_on: run.train_on,
            })
        });
        let evaluate = art::fingerprint(&EvaluateKey {
            stage: "evaluate",
            upstream: train.as_deref().unwrap_or(&denoise),
            label: &run.label,
            model: run.model,
            window_length: run.window_length(),
            train_on: run.train_on,
            evaluation: &run.evaluation,
            plot: run.plot,
        });
        Ok(Self {
            denoise,
            train,
            evaluate,
        })
    }
}

/// Ingests the dataset, assigns partitions and writes the denoised and
/// noise components.
pub fn denoise_stage(run: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let fp = Fingerprints::compute(run)?;
    let bytes = read_dataset(run)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| runtime(format!("{}: not valid UTF-8", run.dataset.display())))?;
    let series = parse_csv(&text, run.frequency)
        .map_err(|e| runtime(format!("{}: {e}", run.dataset.display())))?
        .with_symbol(run.label.clone());
    let original = series
        .bars()
        .iter()
        .map(|b| run.column.read(b))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| runtime(format!("{}: column {:?} is absent", run.dataset.display(), run.column)))?;
    let spec = match run.split.rule(run.frequency)? {
        SplitRule::Dates(spec) => spec,
        SplitRule::Fractions(f) => SplitSpec::from_fractions(&series, f).map_err(runtime)?,
    };
    let parts = split(&series, &spec).map_err(runtime)?;
    let mut partitions = vec![None; original.len()];
    for (r, p) in parts.ranges.iter().zip([Partition::Train, Partition::Validation, Partition::Test]) {
        partitions[r.clone()].iter_mut().for_each(|q| *q = Some(p));
    }
    let cfg = run.denoise.config();
    let denoised = match run.denoise.scope {
        DenoiseScope::Full => denoise(&original, &cfg).map_err(runtime)?.denoised,
        DenoiseScope::PerSplit => {
            // Points outside every partition are passed through unchanged.
            let mut out = original.clone();
            for r in &parts.ranges {
                let d = denoise(&original[r.clone()], &cfg)
                    .map_err(|e| runtime(format!("denoising a partition of {} points: {e}", r.len())))?;
                out[r.clone()].copy_from_slice(&d.denoised);
            }
            out
        }
    };
    let dates = series
        .timestamps()
        .into_iter()
        .map(|t| crate::series_io::format_timestamp(t, run.frequency))
        .collect();
    let out = DenoisedSeries {
        dates,
        partitions,
        original,
        denoised,
    };
    art::write(dir, art::DENOISED, &out.to_csv())?;
    art::write(dir, art::NOISE, &out.noise_csv())?;
    art::write(dir, &art::stamp_file("denoise"), &format!("{}\n", fp.denoise))
}

struct Prepared {
    series: DenoisedSeries,
    ranges: [std::ops::Range<usize>; 3],
    normaliser: Normaliser,
}

fn prepare(run: &RunConfig, dir: &Path, fp: &Fingerprints) -> Result<Prepared, CliError> {
    art::require_fresh(dir, "denoise", &fp.denoise)?;
    let series = DenoisedSeries::from_csv(&art::read_upstream(dir, art::DENOISED, "denoise")?)?;
    let ranges = series.ranges()?;
    let normaliser = Normaliser::fit_values(&series.inputs(run.train_on)[ranges[0].clone()]).map_err(runtime)?;
    Ok(Prepared {
        series,
        ranges,
        normaliser,
    })
}

/// Outcome of the train stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trained {
    Done,
    /// The naive model has nothing to fit.
    NotApplicable,
}

pub fn train_stage(run: &RunConfig, dir: &Path, exec: Execution) -> Result<Trained, CliError> {
    let fp = Fingerprints::compute(run)?;
    let Some(train_fp) = fp.train.clone() else {
        return Ok(Trained::NotApplicable);
    };
    let prep = prepare(run, dir, &fp)?;
    let inputs = prep.series.inputs(run.train_on);
    let l = run.window_length();
    let windows = |r: &std::ops::Range<usize>, what: &str| {
        make_windows(&prep.normaliser.apply_all(&inputs[r.clone()]), l)
            .map_err(|e| runtime(format!("{what} split: {e}")))
    };
    let train = windows(&prep.ranges[0], "training")?;
    let val = windows(&prep.ranges[1], "validation")?;
    let (result, checkpoint) = match run.model {
        ModelKind::XlstmTs => {
            let mut m = XlstmTs::new(run.xlstm.clone(), run.seed).map_err(runtime)?;
            let r = fit(&mut m, &train, &val, &run.train, exec);
            (r, m.to_checkpoint().map_err(runtime)?)
        }
        ModelKind::Tcn => {
            let mut m = Tcn::new(run.tcn.clone(), run.seed).map_err(runtime)?;
            let r = fit(&mut m, &train, &val, &run.train, exec);
            (r, m.to_checkpoint().map_err(runtime)?)
        }
        ModelKind::Naive => unreachable!("naive runs return above"),
    };
    art::remove(dir, &art::stamp_file("train"))?;
    match result {
        Ok(report) => {
            art::write(dir, art::TRAIN_REPORT, &report.to_csv())?;
            art::write(dir, art::TRAIN_SUMMARY, &report.summary())?;
            art::write(dir, art::CHECKPOINT, &checkpoint)?;
            art::write(dir, &art::stamp_file("train"), &format!("{train_fp}\n"))?;
            Ok(Trained::Done)
        }
        Err(TrainError::NonFiniteLoss { epoch, batch, report }) => {
            art::write(dir, art::TRAIN_REPORT, &report.to_csv())?;
            art::write(dir, art::TRAIN_SUMMARY, &report.summary())?;
            Err(runtime(format!(
                "non-finite loss at epoch {epoch}, batch {batch}; partial training report written"
            )))
        }
        Err(e) => Err(runtime(e)),
    }
}

pub fn evaluate_stage(run: &RunConfig, dir: &Path, exec: Execution) -> Result<EvaluationReport, CliError> {
    let fp = Fingerprints::compute(run)?;
    let prep = prepare(run, dir, &fp)?;
    let xlstm;
    let tcn;
    let predictor = match run.model {
        ModelKind::Naive => Predictor::Naive {
            window_length: run.naive.window_length,
        },
        kind => {
            art::require_fresh(dir, "train", fp.train.as_deref().unwrap_or_default())?;
            let text = art::read_upstream(dir, art::CHECKPOINT, "train")?;
            let model: &dyn Forecaster = if kind == ModelKind::XlstmTs {
                xlstm = XlstmTs::from_checkpoint(&text).map_err(runtime)?;
                &xlstm
            } else {
                tcn = Tcn::from_checkpoint(&text).map_err(runtime)?;
                &tcn
            };
            Predictor::Model(model)
        }
    };
    let data = ProtocolData {
        original: &prep.series.original,
        denoised: prep.series.inputs(run.train_on),
        ranges: &prep.ranges,
        normaliser: &prep.normaliser,
    };
    let report =
        evaluate_protocol(&run.label, run.model.label(), predictor, &data, run.evaluation, exec).map_err(runtime)?;
    art::remove(dir, &art::stamp_file("evaluate"))?;
    art::write(dir, art::EVAL_TEXT, &report.to_text())?;
    art::write(dir, art::EVAL_MARKDOWN, &report.to_markdown())?;
    art::write(
        dir,
        art::EVAL_JSON,
        &(serde_json::to_string_pretty(&report).map_err(runtime)? + "\n"),
    )?;
    art::write(
        dir,
        art::PREDICTIONS,
        &art::predictions_csv(&prep.series.dates, [&report.train, &report.validation, &report.test]),
    )?;
    if run.plot {
        let title = format!("{} {} (test split)", run.label, run.model.label());
        art::write(dir, art::PLOT, &art::predictions_svg(&title, &report.test.points))?;
    } else {
        art::remove(dir, art::PLOT)?;
    }
    art::write(dir, &art::stamp_file("evaluate"), &format!("{}\n", fp.evaluate))?;
    Ok(report)
}

/// Writes `report.md` from every run directory under `out_dir` holding an
/// evaluation, in name order; returns the tables.
pub fn report_stage(out_dir: &Path) -> Result<String, CliError> {
    let expected = || {
        format!(
            "expected run directories containing {}, {}, {} and {} (produce them with `trendlab run` or `trendlab evaluate`)",
            art::EVAL_JSON,
            art::EVAL_MARKDOWN,
            art::EVAL_TEXT,
            art::PREDICTIONS
        )
    };
    let entries = match fs::read_dir(out_dir) {
        Ok(e) => e,
        Err(_) => {
            return Err(CliError::Dependency(format!(
                "no evaluation artifacts in {}: directory is unreadable; {}",
                out_dir.display(),
                expected()
            )))
        }
    };
    let mut dirs: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(art::EVAL_JSON).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Dependency(format!(
            "no evaluation artifacts in {}; {}",
            out_dir.display(),
            expected()
        )));
    }
    let mut reports = Vec::new();
    for d in &dirs {
        let text = fs::read_to_string(d.join(art::EVAL_JSON)).map_err(runtime)?;
        let r: EvaluationReport = serde_json::from_str(&text)
            .map_err(|e| runtime(format!("{}: {e}", d.join(art::EVAL_JSON).display())))?;
        reports.push(r);
    }
    let tables = markdown_tables(&reports);
    art::write(out_dir, art::REPORT, &tables)?;
    Ok(tables)
}

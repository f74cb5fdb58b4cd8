//! On-disk formats shared by the pipeline stages.
//!
//! Per run directory:
//!
//! | file | producer | contents |
//! |---|---|---|
//! | `denoised.csv` | denoise | `date,partition,original,denoised` |
//! | `noise.csv` | denoise | `date,noise` (original − denoised) |
//! | `train_report.csv` | train | `epoch,train_loss,val_loss,lr` |
//! | `train_summary.txt` | train | stop/best epochs; wall clock last |
//! | `checkpoint.json` | train | model config and bit-exact weights |
//! | `evaluation.txt` / `.md` / `.json` | evaluate | metrics and tables |
//! | `predictions.csv` | evaluate | per-point forecasts with direction flags |
//! | `predictions.svg` | evaluate | test-split chart (when `plot = true`) |
//! | `<stage>.sha256` | each stage | fingerprint of the stage's inputs |
//! | `INCOMPLETE` | any | present while the run's artifacts are partial |
//!
//! Floats are written in shortest round-trip form, so a stage reading a
//! file sees exactly the values its producer held.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::InputSeries;
use super::CliError;
use crate::evaluation::{PredictionPoint, SplitEvaluation};
use crate::series_io::Partition;

pub const DENOISED: &str = "denoised.csv";
pub const NOISE: &str = "noise.csv";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.txt";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const EVAL_TEXT: &str = "evaluation.txt";
pub const EVAL_MARKDOWN: &str = "evaluation.md";
pub const EVAL_JSON: &str = "evaluation.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const PLOT: &str = "predictions.svg";
pub const INCOMPLETE: &str = "INCOMPLETE";
pub const REPORT: &str = "report.md";

/// Fingerprint file written by `stage`.
pub fn stamp_file(stage: &str) -> String {
    format!("{stage}.sha256")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of the canonical JSON encoding of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("config serialises").as_bytes())
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn remove(dir: &Path, name: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    match fs::remove_file(&path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
            Err(CliError::Runtime(format!("cannot remove {}: {e}", path.display())))
        }
        _ => Ok(()),
    }
}

/// Reads an upstream artifact; a missing file is a dependency error.
pub fn read_upstream(dir: &Path, name: &str, producer: &str) -> Result<String, CliError> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Dependency(format!(
                "missing artifact {}; run `trendlab {producer}` first",
                path.display()
            ))
        } else {
            CliError::Runtime(format!("cannot read {}: {e}", path.display()))
        }
    })
}

/// Fails unless `stage` last ran with inputs hashing to `expected`.
pub fn require_fresh(dir: &Path, stage: &str, expected: &str) -> Result<(), CliError> {
    let name = stamp_file(stage);
    let found = read_upstream(dir, &name, stage)?;
    if found.trim() != expected {
        return Err(CliError::Dependency(format!(
            "stale artifact {}: {stage} ran with different inputs or settings; rerun `trendlab {stage}`",
            dir.join(name).display()
        )));
    }
    Ok(())
}

fn partition_name(p: Option<Partition>) -> &'static str {
    match p {
        Some(Partition::Train) => "train",
        Some(Partition::Validation) => "validation",
        Some(Partition::Test) => "test",
        None => "none",
    }
}

fn parse_partition(s: &str) -> Option<Option<Partition>> {
    match s {
        "train" => Some(Some(Partition::Train)),
        "validation" => Some(Some(Partition::Validation)),
        "test" => Some(Some(Partition::Test)),
        "none" => Some(None),
        _ => None,
    }
}

/// The aligned original and denoised series with partition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedSeries {
    pub dates: Vec<String>,
    pub partitions: Vec<Option<Partition>>,
    pub original: Vec<f64>,
    pub denoised: Vec<f64>,
}

impl DenoisedSeries {
    pub fn inputs(&self, which: InputSeries) -> &[f64] {
        match which {
            InputSeries::Denoised => &self.denoised,
            InputSeries::Original => &self.original,
        }
    }

    /// Train, validation and test ranges; each must be one contiguous block.
    pub fn ranges(&self) -> Result<[Range<usize>; 3], CliError> {
        let parts = [Partition::Train, Partition::Validation, Partition::Test];
        let mut out = [0..0, 0..0, 0..0];
        for (slot, p) in out.iter_mut().zip(parts) {
            let first = self.partitions.iter().position(|q| *q == Some(p));
            let last = self.partitions.iter().rposition(|q| *q == Some(p));
            let (Some(a), Some(b)) = (first, last) else {
                return Err(CliError::Runtime(format!("{DENOISED}: {} partition is empty", partition_name(Some(p)))));
            };
            if self.partitions[a..=b].iter().any(|q| *q != Some(p)) {
                return Err(CliError::Runtime(format!(
                    "{DENOISED}: {} partition is not contiguous",
                    partition_name(Some(p))
                )));
            }
            *slot = a..b + 1;
        }
        if !(out[0].end <= out[1].start && out[1].end <= out[2].start) {
            return Err(CliError::Runtime(format!("{DENOISED}: partitions are out of order")));
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("date,partition,original,denoised\n");
        for i in 0..self.dates.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.dates[i],
                partition_name(self.partitions[i]),
                self.original[i],
                self.denoised[i]
            );
        }
        s
    }

    pub fn noise_csv(&self) -> String {
        let mut s = String::from("date,noise\n");
        for i in 0..self.dates.len() {
            let _ = writeln!(s, "{},{}", self.dates[i], self.original[i] - self.denoised[i]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let bad = |line: u64, m: &str| CliError::Runtime(format!("{DENOISED} line {line}: {m}"));
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| bad(1, &e.to_string()))?;
        if header != vec!["date", "partition", "original", "denoised"] {
            return Err(bad(1, "expected header date,partition,original,denoised"));
        }
        let mut out = Self {
            dates: Vec::new(),
            partitions: Vec::new(),
            original: Vec::new(),
            denoised: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(0, &e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(line, &format!("bad number {:?}", &rec[i])))
            };
            out.dates.push(rec[0].to_string());
            out.partitions
                .push(parse_partition(&rec[1]).ok_or_else(|| bad(line, &format!("bad partition {:?}", &rec[1])))?);
            out.original.push(num(2)?);
            out.denoised.push(num(3)?);
        }
        if out.dates.is_empty() {
            return Err(bad(2, "no rows"));
        }
        Ok(out)
    }
}

pub fn predictions_csv(dates: &[String], splits: [&SplitEvaluation; 3]) -> String {
    let mut s = String::from(
        "partition,index,date,prev_actual,actual,predicted,actual_direction,predicted_direction,correct\n",
    );
    let dir = |rise: bool| if rise { "rise" } else { "fall" };
    for split in splits {
        for p in &split.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                partition_name(Some(split.partition)),
                p.index,
                dates[p.index],
                p.prev_actual,
                p.actual,
                p.predicted,
                dir(p.actual_rise),
                dir(p.predicted_rise),
                p.correct()
            );
        }
    }
    s
}

/// Static line chart of actual against predicted prices; markers show
/// whether each predicted direction was correct.
pub fn predictions_svg(title: &str, points: &[PredictionPoint]) -> String {
    const W: f64 = 960.0;
    const H: f64 = 400.0;
    const PAD: f64 = 40.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        escape(title)
    );
    if points.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let lo = points.iter().flat_map(|p| [p.actual, p.predicted]).fold(f64::INFINITY, f64::min);
    let hi = points.iter().flat_map(|p| [p.actual, p.predicted]).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = points.len().max(2) - 1;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
    let line = |f: &dyn Fn(&PredictionPoint) -> f64| {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{:.2},{:.2}", x(i), y(f(p))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"{}\"/>",
        line(&|p| p.actual)
    );
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>",
        line(&|p| p.predicted)
    );
    for (i, p) in points.iter().enumerate() {
        let colour = if p.correct() { "green" } else { "red" };
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{colour}\"/>",
            x(i),
            y(p.predicted)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">black: actual, blue: predicted, \
         green/red: direction correct/incorrect</text>",
        H - 12.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn run_dir(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(name)
}

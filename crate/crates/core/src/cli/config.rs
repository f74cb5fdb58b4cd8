//! Experiment configuration: a TOML file with top-level defaults and one
//! `[[run]]` table per experiment.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//!
//! [[run]]
//! name = "ewz-daily-xlstm"
//! dataset = "data/EWZ_daily.csv"
//! model = "xlstm_ts"
//!
//! [run.denoise]
//! levels = 4
//!
//! [run.train]
//! max_epochs = 50
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::baselines::TcnConfig;
use crate::evaluation::ProtocolOptions;
use crate::series_io::{Frequency, PriceBar, SplitSpec, TimeRange};
use crate::training::TrainConfig;
use crate::wavelet::{DenoiseConfig, Padding};
use crate::xlstm_ts::XlstmTsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    XlstmTs,
    Tcn,
    Naive,
}

impl ModelKind {
    /// Name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::XlstmTs => "xLSTM-TS",
            ModelKind::Tcn => "TCN",
            ModelKind::Naive => "Naive",
        }
    }
}

/// OHLCV field used as the univariate series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceColumn {
    Open,
    High,
    Low,
    #[default]
    Close,
    AdjClose,
}

impl PriceColumn {
    pub fn read(self, bar: &PriceBar) -> Option<f64> {
        match self {
            PriceColumn::Open => Some(bar.open),
            PriceColumn::High => Some(bar.high),
            PriceColumn::Low => Some(bar.low),
            PriceColumn::Close => Some(bar.close),
            PriceColumn::AdjClose => bar.adj_close,
        }
    }
}

/// Series the model is trained and evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSeries {
    #[default]
    Denoised,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseScope {
    /// One decomposition of the whole history before splitting.
    #[default]
    Full,
    /// Each partition denoised on its own.
    PerSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseSection {
    pub levels: usize,
    pub padding: Padding,
    pub zeroed_levels: Vec<usize>,
    pub thresholded_levels: Option<Vec<usize>>,
    pub scope: DenoiseScope,
}

impl Default for DenoiseSection {
    fn default() -> Self {
        let d = DenoiseConfig::default();
        Self {
            levels: d.levels,
            padding: d.padding,
            zeroed_levels: d.zeroed_levels,
            thresholded_levels: d.thresholded_levels,
            scope: DenoiseScope::Full,
        }
    }
}

impl DenoiseSection {
    pub fn config(&self) -> DenoiseConfig {
        DenoiseConfig {
            levels: self.levels,
            padding: self.padding,
            zeroed_levels: self.zeroed_levels.clone(),
            thresholded_levels: self.thresholded_levels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPreset {
    Daily,
    Hourly,
}

/// Exactly one of `preset`, `fractions` or the three date pairs; with
/// none given the preset matching the run's frequency applies.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub preset: Option<SplitPreset>,
    pub fractions: Option<[f64; 3]>,
    /// Inclusive `[first, last]` calendar days.
    pub train: Option<[String; 2]>,
    pub validation: Option<[String; 2]>,
    pub test: Option<[String; 2]>,
}

/// How a run's partitions are located.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    Dates(SplitSpec),
    Fractions([f64; 3]),
}

fn day(text: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .map_err(|_| CliError::Usage(format!("invalid date {text:?}; expected YYYY-MM-DD")))
}

impl SplitSection {
    pub fn rule(&self, frequency: Frequency) -> Result<SplitRule, CliError> {
        let dates = [&self.train, &self.validation, &self.test];
        let given_dates = dates.iter().filter(|d| d.is_some()).count();
        let choices = self.preset.is_some() as usize + self.fractions.is_some() as usize + (given_dates > 0) as usize;
        if choices > 1 {
            return Err(CliError::Usage(
                "split: give only one of preset, fractions, or train/validation/test dates".into(),
            ));
        }
        if given_dates > 0 {
            let [Some(tr), Some(va), Some(te)] = dates else {
                return Err(CliError::Usage("split: train, validation and test dates must all be given".into()));
            };
            let range = |r: &[String; 2]| Ok::<_, CliError>(TimeRange::days(day(&r[0])?, day(&r[1])?));
            let spec = SplitSpec::new(range(tr)?, range(va)?, range(te)?, [0.0, 0.0, 1.0]).map_err(usage)?;
            return Ok(SplitRule::Dates(spec));
        }
        if let Some(f) = self.fractions {
            if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(CliError::Usage(format!("split: fractions {f:?} must be positive and sum to 1")));
            }
            return Ok(SplitRule::Fractions(f));
        }
        let preset = self.preset.unwrap_or(match frequency {
            Frequency::Daily => SplitPreset::Daily,
            Frequency::Hourly => SplitPreset::Hourly,
        });
        Ok(SplitRule::Dates(match preset {
            SplitPreset::Daily => SplitSpec::daily_default(),
            SplitPreset::Hourly => SplitSpec::hourly_default(),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NaiveSection {
    /// Aligns forecast positions with windowed models of this length.
    pub window_length: usize,
}

impl Default for NaiveSection {
    fn default() -> Self {
        Self { window_length: 150 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    dataset: PathBuf,
    model: ModelKind,
    #[serde(default)]
    label: Option<String>,
    #[serde(default = "daily")]
    frequency: Frequency,
    #[serde(default)]
    column: PriceColumn,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    train_on: InputSeries,
    #[serde(default)]
    plot: bool,
    #[serde(default)]
    split: SplitSection,
    #[serde(default)]
    denoise: DenoiseSection,
    #[serde(default)]
    xlstm: XlstmTsConfig,
    #[serde(default)]
    tcn: TcnConfig,
    #[serde(default)]
    naive: NaiveSection,
    /// Merged over the model's own training defaults.
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    evaluation: ProtocolOptions,
}

fn daily() -> Frequency {
    Frequency::Daily
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    jobs: Option<usize>,
    #[serde(default, rename = "run")]
    runs: Vec<RawRun>,
}

/// One fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub label: String,
    pub dataset: PathBuf,
    pub frequency: Frequency,
    pub column: PriceColumn,
    pub model: ModelKind,
    pub seed: u64,
    pub train_on: InputSeries,
    pub plot: bool,
    pub split: SplitSection,
    pub denoise: DenoiseSection,
    pub xlstm: XlstmTsConfig,
    pub tcn: TcnConfig,
    pub naive: NaiveSection,
    pub train: TrainConfig,
    pub evaluation: ProtocolOptions,
}

impl RunConfig {
    pub fn window_length(&self) -> usize {
        match self.model {
            ModelKind::XlstmTs => self.xlstm.sequence_length,
            ModelKind::Tcn => self.tcn.sequence_length,
            ModelKind::Naive => self.naive.window_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub runs: Vec<RunConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub runs: Vec<String>,
    pub max_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub sequence_length: Option<usize>,
    pub levels: Option<usize>,
    pub padding: Option<Padding>,
    pub zeroed_levels: Option<Vec<usize>>,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn train_defaults(model: ModelKind) -> TrainConfig {
    match model {
        ModelKind::Tcn => TrainConfig::tcn(),
        _ => TrainConfig::xlstm(),
    }
}

fn merge_train(model: ModelKind, table: toml::Table) -> Result<TrainConfig, CliError> {
    let base = toml::Value::try_from(train_defaults(model)).map_err(usage)?;
    let mut merged = base.as_table().cloned().unwrap_or_default();
    merged.extend(table);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| CliError::Usage(format!("train: {e}")))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.')
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
            .map_err(|e| match e {
                CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let raw: RawExperiment = toml::from_str(text).map_err(usage)?;
        if raw.runs.is_empty() {
            return Err(CliError::Usage("config defines no [[run]] tables".into()));
        }
        let mut seen = BTreeSet::new();
        let mut runs = Vec::new();
        for r in raw.runs {
            if !valid_name(&r.name) {
                return Err(CliError::Usage(format!(
                    "run name {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                    r.name
                )));
            }
            if !seen.insert(r.name.clone()) {
                return Err(CliError::Usage(format!("duplicate run name {:?}", r.name)));
            }
            if !overrides.runs.is_empty() && !overrides.runs.contains(&r.name) {
                continue;
            }
            let seed = overrides.seed.or(r.seed).unwrap_or(raw.seed);
            let mut train = merge_train(r.model, r.train)?;
            train.seed = seed;
            let mut run = RunConfig {
                label: r.label.unwrap_or_else(|| r.name.clone()),
                name: r.name,
                dataset: base.join(r.dataset),
                frequency: r.frequency,
                column: r.column,
                model: r.model,
                seed,
                train_on: r.train_on,
                plot: r.plot,
                split: r.split,
                denoise: r.denoise,
                xlstm: r.xlstm,
                tcn: r.tcn,
                naive: r.naive,
                train,
                evaluation: r.evaluation,
            };
            apply_overrides(&mut run, overrides);
            validate(&run)?;
            runs.push(run);
        }
        for wanted in &overrides.runs {
            if !seen.contains(wanted) {
                return Err(CliError::Usage(format!("--run {wanted:?} matches no run in the config")));
            }
        }
        let jobs = overrides.jobs.or(raw.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        let out_dir = match &overrides.out_dir {
            Some(p) => p.clone(),
            None => base.join(raw.out_dir.unwrap_or_else(|| PathBuf::from("out"))),
        };
        Ok(Self { out_dir, jobs, runs })
    }
}

fn apply_overrides(run: &mut RunConfig, o: &Overrides) {
    if let Some(v) = o.max_epochs {
        run.train.max_epochs = v;
    }
    if let Some(v) = o.learning_rate {
        run.train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = o.patience {
        run.train.early_stop_patience = v;
    }
    if let Some(v) = o.sequence_length {
        run.xlstm = run.xlstm.clone().with_sequence_length(v);
        run.tcn.sequence_length = v;
        run.naive.window_length = v;
    }
    if let Some(v) = o.levels {
        run.denoise.levels = v;
    }
    if let Some(v) = o.padding {
        run.denoise.padding = v;
    }
    if let Some(v) = &o.zeroed_levels {
        run.denoise.zeroed_levels = v.clone();
    }
}

fn validate(run: &RunConfig) -> Result<(), CliError> {
    let ctx = |e: &dyn std::fmt::Display| CliError::Usage(format!("run {:?}: {e}", run.name));
    run.split.rule(run.frequency).map_err(|e| ctx(&e))?;
    if run.denoise.levels == 0 {
        return Err(ctx(&"denoise.levels must be at least 1"));
    }
    for &l in run.denoise.zeroed_levels.iter().chain(run.denoise.thresholded_levels.iter().flatten()) {
        if l == 0 || l > run.denoise.levels {
            return Err(ctx(&format!("denoise level {l} outside 1..={}", run.denoise.levels)));
        }
    }
    match run.model {
        ModelKind::XlstmTs => run.xlstm.validate().map_err(|e| ctx(&e))?,
        ModelKind::Tcn => run.tcn.validate().map_err(|e| ctx(&e))?,
        ModelKind::Naive => {
            if run.naive.window_length == 0 {
                return Err(ctx(&"naive.window_length must be at least 1"));
            }
        }
    }
    run.train.validate().map_err(|e| ctx(&e))?;
    Ok(())
}

//! Comparison forecasters: the previous-value naive method and a
//! temporal convolutional network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Bound, CausalConv, Forecaster, Linear, ModelError, ParamStore};
use crate::numerics::{Graph, Var};

#[derive(Debug, Error, PartialEq)]
pub enum NaiveError {
    #[error("position 0 has no previous observation")]
    NoPredecessor,
    #[error("position {position} is outside a series of length {len}")]
    OutOfRange { position: usize, len: usize },
}

/// Prediction for each position `t` is `series[t − 1]`.
pub fn naive_forecast(series: &[f64], positions: &[usize]) -> Result<Vec<f64>, NaiveError> {
    positions
        .iter()
        .map(|&t| match t {
            0 => Err(NaiveError::NoPredecessor),
            t if t >= series.len() => Err(NaiveError::OutOfRange {
                position: t,
                len: series.len(),
            }),
            t => Ok(series[t - 1]),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub dropout: f64,
    pub dilation_base: usize,
    pub kernel_size: usize,
    pub num_filters: usize,
    pub sequence_length: usize,
    /// Overrides the receptive-field rule when set.
    pub num_layers: Option<usize>,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            dropout: 0.0,
            dilation_base: 2,
            kernel_size: 7,
            num_filters: 4,
            sequence_length: 100,
            num_layers: None,
        }
    }
}

impl TcnConfig {
    /// Receptive field `1 + (k − 1)·Σ_{ℓ<L} b^ℓ` of `layers` dilation levels.
    pub fn receptive_field(&self, layers: usize) -> usize {
        let mut span = 0usize;
        let mut d = 1usize;
        for _ in 0..layers {
            span = span.saturating_add(d);
            d = d.saturating_mul(self.dilation_base);
        }
        1 + (self.kernel_size - 1).saturating_mul(span)
    }

    /// Smallest layer count whose receptive field covers the sequence.
    pub fn layers(&self) -> usize {
        if let Some(l) = self.num_layers {
            return l;
        }
        let mut l = 1;
        while self.receptive_field(l) < self.sequence_length {
            l += 1;
        }
        l
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers() as u32).map(|l| self.dilation_base.pow(l)).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.dropout != 0.0 {
            return fail("only dropout = 0 is supported");
        }
        if self.kernel_size < 2 || self.dilation_base < 2 {
            return fail("kernel_size and dilation_base must be at least 2");
        }
        if self.num_filters == 0 || self.sequence_length == 0 {
            return fail("num_filters and sequence_length must be positive");
        }
        if self.num_layers == Some(0) {
            return fail("num_layers must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: CausalConv,
    conv2: CausalConv,
    skip: Option<CausalConv>,
}

#[derive(Debug, Clone)]
pub struct Tcn {
    config: TcnConfig,
    store: ParamStore,
    blocks: Vec<ResidualBlock>,
    head: Linear,
}

impl Tcn {
    pub fn new(config: TcnConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = config.num_filters;
        let blocks = config
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let c_in = if i == 0 { 1 } else { f };
                let name = format!("blocks.{i}");
                ResidualBlock {
                    conv1: CausalConv::new(&mut store, &format!("{name}.conv1"), c_in, f, config.kernel_size, d, &mut rng),
                    conv2: CausalConv::new(&mut store, &format!("{name}.conv2"), f, f, config.kernel_size, d, &mut rng),
                    skip: (c_in != f).then(|| CausalConv::new(&mut store, &format!("{name}.skip"), c_in, f, 1, 1, &mut rng)),
                }
            })
            .collect();
        let head = Linear::new(&mut store, "head", f, 1, true, &mut rng);
        Ok(Self {
            config,
            store,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn to_checkpoint(&self) -> Result<String, ModelError> {
        nn::save_checkpoint(&self.config, &self.store)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, ModelError> {
        let ckpt = nn::parse_checkpoint(text)?;
        let config: TcnConfig =
            serde_json::from_value(ckpt.model.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        nn::load_params(&mut model.store, &ckpt)?;
        Ok(model)
    }
}

impl Forecaster for Tcn {
    fn window_length(&self) -> usize {
        self.config.sequence_length
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, ModelError> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != 1 || s[1] != self.config.sequence_length {
            return Err(ModelError::WindowLength {
                expected: self.config.sequence_length,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = x;
        for b in &self.blocks {
            let y = b.conv1.forward(g, p, h)?;
            let y = g.relu(y);
            let y = b.conv2.forward(g, p, y)?;
            let y = g.relu(y);
            let res = match &b.skip {
                Some(skip) => skip.forward(g, p, h)?,
                None => h,
            };
            h = g.add(y, res)?;
        }
        let f = self.config.num_filters;
        let last = g.slice(h, 1, s[1] - 1, 1)?;
        let last = g.reshape(last, &[s[0], f])?;
        Ok(self.head.forward(g, p, last)?)
    }
}

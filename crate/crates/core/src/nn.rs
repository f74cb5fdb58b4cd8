//! Named parameter storage, the small layer vocabulary shared by the
//! forecasters, and the checkpoint container.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::numerics::{uniform_fan_in, Graph, NumericsError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("expected windows of length {expected}, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("non-finite activation in {block} at time step {step}")]
    NonFinite { block: String, step: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        Bound(self.values.iter().map(|t| g.leaf(t.clone(), trainable)).collect())
    }

    /// Gradients after `g.backward`, zero-filled for unreached parameters.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Multiplies every parameter by `factor`.
    pub fn scale_all(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|t| t.scale(factor));
    }
}

/// Graph handles for a [`ParamStore`] bound by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// `y = x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[d_in, d_out], d_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis with a learned scale and no shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    scale: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.weight"), Tensor::ones(&[dim])),
        }
    }

    pub fn scale(&self) -> ParamId {
        self.scale
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        let n = g.layer_norm(x, NORM_EPS);
        g.mul(n, p.var(self.scale))
    }
}

/// Block-diagonal projection: `heads` independent `d_in → d_out` maps.
#[derive(Debug, Clone)]
pub struct Headwise {
    weight: ParamId,
}

impl Headwise {
    pub fn new(store: &mut ParamStore, name: &str, heads: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), uniform_fan_in(&[heads, d_out, d_in], d_in, rng)),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        g.headwise_linear(x, p.var(self.weight))
    }
}

/// Per-channel causal convolution with bias.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: ParamId,
    bias: ParamId,
}

impl DepthwiseConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), uniform_fan_in(&[channels, kernel], kernel, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        g.depthwise_causal_conv1d(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Dense causal dilated convolution with bias.
#[derive(Debug, Clone)]
pub struct CausalConv {
    weight: ParamId,
    bias: ParamId,
    dilation: usize,
}

impl CausalConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_fan_in(&[c_out, c_in, kernel], c_in * kernel, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            dilation,
        }
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, NumericsError> {
        g.causal_conv1d(x, p.var(self.weight), Some(p.var(self.bias)), self.dilation)
    }
}

/// A trainable next-step forecaster over univariate windows.
pub trait Forecaster: Sync {
    fn window_length(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    /// `x: [batch, window_length, 1]` → `[batch, 1]`.
    fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var, ModelError>;

    /// Predictions for row-major windows of `window_length()` values each.
    ///
    /// Rows are processed in fixed-size chunks, so every prediction is
    /// independent of batch composition and of `exec`.
    fn predict(&self, windows: &[f64], exec: Execution) -> Result<Vec<f64>, ModelError> {
        const CHUNK: usize = 64;
        let l = self.window_length();
        if l == 0 || windows.len() % l != 0 {
            return Err(ModelError::WindowLength {
                expected: l,
                got: windows.len(),
            });
        }
        let rows = windows.len() / l;
        let chunks = rows.div_ceil(CHUNK);
        let parts = exec::map_range(exec, chunks, |c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(rows);
            let g = Graph::new();
            let p = self.params().bind(&g, false);
            let x = Tensor::new(vec![hi - lo, l, 1], windows[lo * l..hi * l].to_vec())?;
            let x = g.constant(x);
            let y = self.forward(&g, &p, x)?;
            Ok::<_, ModelError>(g.value(y).data().to_vec())
        });
        let mut out = Vec::with_capacity(rows);
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}

const CHECKPOINT_FORMAT: &str = "trendlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// Concatenated 16-digit hex encodings of the IEEE-754 bits.
    bits: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: serde_json::Value,
    params: Vec<ParamRecord>,
}

/// Serialises `config` and every parameter into a JSON document whose
/// float payload round-trips bit for bit.
pub fn save_checkpoint<C: Serialize>(config: &C, store: &ParamStore) -> Result<String, ModelError> {
    let params = store
        .iter()
        .map(|(name, t)| ParamRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            bits: t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: serde_json::to_value(config).map_err(|e| ModelError::Checkpoint(e.to_string()))?,
        params,
    };
    serde_json::to_string_pretty(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

/// Parsed checkpoint: the model config plus named tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format {} v{}", file.format, file.version)));
    }
    let mut params = Vec::with_capacity(file.params.len());
    for rec in file.params {
        let raw = rec.bits.as_bytes();
        if raw.len() % 16 != 0 {
            return Err(bad(format!("{}: truncated payload", rec.name)));
        }
        let data = raw
            .chunks(16)
            .map(|c| {
                std::str::from_utf8(c)
                    .ok()
                    .and_then(|s| u64::from_str_radix(s, 16).ok())
                    .map(f64::from_bits)
                    .ok_or_else(|| bad(format!("{}: malformed value", rec.name)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(rec.shape, data).map_err(|e| bad(format!("{}: {e}", rec.name)))?;
        params.push((rec.name, t));
    }
    Ok(Checkpoint {
        model: file.model,
        params,
    })
}

/// Overwrites the parameters of `store` with those of `ckpt`, requiring
/// identical names and shapes.
pub fn load_params(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<(), ModelError> {
    if ckpt.params.len() != store.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} parameters, found {}",
            store.len(),
            ckpt.params.len()
        )));
    }
    for (name, t) in &ckpt.params {
        let slot = store
            .by_name_mut(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(ModelError::Checkpoint(format!(
                "{name}: shape {:?} does not match {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

//! The xLSTM-TS forecaster: an input projection, a residual stack of
//! mLSTM and sLSTM blocks, a final layer norm and an output projection
//! that reads the last time step.
//!
//! Block internals follow the reference xLSTM layout. With the default
//! configuration the parameter counts are
//!
//! | layer | parameters |
//! |---|---|
//! | input Linear(1→64) | 128 |
//! | mLSTM block (each of 3) | 27,844 |
//! | sLSTM block | 41,600 |
//! | LayerNorm | 64 |
//! | output Linear(64→1) | 65 |
//! | **total** | **125,389** |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    self, Bound, DepthwiseConv, Forecaster, Headwise, LayerNorm, Linear, ModelError, ParamId, ParamStore,
};
use crate::numerics::{uniform_fan_in, Graph, Tensor, Var};

/// Denominator floor in the mLSTM readout.
pub const MLSTM_EPS: f64 = 1e-6;
/// Feed-forward widths are rounded up to a multiple of this.
pub const FFN_ROUND: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mlstm,
    Slstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlstmBlockConfig {
    pub conv_kernel_size: usize,
    /// Block size of the head-wise query/key/value projections.
    pub projection_block_size: usize,
    pub num_heads: usize,
    /// Inner width relative to the embedding.
    pub proj_factor: f64,
}

impl Default for MlstmBlockConfig {
    fn default() -> Self {
        Self {
            conv_kernel_size: 4,
            projection_block_size: 2,
            num_heads: 2,
            proj_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlstmBlockConfig {
    pub conv_kernel_size: usize,
    pub num_heads: usize,
    pub feedforward_projection_factor: f64,
}

impl Default for SlstmBlockConfig {
    fn default() -> Self {
        Self {
            conv_kernel_size: 2,
            num_heads: 2,
            feedforward_projection_factor: 1.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XlstmTsConfig {
    pub input_size: usize,
    pub embedding_dim: usize,
    pub output_size: usize,
    pub sequence_length: usize,
    pub context_length: usize,
    pub batch_size: usize,
    pub block_layout: Vec<BlockKind>,
    pub mlstm: MlstmBlockConfig,
    pub slstm: SlstmBlockConfig,
}

impl Default for XlstmTsConfig {
    fn default() -> Self {
        Self {
            input_size: 1,
            embedding_dim: 64,
            output_size: 1,
            sequence_length: 150,
            context_length: 150,
            batch_size: 16,
            block_layout: vec![BlockKind::Mlstm, BlockKind::Slstm, BlockKind::Mlstm, BlockKind::Mlstm],
            mlstm: MlstmBlockConfig::default(),
            slstm: SlstmBlockConfig::default(),
        }
    }
}

impl XlstmTsConfig {
    /// Sets both the sequence and context length.
    pub fn with_sequence_length(mut self, len: usize) -> Self {
        self.sequence_length = len;
        self.context_length = len;
        self
    }

    pub fn mlstm_inner_dim(&self) -> usize {
        (self.mlstm.proj_factor * self.embedding_dim as f64).round() as usize
    }

    pub fn ffn_dim(&self) -> usize {
        let raw = (self.slstm.feedforward_projection_factor * self.embedding_dim as f64).ceil() as usize;
        raw.div_ceil(FFN_ROUND) * FFN_ROUND
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.input_size != 1 || self.output_size != 1 {
            return fail("only univariate input and output are supported".into());
        }
        if self.embedding_dim == 0 || self.sequence_length == 0 || self.batch_size == 0 {
            return fail("embedding_dim, sequence_length and batch_size must be positive".into());
        }
        if self.context_length != self.sequence_length {
            return fail(format!(
                "context_length {} must equal sequence_length {}",
                self.context_length, self.sequence_length
            ));
        }
        if self.block_layout.is_empty() {
            return fail("block_layout is empty".into());
        }
        let inner = self.mlstm_inner_dim();
        let m = &self.mlstm;
        if m.num_heads == 0 || self.embedding_dim % m.num_heads != 0 || inner % m.num_heads != 0 {
            return fail(format!("mLSTM num_heads {} must divide the embedding and inner widths", m.num_heads));
        }
        if m.projection_block_size == 0 || inner % m.projection_block_size != 0 {
            return fail(format!("projection_block_size {} must divide {inner}", m.projection_block_size));
        }
        if m.conv_kernel_size == 0 || self.slstm.conv_kernel_size == 0 {
            return fail("convolution kernels must be positive".into());
        }
        let s = &self.slstm;
        if s.num_heads == 0 || self.embedding_dim % s.num_heads != 0 {
            return fail(format!("sLSTM num_heads {} must divide embedding_dim", s.num_heads));
        }
        if s.feedforward_projection_factor.is_nan() || s.feedforward_projection_factor <= 0.0 {
            return fail("feedforward_projection_factor must be positive".into());
        }
        Ok(())
    }
}

/// How the mLSTM mixing core is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MlstmMode {
    /// All time steps at once through the stabilised decay matrix.
    #[default]
    Parallel,
    /// Step-by-step matrix-memory recurrence (no gradient through the core).
    Recurrent,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `[B, S, H·D]` → `[B·H, S, D]`.
fn heads_first(g: &Graph, x: Var, heads: usize) -> Result<Var, ModelError> {
    let s = g.shape(x);
    let (b, t, w) = (s[0], s[1], s[2]);
    let d = w / heads;
    let r = g.reshape(x, &[b, t, heads, d])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[b * heads, t, d])?)
}

/// Inverse of [`heads_first`].
fn heads_last(g: &Graph, x: Var, batch: usize) -> Result<Var, ModelError> {
    let s = g.shape(x);
    let heads = s[0] / batch;
    let r = g.reshape(x, &[batch, heads, s[1], s[2]])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[batch, s[1], heads * s[2]])?)
}

/// Layer norm per head group over the last axis, then a learned scale.
fn group_norm(g: &Graph, x: Var, heads: usize, scale: Var) -> Result<Var, ModelError> {
    let s = g.shape(x);
    let w = *s.last().unwrap();
    let mut split = s[..s.len() - 1].to_vec();
    split.extend([heads, w / heads]);
    let r = g.reshape(x, &split)?;
    let n = g.layer_norm(r, nn::NORM_EPS);
    let back = g.reshape(n, &s)?;
    Ok(g.mul(back, scale)?)
}

/// Matrix memory of one mLSTM head, kept in stabilised form: the true
/// memory is `exp(stabiliser) · cell`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlstmState {
    pub head_dim: usize,
    /// Row-major `d × d`; `cell[a·d + b]` pairs value component `a` with key component `b`.
    pub cell: Vec<f64>,
    pub normaliser: Vec<f64>,
    pub stabiliser: f64,
}

impl MlstmState {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            cell: vec![0.0; head_dim * head_dim],
            normaliser: vec![0.0; head_dim],
            stabiliser: f64::NEG_INFINITY,
        }
    }

    /// Advances one step and returns the head output. `key` is used as
    /// given; callers scale it by `1/√d` beforehand.
    pub fn step(&mut self, query: &[f64], key: &[f64], value: &[f64], igate: f64, fgate: f64) -> Vec<f64> {
        let d = self.head_dim;
        let logf = log_sigmoid(fgate);
        let m_new = (logf + self.stabiliser).max(igate);
        let i = (igate - m_new).exp();
        let f = if self.stabiliser == f64::NEG_INFINITY {
            0.0
        } else {
            (logf + self.stabiliser - m_new).exp()
        };
        for a in 0..d {
            for b in 0..d {
                let c = &mut self.cell[a * d + b];
                *c = f * *c + i * value[a] * key[b];
            }
        }
        for (n, &k) in self.normaliser.iter_mut().zip(key) {
            *n = f * *n + i * k;
        }
        self.stabiliser = m_new;
        let qn: f64 = self.normaliser.iter().zip(query).map(|(n, q)| n * q).sum();
        let denom = qn.abs().max((-m_new).exp()) + MLSTM_EPS;
        (0..d)
            .map(|a| {
                let row = &self.cell[a * d..(a + 1) * d];
                row.iter().zip(query).map(|(c, q)| c * q).sum::<f64>() / denom
            })
            .collect()
    }

    /// The memory without stabilisation, `exp(m) · cell`.
    pub fn memory(&self) -> Vec<f64> {
        let s = self.stabiliser.exp();
        self.cell.iter().map(|c| c * s).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.cell.iter().chain(&self.normaliser).all(|v| v.is_finite())
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
pub struct MlstmBlock {
    name: String,
    norm: LayerNorm,
    proj_up: Linear,
    conv: DepthwiseConv,
    q: Headwise,
    k: Headwise,
    v: Headwise,
    igate: Linear,
    fgate: Linear,
    outnorm: ParamId,
    skip: ParamId,
    proj_down: Linear,
    heads: usize,
    inner: usize,
}

impl MlstmBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &XlstmTsConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = cfg.embedding_dim;
        let inner = cfg.mlstm_inner_dim();
        let m = &cfg.mlstm;
        let bs = m.projection_block_size;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), e);
        let proj_up = Linear::new(store, &format!("{name}.proj_up"), e, 2 * inner, false, rng);
        let conv = DepthwiseConv::new(store, &format!("{name}.conv"), inner, m.conv_kernel_size, rng);
        let q = Headwise::new(store, &format!("{name}.q"), inner / bs, bs, bs, rng);
        let k = Headwise::new(store, &format!("{name}.k"), inner / bs, bs, bs, rng);
        let v = Headwise::new(store, &format!("{name}.v"), inner / bs, bs, bs, rng);
        let igate = Linear::new(store, &format!("{name}.igate"), 3 * inner, m.num_heads, true, rng);
        let fgate = Linear::new(store, &format!("{name}.fgate"), 3 * inner, m.num_heads, true, rng);
        if let Some(b) = fgate.bias() {
            *store.get_mut(b) = Tensor::from_vec(linspace(3.0, 6.0, m.num_heads));
        }
        let outnorm = store.add(format!("{name}.outnorm.weight"), Tensor::ones(&[inner]));
        let skip = store.add(format!("{name}.skip"), Tensor::ones(&[inner]));
        let proj_down = Linear::new(store, &format!("{name}.proj_down"), inner, e, false, rng);
        Self {
            name: name.to_string(),
            norm,
            proj_up,
            conv,
            q,
            k,
            v,
            igate,
            fgate,
            outnorm,
            skip,
            proj_down,
            heads: m.num_heads,
            inner,
        }
    }

    /// `x: [B, S, E]` → `[B, S, E]` including the residual.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var, mode: MlstmMode) -> Result<Var, ModelError> {
        let shape = g.shape(x);
        let batch = shape[0];
        let h = self.norm.forward(g, p, x)?;
        let up = self.proj_up.forward(g, p, h)?;
        let xm = g.slice(up, 2, 0, self.inner)?;
        let z = g.slice(up, 2, self.inner, self.inner)?;
        let conv = self.conv.forward(g, p, xm)?;
        let c = g.silu(conv);
        let q = self.q.forward(g, p, c)?;
        let k = self.k.forward(g, p, c)?;
        let v = self.v.forward(g, p, xm)?;
        let gin = g.concat(&[q, k, v], 2)?;
        let ig = self.igate.forward(g, p, gin)?;
        let fg = self.fgate.forward(g, p, gin)?;
        let core = match mode {
            MlstmMode::Parallel => self.core_parallel(g, q, k, v, ig, fg, batch)?,
            MlstmMode::Recurrent => self.core_recurrent(g, q, k, v, ig, fg)?,
        };
        if !g.value(core).all_finite() {
            return Err(ModelError::NonFinite {
                block: self.name.clone(),
                step: first_non_finite_step(&g.value(core)),
            });
        }
        let normed = group_norm(g, core, self.heads, p.var(self.outnorm))?;
        let skip = g.mul(c, p.var(self.skip))?;
        let hs = g.add(normed, skip)?;
        let gate = g.silu(z);
        let hs = g.mul(hs, gate)?;
        let y = self.proj_down.forward(g, p, hs)?;
        Ok(g.add(x, y)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn core_parallel(&self, g: &Graph, q: Var, k: Var, v: Var, ig: Var, fg: Var, batch: usize) -> Result<Var, ModelError> {
        let nh = self.heads;
        let dh = self.inner / nh;
        let steps = g.shape(q)[1];
        let qh = heads_first(g, q, nh)?;
        let kh = heads_first(g, k, nh)?;
        let vh = heads_first(g, v, nh)?;
        let gate_rows = |t: Var| -> Result<Var, ModelError> {
            let p = g.permute(t, &[0, 2, 1])?;
            Ok(g.reshape(p, &[batch * nh, steps])?)
        };
        let igr = gate_rows(ig)?;
        let fgr = gate_rows(fg)?;
        let logf = g.log_sigmoid(fgr);
        let cs = g.cumsum(logf);
        let log_d = g.causal_log_decay(cs, igr)?;
        let m = g.max_last(log_d);
        let stab = g.sub(log_d, m)?;
        let d = g.exp(stab);
        let kt = g.transpose(kh, 1, 2)?;
        let qk = g.matmul(qh, kt)?;
        let qk = g.scale(qk, 1.0 / (dh as f64).sqrt());
        let cm = g.mul(qk, d)?;
        let rows = g.sum_axis(cm, 2, true)?;
        let rows = g.abs(rows);
        let neg_m = g.neg(m);
        let floor = g.exp(neg_m);
        let norm = g.maximum(rows, floor)?;
        let norm = g.add_scalar(norm, MLSTM_EPS);
        let cn = g.div(cm, norm)?;
        let h = g.matmul(cn, vh)?;
        heads_last(g, h, batch)
    }

    fn core_recurrent(&self, g: &Graph, q: Var, k: Var, v: Var, ig: Var, fg: Var) -> Result<Var, ModelError> {
        let nh = self.heads;
        let dh = self.inner / nh;
        let (qv, kv, vv, igv, fgv) = (g.value(q), g.value(k), g.value(v), g.value(ig), g.value(fg));
        let s = qv.shape().to_vec();
        let (batch, steps, w) = (s[0], s[1], s[2]);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; batch * steps * w];
        for b in 0..batch {
            for h in 0..nh {
                let mut state = MlstmState::new(dh);
                for t in 0..steps {
                    let base = (b * steps + t) * w + h * dh;
                    let key: Vec<f64> = kv.data()[base..base + dh].iter().map(|x| x * scale).collect();
                    let gi = (b * steps + t) * nh + h;
                    let y = state.step(
                        &qv.data()[base..base + dh],
                        &key,
                        &vv.data()[base..base + dh],
                        igv.data()[gi],
                        fgv.data()[gi],
                    );
                    out[base..base + dh].copy_from_slice(&y);
                }
            }
        }
        Ok(g.constant(Tensor::new(s, out)?))
    }
}

fn first_non_finite_step(t: &Tensor) -> usize {
    let s = t.shape();
    let (steps, w) = (s[1], s[2]);
    t.data()
        .iter()
        .position(|v| !v.is_finite())
        .map_or(0, |i| (i / w) % steps)
}

/// Scalar-memory recurrent state of an sLSTM layer for a batch; each
/// vector holds `batch × embedding` entries. The stored cell and
/// normaliser are scaled by `exp(−stabiliser)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlstmState {
    pub cell: Vec<f64>,
    pub normaliser: Vec<f64>,
    pub hidden: Vec<f64>,
    pub stabiliser: Vec<f64>,
}

impl SlstmState {
    pub fn zeros(batch: usize, width: usize) -> Self {
        let n = batch * width;
        Self {
            cell: vec![0.0; n],
            normaliser: vec![0.0; n],
            hidden: vec![0.0; n],
            stabiliser: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cell
            .iter()
            .chain(&self.normaliser)
            .chain(&self.hidden)
            .chain(&self.stabiliser)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct SlstmBlock {
    name: String,
    norm: LayerNorm,
    conv: DepthwiseConv,
    igate: Headwise,
    fgate: Headwise,
    zgate: Headwise,
    ogate: Headwise,
    recurrent: ParamId,
    bias: ParamId,
    gnorm: ParamId,
    ffn_norm: LayerNorm,
    ffn_up: Linear,
    ffn_down: Linear,
    heads: usize,
    width: usize,
    ffn: usize,
}

impl SlstmBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &XlstmTsConfig, rng: &mut ChaCha8Rng) -> Self {
        let e = cfg.embedding_dim;
        let s = &cfg.slstm;
        let nh = s.num_heads;
        let dh = e / nh;
        let ffn = cfg.ffn_dim();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), e);
        let conv = DepthwiseConv::new(store, &format!("{name}.conv"), e, s.conv_kernel_size, rng);
        let igate = Headwise::new(store, &format!("{name}.igate"), nh, dh, dh, rng);
        let fgate = Headwise::new(store, &format!("{name}.fgate"), nh, dh, dh, rng);
        let zgate = Headwise::new(store, &format!("{name}.zgate"), nh, dh, dh, rng);
        let ogate = Headwise::new(store, &format!("{name}.ogate"), nh, dh, dh, rng);
        let recurrent = store.add(
            format!("{name}.recurrent"),
            uniform_fan_in(&[nh, 4 * dh, dh], dh, rng),
        );
        let mut b = vec![0.0; 4 * e];
        b[e..2 * e].copy_from_slice(&linspace(3.0, 6.0, e));
        let bias = store.add(format!("{name}.bias"), Tensor::from_vec(b));
        let gnorm = store.add(format!("{name}.group_norm.weight"), Tensor::ones(&[e]));
        let ffn_norm = LayerNorm::new(store, &format!("{name}.ffn_norm"), e);
        let ffn_up = Linear::new(store, &format!("{name}.ffn_up"), e, 2 * ffn, false, rng);
        let ffn_down = Linear::new(store, &format!("{name}.ffn_down"), ffn, e, false, rng);
        Self {
            name: name.to_string(),
            norm,
            conv,
            igate,
            fgate,
            zgate,
            ogate,
            recurrent,
            bias,
            gnorm,
            ffn_norm,
            ffn_up,
            ffn_down,
            heads: nh,
            width: e,
            ffn,
        }
    }

    /// `x: [B, S, E]` → `[B, S, E]` including both residual branches, and
    /// the recurrent state after the last step.
    pub fn forward(
        &self,
        g: &Graph,
        p: &Bound,
        x: Var,
        state: Option<SlstmState>,
    ) -> Result<(Var, SlstmState), ModelError> {
        let shape = g.shape(x);
        let (batch, steps, e) = (shape[0], shape[1], self.width);
        let mut st = state.unwrap_or_else(|| SlstmState::zeros(batch, e));
        if st.cell.len() != batch * e {
            return Err(ModelError::Config(format!(
                "sLSTM state holds {} entries, expected {}",
                st.cell.len(),
                batch * e
            )));
        }
        let h0 = self.norm.forward(g, p, x)?;
        let cx = self.conv.forward(g, p, h0)?;
        let cx = g.silu(cx);
        let wi = self.igate.forward(g, p, cx)?;
        let wf = self.fgate.forward(g, p, cx)?;
        let wz = self.zgate.forward(g, p, h0)?;
        let wo = self.ogate.forward(g, p, h0)?;
        let wx = g.concat(&[wi, wf, wz, wo], 2)?;
        let wx = g.add(wx, p.var(self.bias))?;

        let flat = |v: Vec<f64>| Tensor::new(vec![batch, e], v);
        let mut c = g.constant(flat(st.cell.clone())?);
        let mut n = g.constant(flat(st.normaliser.clone())?);
        let mut h = g.constant(flat(st.hidden.clone())?);
        let mut m = st.stabiliser.clone();
        let mut fresh: Vec<bool> = st.normaliser.iter().map(|&v| v == 0.0).collect();
        let dh = e / self.heads;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let wt = g.slice(wx, 1, t, 1)?;
            let mut raw = g.reshape(wt, &[batch, 4 * e])?;
            if t > 0 || st.hidden.iter().any(|&v| v != 0.0) {
                let r = g.headwise_linear(h, p.var(self.recurrent))?;
                let r = g.reshape(r, &[batch, self.heads, 4, dh])?;
                let r = g.permute(r, &[0, 2, 1, 3])?;
                let r = g.reshape(r, &[batch, 4 * e])?;
                raw = g.add(raw, r)?;
            }
            let ir = g.slice(raw, 1, 0, e)?;
            let fr = g.slice(raw, 1, e, e)?;
            let zr = g.slice(raw, 1, 2 * e, e)?;
            let or = g.slice(raw, 1, 3 * e, e)?;
            let logf = g.log_sigmoid(fr);
            let (irv, logfv) = (g.value(ir), g.value(logf));
            let mut m_prev = m.clone();
            let m_new: Vec<f64> = (0..batch * e)
                .map(|j| {
                    let (i, lf) = (irv.data()[j], logfv.data()[j]);
                    if fresh[j] {
                        i
                    } else {
                        i.max(lf + m[j])
                    }
                })
                .collect();
            for j in 0..batch * e {
                if fresh[j] {
                    // the previous cell is zero; any finite offset keeps f' bounded
                    m_prev[j] = m_new[j];
                }
            }
            let m_new_v = g.constant(flat(m_new.clone())?);
            let m_prev_v = g.constant(flat(m_prev)?);
            let ip = g.sub(ir, m_new_v)?;
            let ip = g.exp(ip);
            let fp = g.add(logf, m_prev_v)?;
            let fp = g.sub(fp, m_new_v)?;
            let fp = g.exp(fp);
            let zt = g.tanh(zr);
            let fc = g.mul(fp, c)?;
            let iz = g.mul(ip, zt)?;
            c = g.add(fc, iz)?;
            let fnn = g.mul(fp, n)?;
            n = g.add(fnn, ip)?;
            let o = g.sigmoid(or);
            let ratio = g.div(c, n)?;
            h = g.mul(o, ratio)?;
            if !g.value(h).all_finite() || !g.value(c).all_finite() || !g.value(n).all_finite() {
                return Err(ModelError::NonFinite {
                    block: self.name.clone(),
                    step: t,
                });
            }
            m = m_new;
            fresh.iter_mut().for_each(|f| *f = false);
            outputs.push(g.reshape(h, &[batch, 1, e])?);
        }
        st = SlstmState {
            cell: g.value(c).data().to_vec(),
            normaliser: g.value(n).data().to_vec(),
            hidden: g.value(h).data().to_vec(),
            stabiliser: m,
        };

        let hs = g.concat(&outputs, 1)?;
        let y = group_norm(g, hs, self.heads, p.var(self.gnorm))?;
        let x1 = g.add(x, y)?;
        let f = self.ffn_norm.forward(g, p, x1)?;
        let u = self.ffn_up.forward(g, p, f)?;
        let gate = g.slice(u, 2, 0, self.ffn)?;
        let up = g.slice(u, 2, self.ffn, self.ffn)?;
        let act = g.gelu(gate);
        let a = g.mul(act, up)?;
        let down = self.ffn_down.forward(g, p, a)?;
        Ok((g.add(x1, down)?, st))
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Mlstm(MlstmBlock),
    Slstm(SlstmBlock),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Mlstm(_) => BlockKind::Mlstm,
            Block::Slstm(_) => BlockKind::Slstm,
        }
    }
}

/// One entry of [`XlstmTs::parameter_count`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub layers: Vec<LayerCount>,
}

#[derive(Debug, Clone)]
pub struct XlstmTs {
    config: XlstmTsConfig,
    store: ParamStore,
    input: Linear,
    blocks: Vec<Block>,
    post_norm: LayerNorm,
    output: Linear,
}

impl XlstmTs {
    pub fn new(config: XlstmTsConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = config.embedding_dim;
        let input = Linear::new(&mut store, "input", config.input_size, e, true, &mut rng);
        let blocks = config
            .block_layout
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                let name = format!("blocks.{i}");
                match kind {
                    BlockKind::Mlstm => Block::Mlstm(MlstmBlock::new(&mut store, &name, &config, &mut rng)),
                    BlockKind::Slstm => Block::Slstm(SlstmBlock::new(&mut store, &name, &config, &mut rng)),
                }
            })
            .collect();
        let post_norm = LayerNorm::new(&mut store, "post_norm", e);
        let output = Linear::new(&mut store, "output", e, config.output_size, true, &mut rng);
        Ok(Self {
            config,
            store,
            input,
            blocks,
            post_norm,
            output,
        })
    }

    pub fn config(&self) -> &XlstmTsConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn parameter_count(&self) -> ParameterCount {
        let mut layers = vec![LayerCount {
            name: "input Linear".into(),
            params: self.store.count_prefix("input."),
        }];
        for (i, b) in self.blocks.iter().enumerate() {
            let kind = match b.kind() {
                BlockKind::Mlstm => "mLSTM",
                BlockKind::Slstm => "sLSTM",
            };
            layers.push(LayerCount {
                name: format!("block {i} {kind}"),
                params: self.store.count_prefix(&format!("blocks.{i}.")),
            });
        }
        layers.push(LayerCount {
            name: "LayerNorm".into(),
            params: self.store.count_prefix("post_norm."),
        });
        layers.push(LayerCount {
            name: "output Linear".into(),
            params: self.store.count_prefix("output."),
        });
        ParameterCount {
            total: self.store.count(),
            layers,
        }
    }

    /// Per-step features after the block stack and layer norm, `[B, S, E]`.
    pub fn features(&self, g: &Graph, p: &Bound, x: Var, mode: MlstmMode) -> Result<Var, ModelError> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.config.input_size {
            return Err(ModelError::Config(format!("expected input [batch, time, 1], got {s:?}")));
        }
        let mut h = self.input.forward(g, p, x)?;
        for b in &self.blocks {
            h = match b {
                Block::Mlstm(m) => m.forward(g, p, h, mode)?,
                Block::Slstm(sl) => sl.forward(g, p, h, None)?.0,
            };
        }
        Ok(self.post_norm.forward(g, p, h)?)
    }

    /// `[B, L, 1]` → `[B, 1]` with an explicit mLSTM evaluation order.
    pub fn forward_mode(&self, g: &Graph, p: &Bound, x: Var, mode: MlstmMode) -> Result<Var, ModelError> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.sequence_length {
            return Err(ModelError::WindowLength {
                expected: self.config.sequence_length,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let f = self.features(g, p, x, mode)?;
        let last = g.slice(f, 1, s[1] - 1, 1)?;
        let last = g.reshape(last, &[s[0], self.config.embedding_dim])?;
        Ok(self.output.forward(g, p, last)?)
    }

    pub fn to_checkpoint(&self) -> Result<String, ModelError> {
        nn::save_checkpoint(&self.config, &self.store)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, ModelError> {
        let ckpt = nn::parse_checkpoint(text)?;
        let config: XlstmTsConfig =
            serde_json::from_value(ckpt.model.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        nn::load_params(&mut model.store, &ckpt)?;
        Ok(model)
    }
}

impl Forecaster for XlstmTs {
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
        self.forward_mode(g, p, x, MlstmMode::Parallel)
    }
}

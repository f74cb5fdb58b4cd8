use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, Broadcast, ConvDims};
use super::{invalid, NumericsError, Tensor};
use crate::exec::Execution;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Relu,
    Silu,
    Gelu,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    /// `rows, m, k, n, b_batched`
    MatMul(Var, Var, [usize; 4], bool),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        a: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    SumAll(Var),
    SumAxis {
        a: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    MaxLast(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Conv1d(Var, Var, Option<Var>, ConvDims),
    DepthwiseConv1d(Var, Var, Option<Var>, [usize; 4]),
    /// `heads, d_in, d_out`
    Headwise(Var, Var, [usize; 3]),
    Cumsum(Var),
    CausalLogDecay(Var, Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of tensor operations.
///
/// A graph is single-threaded by construction (`!Sync`); build one per
/// forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_done: Cell<bool>,
    exec: Execution,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_execution(Execution::Sequential)
    }

    /// A graph whose dense kernels may fan out over rows.
    pub fn with_execution(exec: Execution) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            exec,
        }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push_raw((*v).clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn clear_gradients(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| NumericsError::Shape {
            op: name,
            left: va.shape().to_vec(),
            right: vb.shape().to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let (pa, pb) = (Broadcast::plan(&shape, va.shape()), Broadcast::plan(&shape, vb.shape()));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
        };
        let data: Vec<f64> = match (&pa, &pb) {
            (Broadcast::Same, Broadcast::Same) => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            (Broadcast::Same, _) => {
                let eb = pb.expand(vb.data(), n);
                va.data().iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
            }
            (_, Broadcast::Same) => {
                let ea = pa.expand(va.data(), n);
                ea.iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => {
                let (ea, eb) = (pa.expand(va.data(), n), pb.expand(vb.data(), n));
                ea.iter().zip(&eb).map(|(&x, &y)| f(x, y)).collect()
            }
        };
        let out = Tensor::new(shape, data).expect("broadcast shape");
        Ok(self.push(out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(Binary::Max, a, b, "maximum")
    }

    fn unary(&self, kind: Unary, a: Var) -> Var {
        let v = self.value(a);
        let out = v.map(|x| match kind {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Abs => x.abs(),
        });
        self.push(out, Op::Unary(kind, a), &[a])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::LogSigmoid, a)
    }
    pub fn tanh(&self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    /// `x·σ(x)`
    pub fn silu(&self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }
    /// tanh approximation of GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }
    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p), &[a])
    }

    // ---- linear algebra ----------------------------------------------

    /// `[.., m, k] × [k, n]` (right operand shared across leading dims) or
    /// `[b, m, k] × [b, k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let err = || NumericsError::Shape {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let b_batched = sb.len() == 3;
        if b_batched && (sa.len() != 3 || sa[0] != sb[0]) {
            return Err(err());
        }
        if sb.len() > 3 {
            return Err(err());
        }
        let rows = va.len() / k.max(1);
        let data = kernels::matmul(self.exec, va.data(), vb.data(), rows, m, k, n, b_batched);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data).expect("matmul shape");
        Ok(self.push(out, Op::MatMul(a, b, [rows, m, k, n], b_batched), &[a, b]))
    }

    /// Block-diagonal linear map: `x[.., h·d_in + i]` with weights
    /// `[heads, d_out, d_in]` produces `y[.., h·d_out + o]`.
    pub fn headwise_linear(&self, x: Var, w: Var) -> Result<Var, NumericsError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sw.len() != 3 || sx.is_empty() || sx[sx.len() - 1] != sw[0] * sw[2] {
            return Err(NumericsError::Shape {
                op: "headwise_linear",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (heads, d_out, d_in) = (sw[0], sw[1], sw[2]);
        let width_in = heads * d_in;
        let width_out = heads * d_out;
        let rows = vx.len() / width_in;
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; rows * width_out];
        crate::exec::for_each_row(self.exec, &mut out, width_out, |r, y| {
            let xr = &xd[r * width_in..(r + 1) * width_in];
            for h in 0..heads {
                let xh = &xr[h * d_in..(h + 1) * d_in];
                for o in 0..d_out {
                    let wr = &wd[(h * d_out + o) * d_in..(h * d_out + o + 1) * d_in];
                    y[h * d_out + o] = kernels::dot(wr, xh);
                }
            }
        });
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = width_out;
        let t = Tensor::new(shape, out).expect("headwise shape");
        Ok(self.push(t, Op::Headwise(x, w, [heads, d_in, d_out]), &[x, w]))
    }

    // ---- shape manipulation ------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let v = (*self.value(a)).clone();
        let out = v.reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let rank = v.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let data = kernels::permute(v.data(), v.shape(), perm);
        let shape = perm.iter().map(|&p| v.shape()[p]).collect();
        let out = Tensor::new(shape, data).expect("permute shape");
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: Var, d0: usize, d1: usize) -> Result<Var, NumericsError> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(invalid("transpose", format!("axes {d0},{d1} out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of shape {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data).expect("slice shape");
        Ok(self.push(
            out,
            Op::Slice {
                a,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            &[a],
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base_shape = self.shape(*first);
        if axis >= base_shape.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NumericsError::Shape {
                    op: "concat",
                    left: base_shape,
                    right: s,
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let total: usize = lens.iter().sum();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let out = Tensor::new(shape, data).expect("concat shape");
        let op = Op::Concat {
            parts: parts.iter().copied().zip(lens).collect(),
            outer,
            inner,
        };
        Ok(self.push(out, op, parts))
    }

    // ---- reductions --------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, axis_len, inner) = split_axis(shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..axis_len {
                let src = &v.data()[(o * axis_len + k) * inner..(o * axis_len + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        let out = Tensor::new(out_shape.clone(), data).expect("sum shape");
        let r = self.push(
            out,
            Op::SumAxis {
                a,
                outer,
                axis_len,
                inner,
            },
            &[a],
        );
        if keepdim {
            Ok(r)
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
            self.reshape(r, &out_shape)
        }
    }

    pub fn mean_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var, NumericsError> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Maximum over the last axis (kept as size 1).
    pub fn max_last(&self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().expect("rank >= 1");
        let rows = v.len() / d.max(1);
        let mut data = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let (mut best, mut at) = (f64::NEG_INFINITY, 0);
            for (i, &x) in row.iter().enumerate() {
                if x > best {
                    best = x;
                    at = i;
                }
            }
            data.push(best);
            arg.push(r * d + at);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let out = Tensor::new(shape, data).expect("max shape");
        self.push(out, Op::MaxLast(a, arg), &[a])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().expect("rank >= 1");
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("softmax shape");
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalises each last-axis vector to zero mean and unit variance
    /// (biased variance, `eps` added before the square root). No affine.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().expect("rank >= 1");
        let mut data = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("layer_norm shape");
        self.push(out, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Inclusive prefix sum over the last axis.
    pub fn cumsum(&self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().expect("rank >= 1");
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(d) {
            for i in 1..row.len() {
                row[i] += row[i - 1];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("cumsum shape");
        self.push(out, Op::Cumsum(a), &[a])
    }

    // ---- sequence ops ------------------------------------------------

    /// Causal dilated convolution. `x: [batch, time, c_in]`,
    /// `w: [c_out, c_in, kernel]`, optional `bias: [c_out]`; the input is
    /// implicitly left-padded by `(kernel − 1)·dilation` zeros so the output
    /// keeps `time` steps.
    pub fn causal_conv1d(&self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var, NumericsError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || dilation == 0 {
            return Err(NumericsError::Shape {
                op: "causal_conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let vb = bias.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [sw[0]] {
                return Err(NumericsError::Shape {
                    op: "causal_conv1d bias",
                    left: sw.to_vec(),
                    right: vb.shape().to_vec(),
                });
            }
        }
        let dims = ConvDims {
            batch: sx[0],
            time: sx[1],
            c_in: sx[2],
            c_out: sw[0],
            kernel: sw[2],
            dilation,
        };
        let data = kernels::conv1d(self.exec, vx.data(), vw.data(), vb.as_ref().map(|b| b.data()), dims);
        let out = Tensor::new(vec![dims.batch, dims.time, dims.c_out], data).expect("conv shape");
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv1d(x, w, bias, dims), &inputs))
    }

    /// Per-channel causal convolution: `x: [batch, time, c]`, `w: [c, kernel]`.
    pub fn depthwise_causal_conv1d(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, NumericsError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 3 || sw.len() != 2 || sx[2] != sw[0] {
            return Err(NumericsError::Shape {
                op: "depthwise_causal_conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (batch, time, c, kernel) = (sx[0], sx[1], sx[2], sw[1]);
        let vb = bias.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [c] {
                return Err(NumericsError::Shape {
                    op: "depthwise_causal_conv1d bias",
                    left: sw.to_vec(),
                    right: vb.shape().to_vec(),
                });
            }
        }
        let (xd, wd) = (vx.data(), vw.data());
        let bd = vb.as_deref().map(Tensor::data);
        let mut out = vec![0.0; batch * time * c];
        crate::exec::for_each_row(self.exec, &mut out, c, |row, o| {
            let t = row % time;
            if let Some(bd) = bd {
                o.copy_from_slice(bd);
            }
            for j in 0..kernel {
                let back = kernel - 1 - j;
                if back > t {
                    continue;
                }
                let src = &xd[(row - back) * c..(row - back + 1) * c];
                for ch in 0..c {
                    o[ch] += wd[ch * kernel + j] * src[ch];
                }
            }
        });
        let t = Tensor::new(vec![batch, time, c], out).expect("conv shape");
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(t, Op::DepthwiseConv1d(x, w, bias, [batch, time, c, kernel]), &inputs))
    }

    /// Log-space decay matrix for a gated linear recurrence:
    /// `out[n, i, j] = cs[n, i] − cs[n, j] + gate[n, j]` for `j ≤ i`,
    /// `−∞` above the diagonal. Inputs are `[rows, steps]`.
    pub fn causal_log_decay(&self, cs: Var, gate: Var) -> Result<Var, NumericsError> {
        let (vc, vg) = (self.value(cs), self.value(gate));
        if vc.shape() != vg.shape() || vc.shape().len() != 2 {
            return Err(NumericsError::Shape {
                op: "causal_log_decay",
                left: vc.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let (rows, s) = (vc.shape()[0], vc.shape()[1]);
        let mut data = vec![f64::NEG_INFINITY; rows * s * s];
        for r in 0..rows {
            let c = &vc.data()[r * s..(r + 1) * s];
            let gt = &vg.data()[r * s..(r + 1) * s];
            for i in 0..s {
                let row = &mut data[(r * s + i) * s..(r * s + i + 1) * s];
                for j in 0..=i {
                    row[j] = c[i] - c[j] + gt[j];
                }
            }
        }
        let out = Tensor::new(vec![rows, s, s], data).expect("decay shape");
        Ok(self.push(out, Op::CausalLogDecay(cs, gate), &[cs, gate]))
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of `loss` (a one-element tensor) with respect
    /// to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<(), NumericsError> {
        if self.backward_done.get() {
            return Err(NumericsError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let ls = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&ls));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(&nodes, node, &g, &mut grads);
        }
        // Keep gradients only for leaves.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    fn backprop(&self, nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, data: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.data_mut().iter_mut().zip(&data).for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor::new(nodes[v.0].value.shape().to_vec(), data).expect("grad shape"))
                }
            }
        };
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let shape = out.shape();
                let n = gd.len();
                let (pa, pb) = (Broadcast::plan(shape, va.shape()), Broadcast::plan(shape, vb.shape()));
                let uses_values = !matches!(kind, Binary::Add | Binary::Sub);
                let ea = uses_values.then(|| pa.expand(va.data(), n));
                let eb = uses_values.then(|| pb.expand(vb.data(), n));
                if needs(*a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => gd.iter().zip(eb.as_ref().unwrap()).map(|(g, y)| g * y).collect(),
                        Binary::Div => gd.iter().zip(eb.as_ref().unwrap()).map(|(g, y)| g / y).collect(),
                        Binary::Max => {
                            let (ea, eb) = (ea.as_ref().unwrap(), eb.as_ref().unwrap());
                            (0..n).map(|i| if ea[i] >= eb[i] { gd[i] } else { 0.0 }).collect()
                        }
                    };
                    acc(*a, pa.reduce(ga, va.len()));
                }
                if needs(*b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|x| -x).collect(),
                        Binary::Mul => gd.iter().zip(ea.as_ref().unwrap()).map(|(g, x)| g * x).collect(),
                        Binary::Div => {
                            let (ea, eb) = (ea.as_ref().unwrap(), eb.as_ref().unwrap());
                            (0..n).map(|i| -gd[i] * ea[i] / (eb[i] * eb[i])).collect()
                        }
                        Binary::Max => {
                            let (ea, eb) = (ea.as_ref().unwrap(), eb.as_ref().unwrap());
                            (0..n).map(|i| if ea[i] >= eb[i] { 0.0 } else { gd[i] }).collect()
                        }
                    };
                    acc(*b, pb.reduce(gb, vb.len()));
                }
            }
            Op::Unary(kind, a) => {
                let x = val(*a).data();
                let y = out.data();
                let ga: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::LogSigmoid => sigmoid(-x[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Silu => {
                                let s = sigmoid(x[i]);
                                s * (1.0 + x[i] * (1.0 - s))
                            }
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Abs => x[i].signum() * (x[i] != 0.0) as u8 as f64,
                        };
                        if gd[i] == 0.0 {
                            0.0
                        } else {
                            gd[i] * d
                        }
                    })
                    .collect();
                acc(*a, ga);
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => acc(*a, gd.to_vec()),
            Op::Powf(a, p) => {
                let x = val(*a).data();
                acc(*a, gd.iter().zip(x).map(|(g, x)| g * p * x.powf(p - 1.0)).collect());
            }
            Op::MatMul(a, b, [rows, m, k, n], batched) => {
                if needs(*a) {
                    let da = kernels::matmul_nt(self.exec, gd, val(*b).data(), *rows, *m, *k, *n, *batched);
                    acc(*a, da);
                }
                if needs(*b) {
                    let db = kernels::matmul_tn(self.exec, val(*a).data(), gd, *rows, *m, *k, *n, *batched);
                    acc(*b, db);
                }
            }
            Op::Headwise(x, w, [heads, d_in, d_out]) => {
                let (heads, d_in, d_out) = (*heads, *d_in, *d_out);
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let width_in = heads * d_in;
                let width_out = heads * d_out;
                let rows = xd.len() / width_in;
                if needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    crate::exec::for_each_row(self.exec, &mut dx, width_in, |r, dxr| {
                        let gr = &gd[r * width_out..(r + 1) * width_out];
                        for h in 0..heads {
                            for o in 0..d_out {
                                let gv = gr[h * d_out + o];
                                if gv == 0.0 {
                                    continue;
                                }
                                let wr = &wd[(h * d_out + o) * d_in..(h * d_out + o + 1) * d_in];
                                for (d, wv) in dxr[h * d_in..(h + 1) * d_in].iter_mut().zip(wr) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    });
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; wd.len()];
                    for r in 0..rows {
                        let gr = &gd[r * width_out..(r + 1) * width_out];
                        let xr = &xd[r * width_in..(r + 1) * width_in];
                        for h in 0..heads {
                            let xh = &xr[h * d_in..(h + 1) * d_in];
                            for o in 0..d_out {
                                let gv = gr[h * d_out + o];
                                if gv == 0.0 {
                                    continue;
                                }
                                let dst = &mut dw[(h * d_out + o) * d_in..(h * d_out + o + 1) * d_in];
                                for (d, xv) in dst.iter_mut().zip(xh) {
                                    *d += gv * xv;
                                }
                            }
                        }
                    }
                    acc(*w, dw);
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                acc(*a, kernels::permute(gd, out.shape(), &inverse));
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::Slice {
                a,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                let mut da = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                acc(*a, da);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                let mut offset = 0;
                for &(p, l) in parts {
                    if needs(p) {
                        let mut dp = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + l * inner]);
                        }
                        acc(p, dp);
                    }
                    offset += l;
                }
            }
            Op::SumAll(a) => acc(*a, vec![gd[0]; val(*a).len()]),
            Op::SumAxis {
                a,
                outer,
                axis_len,
                inner,
            } => {
                let mut da = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    for k in 0..*axis_len {
                        da[(o * axis_len + k) * inner..(o * axis_len + k + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, da);
            }
            Op::MaxLast(a, arg) => {
                let mut da = vec![0.0; val(*a).len()];
                for (r, &i) in arg.iter().enumerate() {
                    da[i] += gd[r];
                }
                acc(*a, da);
            }
            Op::Softmax(a) => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((dy, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dy[i] = yr[i] * (gr[i] - dot);
                    }
                }
                acc(*a, da);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for (r, ((dx, yr), gr)) in da.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[i] = inv_std[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                acc(*a, da);
            }
            Op::Cumsum(a) => {
                let d = *out.shape().last().unwrap();
                let mut da = gd.to_vec();
                for row in da.chunks_mut(d) {
                    for i in (0..row.len().saturating_sub(1)).rev() {
                        row[i] += row[i + 1];
                    }
                }
                acc(*a, da);
            }
            Op::Conv1d(x, w, b, dims) => {
                let (dx, dw, db) = kernels::conv1d_backward(val(*x).data(), val(*w).data(), gd, *dims);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::DepthwiseConv1d(x, w, b, [batch, time, c, kernel]) => {
                let (batch, time, c, kernel) = (*batch, *time, *c, *kernel);
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; c];
                for row in 0..batch * time {
                    let t = row % time;
                    let gr = &gd[row * c..(row + 1) * c];
                    for ch in 0..c {
                        db[ch] += gr[ch];
                    }
                    for j in 0..kernel {
                        let back = kernel - 1 - j;
                        if back > t {
                            continue;
                        }
                        let src = (row - back) * c;
                        for ch in 0..c {
                            dx[src + ch] += gr[ch] * wd[ch * kernel + j];
                            dw[ch * kernel + j] += gr[ch] * xd[src + ch];
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::CausalLogDecay(cs, gate) => {
                let shape = val(*cs).shape();
                let (rows, s) = (shape[0], shape[1]);
                let mut dc = vec![0.0; rows * s];
                let mut dg = vec![0.0; rows * s];
                for r in 0..rows {
                    for i in 0..s {
                        let gr = &gd[(r * s + i) * s..(r * s + i + 1) * s];
                        let mut row_sum = 0.0;
                        for j in 0..=i {
                            row_sum += gr[j];
                            dc[r * s + j] -= gr[j];
                            dg[r * s + j] += gr[j];
                        }
                        dc[r * s + i] += row_sum;
                    }
                }
                acc(*cs, dc);
                acc(*gate, dg);
            }
        }
    }
}

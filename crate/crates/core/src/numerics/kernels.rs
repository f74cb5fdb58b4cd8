//! Dense loops behind the graph primitives.

use crate::exec::{self, Execution};

/// Rows of the reduction dimension folded in one partial sum when
/// accumulating `Aᵀ·G`. Fixed so that the summation order (and therefore
/// every bit of the result) is independent of the execution mode.
const TN_CHUNK: usize = 256;

/// Inner product with four independent partial sums.
#[inline]
pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `C[r, :] = A[r, :] · B_r` for `rows` rows of width `k`, where `B_r` is
/// `k × n` and shared (`b_stride == 0`) or selected per batch of `m` rows.
pub(super) fn matmul(
    exec: Execution,
    a: &[f64],
    b: &[f64],
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    exec::for_each_row(exec, &mut out, n, |r, c_row| {
        let a_row = &a[r * k..(r + 1) * k];
        let b_mat = if b_batched {
            let bt = r / m;
            &b[bt * k * n..(bt + 1) * k * n]
        } else {
            b
        };
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    });
    out
}

/// `dA[r, p] = Σ_j G[r, j] · B_r[p, j]`.
pub(super) fn matmul_nt(
    exec: Execution,
    g: &[f64],
    b: &[f64],
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * k];
    exec::for_each_row(exec, &mut out, k, |r, da_row| {
        let g_row = &g[r * n..(r + 1) * n];
        let b_mat = if b_batched {
            let bt = r / m;
            &b[bt * k * n..(bt + 1) * k * n]
        } else {
            b
        };
        for (p, da) in da_row.iter_mut().enumerate() {
            let b_row = &b_mat[p * n..(p + 1) * n];
            *da = dot(g_row, b_row);
        }
    });
    out
}

/// `dB = Σ_r A[r, :]ᵀ G[r, :]` over `rows` rows, returned as `k × n`.
fn tn_rows(exec: Execution, a: &[f64], g: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let chunks = rows.div_ceil(TN_CHUNK).max(1);
    let partials = exec::map_range(exec, chunks, |c| {
        let mut acc = vec![0.0; k * n];
        for r in c * TN_CHUNK..((c + 1) * TN_CHUNK).min(rows) {
            let a_row = &a[r * k..(r + 1) * k];
            let g_row = &g[r * n..(r + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let dst = &mut acc[p * n..(p + 1) * n];
                for (d, &gv) in dst.iter_mut().zip(g_row) {
                    *d += av * gv;
                }
            }
        }
        acc
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![0.0; k * n]);
    for part in iter {
        total.iter_mut().zip(&part).for_each(|(t, p)| *t += p);
    }
    total
}

/// Gradient of the right operand: shared `k × n` or per-batch.
pub(super) fn matmul_tn(
    exec: Execution,
    a: &[f64],
    g: &[f64],
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<f64> {
    if !b_batched {
        return tn_rows(exec, a, g, rows, k, n);
    }
    let batches = rows / m;
    let per = exec::map_range(exec, batches, |bt| {
        tn_rows(
            Execution::Sequential,
            &a[bt * m * k..(bt + 1) * m * k],
            &g[bt * m * n..(bt + 1) * m * n],
            m,
            k,
            n,
        )
    });
    per.concat()
}

pub(super) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output of `permute(x, perm)`: `out.shape[i] = in.shape[perm[i]]`.
pub(super) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 || n == 0 {
        return data.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// How an operand of a broadcasting op maps onto the output.
#[derive(Debug, Clone)]
pub(super) enum Broadcast {
    Same,
    /// Operand equals the trailing `len` elements (repeated).
    Suffix(usize),
    /// Operand has trailing unit dims; each element covers `block` outputs.
    Prefix(usize),
    /// Generic: stride of the operand per output dim (0 where broadcast).
    General(Vec<usize>, Vec<usize>),
}

impl Broadcast {
    pub(super) fn plan(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Broadcast::Same;
        }
        let rank = out.len();
        let mut full = vec![1usize; rank - inp.len()];
        full.extend_from_slice(inp);
        let in_len: usize = inp.iter().product();
        let out_len: usize = out.iter().product();
        // suffix: leading dims are (effectively) 1, trailing match
        let first_real = full.iter().position(|&d| d != 1).unwrap_or(rank);
        if full[first_real..] == out[first_real..] {
            return Broadcast::Suffix(in_len);
        }
        let last_real = full.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if full[..last_real] == out[..last_real] {
            return Broadcast::Prefix(out_len / in_len.max(1));
        }
        let st = strides(&full);
        let aligned = (0..rank).map(|d| if full[d] == 1 { 0 } else { st[d] }).collect();
        Broadcast::General(out.to_vec(), aligned)
    }

    #[inline]
    pub(super) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Prefix(block) => i / block,
            Broadcast::General(out, aligned) => {
                let mut rem = i;
                let mut idx = 0;
                for d in (0..out.len()).rev() {
                    idx += (rem % out[d]) * aligned[d];
                    rem /= out[d];
                }
                idx
            }
        }
    }

    /// The operand materialised at the output shape (`n` elements).
    pub(super) fn expand(&self, data: &[f64], n: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => data.to_vec(),
            Broadcast::Suffix(len) => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n / len {
                    out.extend_from_slice(data);
                }
                out
            }
            Broadcast::Prefix(block) => {
                let mut out = Vec::with_capacity(n);
                for &v in data {
                    out.extend(std::iter::repeat(v).take(*block));
                }
                out
            }
            Broadcast::General(..) => (0..n).map(|i| data[self.index(i)]).collect(),
        }
    }

    /// Sums output-shaped `values` back onto an operand with `in_len`
    /// elements.
    pub(super) fn reduce(&self, values: Vec<f64>, in_len: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => values,
            Broadcast::Suffix(len) => {
                let mut out = vec![0.0; in_len];
                for chunk in values.chunks(*len) {
                    out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                out
            }
            Broadcast::Prefix(block) => values.chunks(*block).map(|c| c.iter().sum()).collect(),
            Broadcast::General(..) => {
                let mut out = vec![0.0; in_len];
                for (i, v) in values.into_iter().enumerate() {
                    out[self.index(i)] += v;
                }
                out
            }
        }
    }
}

pub(super) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Causal dilated convolution over `[batch, time, c_in]` with weights
/// `[c_out, c_in, kernel]`; tap `j` reads `t − (kernel − 1 − j)·dilation`.
pub(super) fn conv1d(
    exec: Execution,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    dims: ConvDims,
) -> Vec<f64> {
    let ConvDims {
        time,
        c_in,
        c_out,
        kernel,
        dilation,
        ..
    } = dims;
    let mut out = vec![0.0; dims.batch * time * c_out];
    exec::for_each_row(exec, &mut out, c_out, |row, o_row| {
        let b = row / time;
        let t = row % time;
        if let Some(bias) = bias {
            o_row.copy_from_slice(bias);
        }
        for j in 0..kernel {
            let back = (kernel - 1 - j) * dilation;
            if back > t {
                continue;
            }
            let x_row = &x[(b * time + t - back) * c_in..(b * time + t - back + 1) * c_in];
            for (o, acc) in o_row.iter_mut().enumerate() {
                let w_base = o * c_in * kernel + j;
                let mut s = 0.0;
                for (c, &xv) in x_row.iter().enumerate() {
                    s += w[w_base + c * kernel] * xv;
                }
                *acc += s;
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvDims {
    pub batch: usize,
    pub time: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

/// Returns `(dx, dw, dbias)` for [`conv1d`].
pub(super) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    dims: ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvDims {
        batch,
        time,
        c_in,
        c_out,
        kernel,
        dilation,
    } = dims;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c_out];
    for b in 0..batch {
        for t in 0..time {
            let g_row = &g[(b * time + t) * c_out..(b * time + t + 1) * c_out];
            for (o, &gv) in g_row.iter().enumerate() {
                db[o] += gv;
            }
            for j in 0..kernel {
                let back = (kernel - 1 - j) * dilation;
                if back > t {
                    continue;
                }
                let src = (b * time + t - back) * c_in;
                for (o, &gv) in g_row.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let w_base = o * c_in * kernel + j;
                    for c in 0..c_in {
                        dx[src + c] += gv * w[w_base + c * kernel];
                        dw[w_base + c * kernel] += gv * x[src + c];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

mod common;

use common::{random_tensor, relative_error, rng};
use rand::Rng;
use trendlab::nn::{Forecaster, ModelError, ParamStore};
use trendlab::numerics::{Graph, Tensor};
use trendlab::xlstm_ts::{Block, BlockKind, MlstmMode, MlstmState, XlstmTs, XlstmTsConfig};

fn small(layout: Vec<BlockKind>, embed: usize, seq: usize) -> XlstmTsConfig {
    let mut c = XlstmTsConfig::default().with_sequence_length(seq);
    c.embedding_dim = embed;
    c.block_layout = layout;
    c
}

fn windows(batch: usize, len: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(vec![batch, len, 1], (0..batch * len).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn run(model: &XlstmTs, x: &Tensor, mode: MlstmMode) -> Tensor {
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let xv = g.constant(x.clone());
    let y = model.forward_mode(&g, &p, xv, mode).unwrap();
    (*g.value(y)).clone()
}

#[test]
fn default_parameter_counts_match_reference_table() {
    let model = XlstmTs::new(XlstmTsConfig::default(), 7).unwrap();
    let pc = model.parameter_count();
    let counts: Vec<usize> = pc.layers.iter().map(|l| l.params).collect();
    assert_eq!(counts, vec![128, 27_844, 41_600, 27_844, 27_844, 64, 65]);
    assert_eq!(pc.total, 125_389);
    assert_eq!(pc.total, counts.iter().sum::<usize>());
}

#[test]
fn parameter_count_is_deterministic_and_seed_independent() {
    let cfg = small(vec![BlockKind::Slstm, BlockKind::Mlstm], 16, 10);
    let a = XlstmTs::new(cfg.clone(), 1).unwrap().parameter_count();
    let b = XlstmTs::new(cfg, 2).unwrap().parameter_count();
    assert_eq!(a, b);
}

#[test]
fn output_shape_for_default_batch() {
    let model = XlstmTs::new(XlstmTsConfig::default(), 0).unwrap();
    let y = run(&model, &windows(16, 150, 1), MlstmMode::Parallel);
    assert_eq!(y.shape(), &[16, 1]);
    assert!(y.all_finite());
}

#[test]
fn wrong_window_length_is_rejected() {
    let model = XlstmTs::new(small(vec![BlockKind::Mlstm], 8, 12), 0).unwrap();
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let x = g.constant(windows(2, 11, 0));
    let err = model.forward(&g, &p, x).unwrap_err();
    assert!(matches!(err, ModelError::WindowLength { expected: 12, got: 11 }));
    assert!(model.predict(&[0.0; 13], Default::default()).is_err());
}

#[test]
fn duplicated_windows_give_identical_outputs() {
    let model = XlstmTs::new(small(vec![BlockKind::Mlstm, BlockKind::Slstm], 16, 20), 3).unwrap();
    let w = windows(3, 20, 4);
    let mut data = w.data().to_vec();
    data.extend_from_slice(&w.data()[..20]);
    let x = Tensor::new(vec![4, 20, 1], data).unwrap();
    let y = run(&model, &x, MlstmMode::Parallel);
    assert_eq!(y.data()[0].to_bits(), y.data()[3].to_bits());
}

#[test]
fn batch_permutation_permutes_outputs() {
    let model = XlstmTs::new(small(vec![BlockKind::Mlstm, BlockKind::Slstm], 16, 20), 5).unwrap();
    let x = windows(3, 20, 6);
    let y = run(&model, &x, MlstmMode::Parallel);
    let order = [2usize, 0, 1];
    let permuted: Vec<f64> = order.iter().flat_map(|&b| x.data()[b * 20..(b + 1) * 20].to_vec()).collect();
    let yp = run(&model, &Tensor::new(vec![3, 20, 1], permuted).unwrap(), MlstmMode::Parallel);
    for (i, &b) in order.iter().enumerate() {
        assert_eq!(yp.data()[i].to_bits(), y.data()[b].to_bits());
    }
}

#[test]
fn single_step_memory_is_gated_outer_product() {
    let d = 4;
    let q = [0.3, -0.1, 0.7, 0.2];
    let k = [0.5, 0.4, -0.6, 0.1];
    let v = [1.0, -2.0, 0.5, 0.25];
    let (ig, fg) = (0.8, 1.3);
    let mut st = MlstmState::new(d);
    let h = st.step(&q, &k, &v, ig, fg);
    let mem = st.memory();
    for a in 0..d {
        for b in 0..d {
            let want = ig.exp() * v[a] * k[b];
            assert!((mem[a * d + b] - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }
    // h = C q / max(|n·q|, 1) with the stabilised memory C = v⊗k
    let nq: f64 = k.iter().zip(&q).map(|(a, b)| a * b).sum();
    let denom = nq.abs().max((-ig).exp()) + 1e-6;
    for a in 0..d {
        assert!((h[a] - v[a] * nq / denom).abs() < 1e-12);
    }
}

#[test]
fn recurrent_and_parallel_mlstm_agree() {
    let cfg = small(vec![BlockKind::Mlstm, BlockKind::Mlstm], 64, 32);
    let model = XlstmTs::new(cfg, 11).unwrap();
    let x = windows(3, 32, 12);
    let a = run(&model, &x, MlstmMode::Parallel);
    let b = run(&model, &x, MlstmMode::Recurrent);
    for (p, r) in a.data().iter().zip(b.data()) {
        assert!((p - r).abs() < 1e-8, "{p} vs {r}");
    }
    // per-step features as well, not only the final readout
    let feats = |mode| {
        let g = Graph::new();
        let p = model.params().bind(&g, false);
        let f = model.features(&g, &p, g.constant(x.clone()), mode).unwrap();
        (*g.value(f)).clone()
    };
    let (fa, fb) = (feats(MlstmMode::Parallel), feats(MlstmMode::Recurrent));
    let worst = fa.data().iter().zip(fb.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "max deviation {worst:e}");
}

fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    for name in store.names().to_vec() {
        if name.starts_with(prefix) {
            store.by_name_mut(&name).unwrap().scale(0.0);
        }
    }
}

#[test]
fn zeroed_blocks_reduce_to_projection_norm_projection() {
    let mut model = XlstmTs::new(small(vec![BlockKind::Mlstm, BlockKind::Slstm], 16, 10), 8).unwrap();
    zero_prefix(model.params_mut(), "blocks.");
    let x = windows(2, 10, 9);
    let y = run(&model, &x, MlstmMode::Parallel);
    let s = model.params();
    let (w_in, b_in) = (s.by_name("input.weight").unwrap(), s.by_name("input.bias").unwrap());
    let ln = s.by_name("post_norm.weight").unwrap();
    let (w_out, b_out) = (s.by_name("output.weight").unwrap(), s.by_name("output.bias").unwrap());
    for b in 0..2 {
        let xv = x.data()[b * 10 + 9];
        let e: Vec<f64> = (0..16).map(|j| xv * w_in.data()[j] + b_in.data()[j]).collect();
        let mean = e.iter().sum::<f64>() / 16.0;
        let var = e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        let n: Vec<f64> = e.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        let out: f64 = n.iter().enumerate().map(|(j, v)| v * ln.data()[j] * w_out.data()[j]).sum::<f64>()
            + b_out.data()[0];
        assert!((y.data()[b] - out).abs() < 1e-12);
    }
}

#[test]
fn slstm_zero_input_with_zero_gates_returns_zero() {
    let mut model = XlstmTs::new(small(vec![BlockKind::Slstm], 16, 6), 1).unwrap();
    zero_prefix(model.params_mut(), "blocks.0.");
    let Block::Slstm(block) = &model.blocks()[0] else { unreachable!() };
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let x = g.constant(Tensor::zeros(&[2, 6, 16]));
    let (y, state) = block.forward(&g, &p, x, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(state.is_finite());
    assert!(state.normaliser.iter().all(|&n| n > 0.0));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(x: &[f64], w: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter().zip(w).map(|(v, s)| (v - mean) / (var + 1e-5).sqrt() * s).collect()
}

/// `y[h·d + o] = Σ_i w[h][o][i] · x[h·d + i]`
fn headwise(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let s = w.shape();
    let (heads, d_out, d_in) = (s[0], s[1], s[2]);
    let mut y = vec![0.0; heads * d_out];
    for h in 0..heads {
        for o in 0..d_out {
            for i in 0..d_in {
                y[h * d_out + o] += w.data()[(h * d_out + o) * d_in + i] * x[h * d_in + i];
            }
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// The sLSTM block written out literally, with unstabilised exponential
/// gates `i = exp(ĩ)`, `f = σ(f̃)`.
fn slstm_oracle(s: &ParamStore, x: &[Vec<f64>], e: usize, heads: usize) -> Vec<Vec<f64>> {
    let p = |n: &str| s.by_name(&format!("blocks.0.{n}")).unwrap();
    let dh = e / heads;
    let conv_w = p("conv.weight");
    let k = conv_w.shape()[1];
    let normed: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, p("norm.weight").data())).collect();
    let (mut c, mut n, mut h) = (vec![0.0; e], vec![0.0; e], vec![0.0; e]);
    let mut out = Vec::new();
    for t in 0..x.len() {
        let conv: Vec<f64> = (0..e)
            .map(|ch| {
                let mut acc = p("conv.bias").data()[ch];
                for j in 0..k {
                    let back = k - 1 - j;
                    if back <= t {
                        acc += conv_w.data()[ch * k + j] * normed[t - back][ch];
                    }
                }
                acc * sigmoid(acc)
            })
            .collect();
        let gi = headwise(p("igate.weight"), &conv);
        let gf = headwise(p("fgate.weight"), &conv);
        let gz = headwise(p("zgate.weight"), &normed[t]);
        let go = headwise(p("ogate.weight"), &normed[t]);
        let r = headwise(p("recurrent"), &h);
        let b = p("bias").data();
        let rec = |gate: usize, j: usize| r[(j / dh) * 4 * dh + gate * dh + j % dh];
        let mut hn = vec![0.0; e];
        for j in 0..e {
            let it = gi[j] + rec(0, j) + b[j];
            let ft = gf[j] + rec(1, j) + b[e + j];
            let zt = gz[j] + rec(2, j) + b[2 * e + j];
            let ot = go[j] + rec(3, j) + b[3 * e + j];
            let (ig, fg) = (it.exp(), sigmoid(ft));
            c[j] = fg * c[j] + ig * zt.tanh();
            n[j] = fg * n[j] + ig;
            hn[j] = sigmoid(ot) * c[j] / n[j];
        }
        h = hn;
        out.push(h.clone());
    }
    // group norm, residual, gated feed-forward
    let ffn = p("ffn_down.weight").shape()[0];
    out.iter()
        .zip(x)
        .map(|(hs, xr)| {
            let mut y = vec![0.0; e];
            for hd in 0..heads {
                let seg = layer_norm(&hs[hd * dh..(hd + 1) * dh], &vec![1.0; dh]);
                for i in 0..dh {
                    y[hd * dh + i] = seg[i] * p("group_norm.weight").data()[hd * dh + i];
                }
            }
            let x1: Vec<f64> = xr.iter().zip(&y).map(|(a, b)| a + b).collect();
            let f = layer_norm(&x1, p("ffn_norm.weight").data());
            let up = p("ffn_up.weight");
            let u: Vec<f64> = (0..2 * ffn).map(|o| (0..e).map(|i| f[i] * up.data()[i * 2 * ffn + o]).sum()).collect();
            let a: Vec<f64> = (0..ffn).map(|o| gelu(u[o]) * u[ffn + o]).collect();
            let down = p("ffn_down.weight");
            (0..e)
                .map(|o| x1[o] + (0..ffn).map(|i| a[i] * down.data()[i * e + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn slstm_matches_literal_update_equations() {
    let (e, heads, steps) = (8, 2, 3);
    let model = XlstmTs::new(small(vec![BlockKind::Slstm], e, steps), 21).unwrap();
    let Block::Slstm(block) = &model.blocks()[0] else { unreachable!() };
    let mut r = rng(22);
    let x = random_tensor(&[1, steps, e], 0.5, &mut r);
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let (y, _) = block.forward(&g, &p, g.constant(x.clone()), None).unwrap();
    let rows: Vec<Vec<f64>> = x.data().chunks(e).map(<[f64]>::to_vec).collect();
    let want = slstm_oracle(model.params(), &rows, e, heads);
    for (got, want) in g.value(y).data().chunks(e).zip(&want) {
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn slstm_stays_finite_over_long_sequences_with_large_weights() {
    let steps = 10_000;
    let mut model = XlstmTs::new(small(vec![BlockKind::Slstm], 64, steps), 31).unwrap();
    model.params_mut().scale_all(10.0);
    let Block::Slstm(block) = &model.blocks()[0] else { unreachable!() };
    let mut r = rng(32);
    let x = Tensor::new(vec![1, steps, 64], (0..steps * 64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let (y, state) = block.forward(&g, &p, g.constant(x), None).unwrap();
    assert!(g.value(y).all_finite());
    assert!(state.is_finite());
    assert!(state.normaliser.iter().all(|&n| n > 0.0));
}

#[test]
fn non_finite_input_reports_time_step() {
    let model = XlstmTs::new(small(vec![BlockKind::Slstm], 8, 10), 4).unwrap();
    let Block::Slstm(block) = &model.blocks()[0] else { unreachable!() };
    let mut data = vec![0.1; 10 * 8];
    data[5 * 8 + 3] = f64::NAN;
    let g = Graph::new();
    let p = model.params().bind(&g, false);
    let x = g.constant(Tensor::new(vec![1, 10, 8], data).unwrap());
    match block.forward(&g, &p, x, None) {
        Err(ModelError::NonFinite { step, .. }) => assert_eq!(step, 5),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn features_are_causal() {
    let model = XlstmTs::new(small(vec![BlockKind::Mlstm, BlockKind::Slstm], 16, 12), 41).unwrap();
    let x = windows(1, 12, 42);
    let feats = |x: &Tensor| {
        let g = Graph::new();
        let p = model.params().bind(&g, false);
        let f = model.features(&g, &p, g.constant(x.clone()), MlstmMode::Parallel).unwrap();
        (*g.value(f)).clone()
    };
    let base = feats(&x);
    for t in [0usize, 5, 11] {
        let mut bumped = x.clone();
        bumped.data_mut()[t] += 0.5;
        let f = feats(&bumped);
        assert_eq!(base.data()[..t * 16], f.data()[..t * 16], "perturbing t={t}");
        assert_ne!(base.data()[t * 16..(t + 1) * 16], f.data()[t * 16..(t + 1) * 16]);
    }
}

#[test]
fn stable_forward_and_backward_at_ten_times_initial_scale() {
    let mut model = XlstmTs::new(small(vec![BlockKind::Mlstm, BlockKind::Slstm], 16, 40), 51).unwrap();
    model.params_mut().scale_all(10.0);
    let g = Graph::new();
    let p = model.params().bind(&g, true);
    let x = g.constant(windows(4, 40, 52));
    let y = model.forward(&g, &p, x).unwrap();
    let loss = g.mean(y);
    g.backward(loss).unwrap();
    assert!(g.value(y).all_finite());
    assert!(model.params().gradients(&g, &p).iter().all(Tensor::all_finite));
}

#[test]
fn miniature_model_gradients_match_finite_differences() {
    let cfg = small(vec![BlockKind::Mlstm, BlockKind::Slstm], 8, 8);
    let mut model = XlstmTs::new(cfg, 61).unwrap();
    let x = windows(2, 8, 62);
    let target = Tensor::new(vec![2, 1], vec![0.3, 0.7]).unwrap();
    let loss_of = |m: &XlstmTs, with_grad: bool| {
        let g = Graph::new();
        let p = m.params().bind(&g, with_grad);
        let y = m.forward(&g, &p, g.constant(x.clone())).unwrap();
        let l = trendlab::numerics::mse(&g, y, g.constant(target.clone())).unwrap();
        let value = g.value(l).item();
        if with_grad {
            g.backward(l).unwrap();
            (value, m.params().gradients(&g, &p))
        } else {
            (value, Vec::new())
        }
    };
    let (_, grads) = loss_of(&model, true);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for pi in 0..model.params().len() {
        for i in 0..model.params().values()[pi].len() {
            let orig = model.params().values()[pi].data()[i];
            model.params_mut().values_mut()[pi].data_mut()[i] = orig + h;
            let up = loss_of(&model, false).0;
            model.params_mut().values_mut()[pi].data_mut()[i] = orig - h;
            let down = loss_of(&model, false).0;
            model.params_mut().values_mut()[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grads[pi].data()[i], numeric));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = XlstmTs::new(small(vec![BlockKind::Mlstm, BlockKind::Slstm], 8, 6), 71).unwrap();
    let text = model.to_checkpoint().unwrap();
    let back = XlstmTs::from_checkpoint(&text).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params(), model.params());
    assert_eq!(back.to_checkpoint().unwrap(), text);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = XlstmTsConfig::default();
    c.context_length = 100;
    assert!(matches!(XlstmTs::new(c, 0), Err(ModelError::Config(_))));
    let mut c = XlstmTsConfig::default();
    c.slstm.num_heads = 3;
    assert!(XlstmTs::new(c, 0).is_err());
    let mut c = XlstmTsConfig::default();
    c.block_layout.clear();
    assert!(XlstmTs::new(c, 0).is_err());
}

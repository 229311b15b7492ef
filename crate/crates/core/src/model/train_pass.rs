//! Dense forward pass with a recorded tape and a hand-written backward pass,
//! used for training on final-position answer prediction.

use super::forward::{gelu_from, gelu_grad_from, gelu_tanh};
use super::{Model, ModelError, ParamKind, PositionIds, Result, RopeTable, Weights, LN_EPS};
use crate::numerics::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, layer_norm_row, softmax_in_place};

/// One supervised sequence: the model must predict `answer` after the last token.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub ids: PositionIds,
    pub answer: u32,
}

struct LayerTape {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][row * n + col]`
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    pre: Vec<f64>,
    tanh: Vec<f64>,
    act: Vec<f64>,
}

struct Tape {
    n: usize,
    layers: Vec<LayerTape>,
    xhat_f: Vec<f64>,
    rstd_f: f64,
    h_f: Vec<f64>,
    logits: Vec<f64>,
    rope: Option<RopeTable>,
}

fn ln_rows(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    let ones = vec![1.0; d];
    let zeros = vec![0.0; d];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        rstd[r] = layer_norm_row(row, &ones, &zeros, LN_EPS, &mut xhat[r * d..(r + 1) * d]);
        for c in 0..d {
            out[r * d + c] = xhat[r * d + c] * gain[c] + bias[c];
        }
    }
    (out, xhat, rstd)
}

fn rotate(rope: &Option<RopeTable>, x: &mut [f64], n: usize, d: usize, n_heads: usize, inverse: bool) {
    if let Some(t) = rope {
        let mut m = crate::numerics::Matrix::from_vec(n, d, x.to_vec()).expect("rows x width");
        t.rotate(&mut m, 0..n, n_heads, inverse);
        x.copy_from_slice(m.data());
    }
}

/// Columns `o..o + dh` of an `n x d` matrix as a contiguous `n x dh` block.
fn head_rows(x: &[f64], n: usize, d: usize, o: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x[i * d + o..i * d + o + dh]);
    }
    out
}

/// Columns `o..o + dh` of an `n x d` matrix, transposed to `dh x n`.
fn head_cols(x: &[f64], n: usize, d: usize, o: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * n];
    for i in 0..n {
        for e in 0..dh {
            out[e * n + i] = x[i * d + o + e];
        }
    }
    out
}

fn tape_forward(model: &Model, ex: &TrainExample) -> Result<Tape> {
    let cfg = &model.config;
    let w = &model.weights;
    let n = ex.tokens.len();
    if n == 0 || ex.ids.len() != n {
        return Err(ModelError::Length(format!(
            "{} tokens with {} position ids",
            n,
            ex.ids.len()
        )));
    }
    for (i, &t) in ex.tokens.iter().enumerate().chain(std::iter::once((n, &ex.answer))) {
        if t as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfVocab {
                position: i,
                token: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    let (d, dh, nh, f) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ffn());
    let scale = 1.0 / (dh as f64).sqrt();
    let rope = RopeTable::new(&ex.ids, cfg.pe_mode, dh);

    let emb = w.slice(ParamKind::TokenEmbedding);
    let mut x = vec![0.0; n * d];
    for (r, &t) in ex.tokens.iter().enumerate() {
        x[r * d..(r + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (h1, xhat1, rstd1) = ln_rows(&x, w.slice(ParamKind::LnGain(l)), w.slice(ParamKind::LnBias(l)), d);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        gemm_acc(&h1, w.slice(ParamKind::Wq(l)), &mut q, n, d, d);
        gemm_acc(&h1, w.slice(ParamKind::Wk(l)), &mut k, n, d, d);
        gemm_acc(&h1, w.slice(ParamKind::Wv(l)), &mut v, n, d, d);
        rotate(&rope, &mut q, n, d, nh, false);
        rotate(&rope, &mut k, n, d, nh, false);

        let mut att = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(nh);
        let mut oh = vec![0.0; n * dh];
        for head in 0..nh {
            let o = head * dh;
            let qh = head_rows(&q, n, d, o, dh);
            let kt = head_cols(&k, n, d, o, dh);
            let vh = head_rows(&v, n, d, o, dh);
            let mut p = vec![0.0; n * n];
            gemm_acc(&qh, &kt, &mut p, n, dh, n);
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j > i { f64::NEG_INFINITY } else { *s * scale };
                }
                softmax_in_place(row).map_err(|_| ModelError::FullyMasked {
                    layer: l,
                    head,
                    token: i,
                })?;
            }
            oh.fill(0.0);
            gemm_acc(&p, &vh, &mut oh, n, n, dh);
            for i in 0..n {
                att[i * d + o..i * d + o + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
            probs.push(p);
        }
        gemm_acc(&att, w.slice(ParamKind::Wo(l)), &mut x, n, d, d);

        let (h2, xhat2, rstd2) = ln_rows(
            &x,
            w.slice(ParamKind::FfnLnGain(l)),
            w.slice(ParamKind::FfnLnBias(l)),
            d,
        );
        let b1 = w.slice(ParamKind::FfnInBias(l));
        let mut pre = Vec::with_capacity(n * f);
        for _ in 0..n {
            pre.extend_from_slice(b1);
        }
        gemm_acc(&h2, w.slice(ParamKind::FfnIn(l)), &mut pre, n, d, f);
        let mut tanh = vec![0.0; n * f];
        let mut act = vec![0.0; n * f];
        for ((t, a), &u) in tanh.iter_mut().zip(act.iter_mut()).zip(&pre) {
            *t = gelu_tanh(u);
            *a = gelu_from(u, *t);
        }
        let b2 = w.slice(ParamKind::FfnOutBias(l));
        for r in 0..n {
            for (o, b) in x[r * d..(r + 1) * d].iter_mut().zip(b2) {
                *o += b;
            }
        }
        gemm_acc(&act, w.slice(ParamKind::FfnOut(l)), &mut x, n, f, d);
        layers.push(LayerTape {
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            xhat2,
            rstd2,
            h2,
            pre,
            tanh,
            act,
        });
    }

    let last = &x[(n - 1) * d..];
    let (h_f, xhat_f, rstd_f) = ln_rows(
        last,
        w.slice(ParamKind::FinalLnGain),
        w.slice(ParamKind::FinalLnBias),
        d,
    );
    let mut logits = vec![0.0; cfg.vocab_size];
    gemm_acc(&h_f, w.slice(ParamKind::Unembed), &mut logits, 1, d, cfg.vocab_size);
    Ok(Tape {
        n,
        layers,
        xhat_f,
        rstd_f: rstd_f[0],
        h_f,
        logits,
        rope,
    })
}

/// Accumulates layer-norm parameter gradients and returns `dx` for the given
/// rows of `dy`.
#[allow(clippy::too_many_arguments)]
fn ln_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
    d: usize,
) {
    let n = rstd.len();
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xr = &xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xr[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let out = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            out[c] += rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
        }
    }
}

fn backward(model: &Model, ex: &TrainExample, tape: &Tape, dlogits: &[f64], grad: &mut Weights) {
    let cfg = &model.config;
    let w = &model.weights;
    let (d, dh, nh, f, vsz) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ffn(), cfg.vocab_size);
    let n = tape.n;
    let scale = 1.0 / (dh as f64).sqrt();

    gemm_at_acc(&tape.h_f, dlogits, grad.slice_mut(ParamKind::Unembed), 1, d, vsz);
    let mut dh_f = vec![0.0; d];
    gemm_bt_acc(dlogits, w.slice(ParamKind::Unembed), &mut dh_f, 1, vsz, d);
    let mut dx = vec![0.0; n * d];
    {
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        ln_backward(
            &dh_f,
            &tape.xhat_f,
            &[tape.rstd_f],
            w.slice(ParamKind::FinalLnGain),
            &mut dg,
            &mut db,
            &mut dx[(n - 1) * d..],
            d,
        );
        add(grad.slice_mut(ParamKind::FinalLnGain), &dg);
        add(grad.slice_mut(ParamKind::FinalLnBias), &db);
    }

    for l in (0..cfg.n_layers).rev() {
        let t = &tape.layers[l];
        // feed-forward block
        gemm_at_acc(&t.act, &dx, grad.slice_mut(ParamKind::FfnOut(l)), n, f, d);
        {
            let db2 = grad.slice_mut(ParamKind::FfnOutBias(l));
            for r in 0..n {
                add(db2, &dx[r * d..(r + 1) * d]);
            }
        }
        let mut dpre = vec![0.0; n * f];
        gemm_bt_acc(&dx, w.slice(ParamKind::FfnOut(l)), &mut dpre, n, d, f);
        for ((g, &u), &th) in dpre.iter_mut().zip(&t.pre).zip(&t.tanh) {
            *g *= gelu_grad_from(u, th);
        }
        gemm_at_acc(&t.h2, &dpre, grad.slice_mut(ParamKind::FfnIn(l)), n, d, f);
        {
            let db1 = grad.slice_mut(ParamKind::FfnInBias(l));
            for r in 0..n {
                add(db1, &dpre[r * f..(r + 1) * f]);
            }
        }
        let mut dh2 = vec![0.0; n * d];
        gemm_bt_acc(&dpre, w.slice(ParamKind::FfnIn(l)), &mut dh2, n, f, d);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        ln_backward(
            &dh2,
            &t.xhat2,
            &t.rstd2,
            w.slice(ParamKind::FfnLnGain(l)),
            &mut dg,
            &mut db,
            &mut dx,
            d,
        );
        add(grad.slice_mut(ParamKind::FfnLnGain(l)), &dg);
        add(grad.slice_mut(ParamKind::FfnLnBias(l)), &db);

        // attention block
        gemm_at_acc(&t.att, &dx, grad.slice_mut(ParamKind::Wo(l)), n, d, d);
        let mut datt = vec![0.0; n * d];
        gemm_bt_acc(&dx, w.slice(ParamKind::Wo(l)), &mut datt, n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for head in 0..nh {
            let o = head * dh;
            let p = &t.probs[head];
            let da = head_rows(&datt, n, d, o, dh);
            let vh = head_rows(&t.v, n, d, o, dh);
            let qh = head_rows(&t.q, n, d, o, dh);
            let kh = head_rows(&t.k, n, d, o, dh);
            // dP = dA V^T, dV = P^T dA
            let mut ds = vec![0.0; n * n];
            gemm_bt_acc(&da, &vh, &mut ds, n, dh, n);
            let mut dvh = vec![0.0; n * dh];
            gemm_at_acc(p, &da, &mut dvh, n, n, dh);
            for i in 0..n {
                let prow = &p[i * n..(i + 1) * n];
                let drow = &mut ds[i * n..(i + 1) * n];
                let acc = dot(prow, drow);
                for (g, &pij) in drow.iter_mut().zip(prow) {
                    *g = pij * (*g - acc) * scale;
                }
            }
            let mut dqh = vec![0.0; n * dh];
            let mut dkh = vec![0.0; n * dh];
            gemm_acc(&ds, &kh, &mut dqh, n, n, dh);
            gemm_at_acc(&ds, &qh, &mut dkh, n, n, dh);
            for i in 0..n {
                dq[i * d + o..i * d + o + dh].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
                dk[i * d + o..i * d + o + dh].copy_from_slice(&dkh[i * dh..(i + 1) * dh]);
                dv[i * d + o..i * d + o + dh].copy_from_slice(&dvh[i * dh..(i + 1) * dh]);
            }
        }
        rotate(&tape.rope, &mut dq, n, d, nh, true);
        rotate(&tape.rope, &mut dk, n, d, nh, true);
        gemm_at_acc(&t.h1, &dq, grad.slice_mut(ParamKind::Wq(l)), n, d, d);
        gemm_at_acc(&t.h1, &dk, grad.slice_mut(ParamKind::Wk(l)), n, d, d);
        gemm_at_acc(&t.h1, &dv, grad.slice_mut(ParamKind::Wv(l)), n, d, d);
        let mut dh1 = vec![0.0; n * d];
        gemm_bt_acc(&dq, w.slice(ParamKind::Wq(l)), &mut dh1, n, d, d);
        gemm_bt_acc(&dk, w.slice(ParamKind::Wk(l)), &mut dh1, n, d, d);
        gemm_bt_acc(&dv, w.slice(ParamKind::Wv(l)), &mut dh1, n, d, d);
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        ln_backward(
            &dh1,
            &t.xhat1,
            &t.rstd1,
            w.slice(ParamKind::LnGain(l)),
            &mut dg,
            &mut db,
            &mut dx,
            d,
        );
        add(grad.slice_mut(ParamKind::LnGain(l)), &dg);
        add(grad.slice_mut(ParamKind::LnBias(l)), &db);
    }

    let demb = grad.slice_mut(ParamKind::TokenEmbedding);
    for (r, &tok) in ex.tokens.iter().enumerate() {
        add(
            &mut demb[tok as usize * d..(tok as usize + 1) * d],
            &dx[r * d..(r + 1) * d],
        );
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Statistics of one call to [`loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    /// Mean cross-entropy of the answer token.
    pub loss: f64,
    /// Examples whose arg-max prediction equals the answer.
    pub correct: usize,
}

/// Adds the gradient of the batch-mean cross-entropy to `grad`.
pub fn loss_and_grad(model: &Model, batch: &[TrainExample], grad: &mut Weights) -> Result<BatchStats> {
    if batch.is_empty() {
        return Ok(BatchStats::default());
    }
    let inv = 1.0 / batch.len() as f64;
    let mut stats = BatchStats::default();
    for ex in batch {
        let tape = tape_forward(model, ex)?;
        let p = crate::numerics::softmax(&tape.logits);
        let a = ex.answer as usize;
        stats.loss += -p[a].max(f64::MIN_POSITIVE).ln() * inv;
        if argmax(&tape.logits) == a {
            stats.correct += 1;
        }
        let mut dlogits: Vec<f64> = p.iter().map(|v| v * inv).collect();
        dlogits[a] -= inv;
        backward(model, ex, &tape, &dlogits, grad);
    }
    Ok(stats)
}

/// Final-position logits computed through the training path.
pub fn train_logits(model: &Model, ex: &TrainExample) -> Result<Vec<f64>> {
    Ok(tape_forward(model, ex)?.logits)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assign_position_ids, build_layout, FrameGrid, ModelConfig, PeMode, PositionScheme, RunPlan};
    use crate::numerics::Rng;

    fn tiny(pe: PeMode) -> (Model, TrainExample, crate::model::TokenLayout) {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 1,
            d_head: 8,
            ffn_mult: 2,
            pe_mode: pe,
            vocab_size: 11,
            frame_grid: FrameGrid {
                frames: 2,
                height: 2,
                width: 1,
            },
        };
        let model = Model::init(cfg, 17).unwrap();
        let layout = build_layout(&cfg, 2, 2).unwrap();
        let ids = assign_position_ids(&layout, PositionScheme::Default);
        let mut rng = Rng::new(3);
        let tokens = (0..layout.total_len).map(|_| rng.below(11) as u32).collect();
        (model, TrainExample { tokens, ids, answer: 4 }, layout)
    }

    fn loss(model: &Model, ex: &TrainExample) -> f64 {
        let mut g = Weights::zeros_like(&model.weights);
        loss_and_grad(model, std::slice::from_ref(ex), &mut g).unwrap().loss
    }

    #[test]
    fn matches_inference_logits() {
        let (model, ex, layout) = tiny(PeMode::Rotary3d);
        let inf = model.forward(&ex.tokens, &layout, &ex.ids, &RunPlan::new()).unwrap();
        let tr = train_logits(&model, &ex).unwrap();
        for (a, b) in inf.last_logits().iter().zip(&tr) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_differences_for_every_parameter() {
        for pe in [PeMode::Rotary3d, PeMode::Rotary1d, PeMode::None] {
            let (mut model, ex, _) = tiny(pe);
            // perturb gains and biases away from their trivial init values
            let mut rng = Rng::new(9);
            for v in model.weights.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
            let mut grad = Weights::zeros_like(&model.weights);
            loss_and_grad(&model, std::slice::from_ref(&ex), &mut grad).unwrap();
            let h = 1e-5;
            for i in 0..model.weights.len() {
                let orig = model.weights.as_slice()[i];
                model.weights.as_mut_slice()[i] = orig + h;
                let up = loss(&model, &ex);
                model.weights.as_mut_slice()[i] = orig - h;
                let down = loss(&model, &ex);
                model.weights.as_mut_slice()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grad.as_slice()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{pe:?} param {i}: numeric {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let (model, ex, _) = tiny(PeMode::Rotary3d);
        let mut ex2 = ex.clone();
        ex2.answer = 7;
        ex2.tokens.reverse();
        let mut g1 = Weights::zeros_like(&model.weights);
        let mut g2 = Weights::zeros_like(&model.weights);
        let mut gb = Weights::zeros_like(&model.weights);
        loss_and_grad(&model, std::slice::from_ref(&ex), &mut g1).unwrap();
        loss_and_grad(&model, std::slice::from_ref(&ex2), &mut g2).unwrap();
        let s = loss_and_grad(&model, &[ex.clone(), ex2.clone()], &mut gb).unwrap();
        assert!((s.loss - 0.5 * (loss(&model, &ex) + loss(&model, &ex2))).abs() < 1e-12);
        for i in 0..gb.len() {
            let m = 0.5 * (g1.as_slice()[i] + g2.as_slice()[i]);
            assert!((gb.as_slice()[i] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_vocab_answer() {
        let (model, mut ex, _) = tiny(PeMode::None);
        ex.answer = 11;
        let mut g = Weights::zeros_like(&model.weights);
        assert!(loss_and_grad(&model, &[ex], &mut g).is_err());
    }
}

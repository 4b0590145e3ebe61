//! Pre-norm decoder-only transformer with a hand-written backward pass.
//!
//! Per block: `x += Attn(RMSNorm(x)) · Wo`, then `x += (silu(h·W1) ⊙ h·W3) · W2` with
//! `h = RMSNorm(x)`. Learned absolute positions, untied output head, next-token
//! cross-entropy averaged over masked-in targets. Everything is computed in `f64`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{expected_shapes, ParamName, ParamStore, Role, Tensor};
use super::{ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix, MatRef};

pub(crate) const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Fresh parameters: `N(0, 0.02²)` matrices (rounded to `f32`), unit norm scales and a zero
/// output head so the untrained model predicts the uniform distribution.
pub fn init_model(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut draw = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| normal.sample(&mut rng) as f32 as f64)
            .collect();
        Tensor::Matrix(DenseMatrix::from_raw(rows, cols, data))
    };
    let (v, d, f, t) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, cfg.max_seq_len);
    let mut tensors = BTreeMap::new();
    tensors.insert(ParamName::global(Role::EmbedTok), draw(v, d));
    tensors.insert(ParamName::global(Role::EmbedPos), draw(t, d));
    for l in 0..cfg.num_layers {
        for role in [Role::AttnWq, Role::AttnWk, Role::AttnWv, Role::AttnWo] {
            tensors.insert(ParamName::layer(l, role), draw(d, d));
        }
        tensors.insert(ParamName::layer(l, Role::FfnW1), draw(d, f));
        tensors.insert(ParamName::layer(l, Role::FfnW2), draw(f, d));
        tensors.insert(ParamName::layer(l, Role::FfnW3), draw(d, f));
    }
    tensors.insert(
        ParamName::global(Role::HeadOut),
        Tensor::Matrix(DenseMatrix::zeros(d, v)),
    );
    for name in expected_shapes(cfg).keys().filter(|n| n.role == Role::Norm) {
        tensors.insert(name.clone(), Tensor::Vector(vec![1.0; d]));
    }
    ParamStore::from_tensors(cfg.clone(), tensors)
}

/// Mean next-token cross-entropy over the batch's masked-in targets.
pub fn forward_loss(model: &ParamStore, batch: &TokenBatch) -> Result<f64> {
    batch.validate(model.config())?;
    let w = Weights::new(model);
    let fwd = forward(&w, model.config(), &batch.sequences);
    Ok(loss_and_grad(&fwd, batch, model.config().vocab_size, false).0)
}

/// Loss and its gradient with respect to every parameter tensor.
pub fn backward(model: &ParamStore, batch: &TokenBatch) -> Result<(f64, ParamStore)> {
    batch.validate(model.config())?;
    let cfg = model.config();
    let w = Weights::new(model);
    let fwd = forward(&w, cfg, &batch.sequences);
    let (loss, dlogits) = loss_and_grad(&fwd, batch, cfg.vocab_size, true);
    let grads = backprop(&w, cfg, &fwd, &batch.sequences, &dlogits.expect("requested"));
    Ok((loss, grads))
}

/// Greedy decoding; ties go to the lowest token id.
pub fn generate(model: &ParamStore, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut out = generate_batch(model, &[prompt.to_vec()], max_new)?;
    Ok(out.pop().expect("one prompt in, one out"))
}

/// Greedy decoding of several prompts at once. Returns each prompt extended by `max_new` tokens.
pub fn generate_batch(model: &ParamStore, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>> {
    let cfg = model.config();
    for p in prompts {
        if p.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        if p.len() + max_new > cfg.max_seq_len {
            return Err(Error::Data(format!(
                "prompt of length {} plus {max_new} new tokens exceeds max_seq_len {}",
                p.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&t) = p.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!("token id {t} out of range for vocab {}", cfg.vocab_size)));
        }
    }
    let w = Weights::new(model);
    let mut seqs: Vec<Vec<u32>> = prompts.to_vec();
    for _ in 0..max_new {
        if seqs.is_empty() {
            break;
        }
        let fwd = forward(&w, cfg, &seqs);
        let v = cfg.vocab_size;
        for (seg, seq) in fwd.segments.iter().zip(seqs.iter_mut()) {
            let row = seg.offset + seg.len - 1;
            let logits = &fwd.logits[row * v..(row + 1) * v];
            let mut best = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[best] {
                    best = i;
                }
            }
            seq.push(best as u32);
        }
    }
    Ok(seqs)
}

struct LayerWeights<'a> {
    norm_attn: &'a [f64],
    wq: &'a DenseMatrix,
    wk: &'a DenseMatrix,
    wv: &'a DenseMatrix,
    wo: &'a DenseMatrix,
    norm_ffn: &'a [f64],
    w1: &'a DenseMatrix,
    w2: &'a DenseMatrix,
    w3: &'a DenseMatrix,
}

struct Weights<'a> {
    tok: &'a DenseMatrix,
    pos: &'a DenseMatrix,
    head: &'a DenseMatrix,
    norm_final: &'a [f64],
    layers: Vec<LayerWeights<'a>>,
}

impl<'a> Weights<'a> {
    fn new(s: &'a ParamStore) -> Self {
        let layers = (0..s.config().num_layers)
            .map(|l| LayerWeights {
                norm_attn: s.vector(&ParamName::layer(l, Role::Norm).with_qualifier("attn")),
                wq: s.matrix(&ParamName::layer(l, Role::AttnWq)),
                wk: s.matrix(&ParamName::layer(l, Role::AttnWk)),
                wv: s.matrix(&ParamName::layer(l, Role::AttnWv)),
                wo: s.matrix(&ParamName::layer(l, Role::AttnWo)),
                norm_ffn: s.vector(&ParamName::layer(l, Role::Norm).with_qualifier("ffn")),
                w1: s.matrix(&ParamName::layer(l, Role::FfnW1)),
                w2: s.matrix(&ParamName::layer(l, Role::FfnW2)),
                w3: s.matrix(&ParamName::layer(l, Role::FfnW3)),
            })
            .collect();
        Self {
            tok: s.matrix(&ParamName::global(Role::EmbedTok)),
            pos: s.matrix(&ParamName::global(Role::EmbedPos)),
            head: s.matrix(&ParamName::global(Role::HeadOut)),
            norm_final: s.vector(&ParamName::global(Role::Norm).with_qualifier("final")),
            layers,
        }
    }
}

#[derive(Clone, Copy)]
struct Segment {
    offset: usize,
    len: usize,
}

struct LayerCache {
    x_in: Vec<f64>,
    r1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax weights, per segment then head, `len × len` each (upper triangle zero).
    probs: Vec<f64>,
    ctx: Vec<f64>,
    x_mid: Vec<f64>,
    r2: Vec<f64>,
    h2: Vec<f64>,
    a1: Vec<f64>,
    a3: Vec<f64>,
    u: Vec<f64>,
}

struct ForwardPass {
    segments: Vec<Segment>,
    rows: usize,
    layers: Vec<LayerCache>,
    x_last: Vec<f64>,
    rf: Vec<f64>,
    hf: Vec<f64>,
    logits: Vec<f64>,
}

fn segments_of(seqs: &[Vec<u32>]) -> (Vec<Segment>, usize) {
    let mut offset = 0;
    let segs = seqs
        .iter()
        .map(|s| {
            let seg = Segment { offset, len: s.len() };
            offset += s.len();
            seg
        })
        .collect();
    (segs, offset)
}

fn linear(x: &[f64], rows: usize, w: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; rows * w.cols()];
    gemm(
        rows,
        w.rows(),
        w.cols(),
        1.0,
        MatRef::row_major(x, w.rows()),
        MatRef::row_major(w.as_slice(), w.cols()),
        0.0,
        &mut out,
    );
    out
}

/// `dw += xᵀ·dy` and `dx += dy·wᵀ`.
fn linear_back(x: &[f64], dy: &[f64], rows: usize, w: &DenseMatrix, dw: &mut [f64], dx: &mut [f64]) {
    let (din, dout) = w.shape();
    gemm(
        din,
        rows,
        dout,
        1.0,
        MatRef::transposed(x, din),
        MatRef::row_major(dy, dout),
        1.0,
        dw,
    );
    gemm(
        rows,
        dout,
        din,
        1.0,
        MatRef::row_major(dy, dout),
        MatRef::transposed(w.as_slice(), dout),
        1.0,
        dx,
    );
}

fn rms_forward(x: &[f64], d: usize, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut r = vec![0.0; rows];
    for i in 0..rows {
        let xr = &x[i * d..(i + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        r[i] = inv;
        for (j, out) in y[i * d..(i + 1) * d].iter_mut().enumerate() {
            *out = xr[j] * inv * g[j];
        }
    }
    (y, r)
}

fn rms_backward(dy: &[f64], x: &[f64], r: &[f64], d: usize, g: &[f64], dg: &mut [f64], dx: &mut [f64]) {
    for (i, &inv) in r.iter().enumerate() {
        let xr = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut dot = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xr[j] * inv;
            dot += dyr[j] * g[j] * xr[j];
        }
        let coef = inv * inv * inv * dot / d as f64;
        for (j, out) in dx[i * d..(i + 1) * d].iter_mut().enumerate() {
            *out += inv * dyr[j] * g[j] - coef * xr[j];
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn forward(w: &Weights<'_>, cfg: &ModelConfig, seqs: &[Vec<u32>]) -> ForwardPass {
    let d = cfg.hidden_dim;
    let (segments, rows) = segments_of(seqs);
    let mut x = vec![0.0; rows * d];
    for (seg, seq) in segments.iter().zip(seqs) {
        for (t, &tok) in seq.iter().enumerate() {
            let row = &mut x[(seg.offset + t) * d..(seg.offset + t + 1) * d];
            for ((o, a), b) in row.iter_mut().zip(w.tok.row(tok as usize)).zip(w.pos.row(t)) {
                *o = a + b;
            }
        }
    }

    let mut layers = Vec::with_capacity(w.layers.len());
    for lw in &w.layers {
        let (h1, r1) = rms_forward(&x, d, lw.norm_attn);
        let q = linear(&h1, rows, lw.wq);
        let k = linear(&h1, rows, lw.wk);
        let v = linear(&h1, rows, lw.wv);
        let (ctx, probs) = attention_forward(cfg, &segments, &q, &k, &v);
        let attn_out = linear(&ctx, rows, lw.wo);
        let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let (h2, r2) = rms_forward(&x_mid, d, lw.norm_ffn);
        let a1 = linear(&h2, rows, lw.w1);
        let a3 = linear(&h2, rows, lw.w3);
        let u: Vec<f64> = a1.iter().zip(&a3).map(|(&a, &b)| a * sigmoid(a) * b).collect();
        let ffn_out = linear(&u, rows, lw.w2);
        let x_out: Vec<f64> = x_mid.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            r1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            r2,
            h2,
            a1,
            a3,
            u,
        });
    }

    let (hf, rf) = rms_forward(&x, d, w.norm_final);
    let logits = linear(&hf, rows, w.head);
    ForwardPass {
        segments,
        rows,
        layers,
        x_last: x,
        rf,
        hf,
        logits,
    }
}

fn attention_forward(
    cfg: &ModelConfig,
    segments: &[Segment],
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.hidden_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0; q.len()];
    let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * cfg.num_heads;
    let mut probs = vec![0.0; total];
    let mut p_off = 0;
    for seg in segments {
        let n = seg.len;
        for h in 0..cfg.num_heads {
            let c0 = h * hd;
            let p = &mut probs[p_off..p_off + n * n];
            for t in 0..n {
                let qt = &q[(seg.offset + t) * d + c0..(seg.offset + t) * d + c0 + hd];
                let row = &mut p[t * n..t * n + n];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k[(seg.offset + s) * d + c0..(seg.offset + s) * d + c0 + hd];
                    let sc = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[s] = sc;
                    max = max.max(sc);
                }
                let mut z = 0.0;
                for val in row.iter_mut().take(t + 1) {
                    *val = (*val - max).exp();
                    z += *val;
                }
                for val in row.iter_mut().take(t + 1) {
                    *val /= z;
                }
                let out = &mut ctx[(seg.offset + t) * d + c0..(seg.offset + t) * d + c0 + hd];
                for s in 0..=t {
                    let vs = &v[(seg.offset + s) * d + c0..(seg.offset + s) * d + c0 + hd];
                    let ps = row[s];
                    for (o, &vv) in out.iter_mut().zip(vs) {
                        *o += ps * vv;
                    }
                }
            }
            p_off += n * n;
        }
    }
    (ctx, probs)
}

/// Loss and (optionally) `∂loss/∂logits`.
fn loss_and_grad(fwd: &ForwardPass, batch: &TokenBatch, vocab: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let count = batch.num_targets() as f64;
    let mut loss = 0.0;
    let mut dlogits = want_grad.then(|| vec![0.0; fwd.rows * vocab]);
    for (seg, (seq, mask)) in fwd.segments.iter().zip(batch.sequences.iter().zip(&batch.loss_mask)) {
        for t in 1..seg.len {
            if !mask[t] {
                continue;
            }
            let row = seg.offset + t - 1;
            let logits = &fwd.logits[row * vocab..(row + 1) * vocab];
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            let target = seq[t] as usize;
            loss += log_z - logits[target];
            if let Some(dl) = dlogits.as_mut() {
                let out = &mut dl[row * vocab..(row + 1) * vocab];
                for (o, &v) in out.iter_mut().zip(logits) {
                    *o = (v - log_z).exp() / count;
                }
                out[target] -= 1.0 / count;
            }
        }
    }
    (loss / count, dlogits)
}

fn grad_slot<'g>(grads: &'g mut BTreeMap<ParamName, Tensor>, name: &ParamName) -> &'g mut [f64] {
    grads.get_mut(name).expect("gradient slot exists").as_mut_slice()
}

fn backprop(w: &Weights<'_>, cfg: &ModelConfig, fwd: &ForwardPass, seqs: &[Vec<u32>], dlogits: &[f64]) -> ParamStore {
    let d = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let rows = fwd.rows;
    let mut grads: BTreeMap<ParamName, Tensor> = expected_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let t = if shape.len() == 2 {
                Tensor::Matrix(DenseMatrix::zeros(shape[0], shape[1]))
            } else {
                Tensor::Vector(vec![0.0; shape[0]])
            };
            (name, t)
        })
        .collect();

    // head and final norm
    let mut dhf = vec![0.0; rows * d];
    linear_back(
        &fwd.hf,
        dlogits,
        rows,
        w.head,
        grad_slot(&mut grads, &ParamName::global(Role::HeadOut)),
        &mut dhf,
    );
    let mut dx = vec![0.0; rows * d];
    rms_backward(
        &dhf,
        &fwd.x_last,
        &fwd.rf,
        d,
        w.norm_final,
        grad_slot(&mut grads, &ParamName::global(Role::Norm).with_qualifier("final")),
        &mut dx,
    );

    for (l, (lw, c)) in w.layers.iter().zip(&fwd.layers).enumerate().rev() {
        // FFN: x_out = x_mid + u·W2
        let mut du = vec![0.0; rows * f];
        linear_back(&c.u, &dx, rows, lw.w2, grad_slot(&mut grads, &ParamName::layer(l, Role::FfnW2)), &mut du);
        let mut da1 = vec![0.0; rows * f];
        let mut da3 = vec![0.0; rows * f];
        for i in 0..rows * f {
            let a = c.a1[i];
            let s = sigmoid(a);
            let silu = a * s;
            da3[i] = du[i] * silu;
            da1[i] = du[i] * c.a3[i] * s * (1.0 + a * (1.0 - s));
        }
        let mut dh2 = vec![0.0; rows * d];
        linear_back(&c.h2, &da1, rows, lw.w1, grad_slot(&mut grads, &ParamName::layer(l, Role::FfnW1)), &mut dh2);
        linear_back(&c.h2, &da3, rows, lw.w3, grad_slot(&mut grads, &ParamName::layer(l, Role::FfnW3)), &mut dh2);
        // dx currently holds ∂/∂x_out, which flows unchanged into x_mid through the residual.
        rms_backward(
            &dh2,
            &c.x_mid,
            &c.r2,
            d,
            lw.norm_ffn,
            grad_slot(&mut grads, &ParamName::layer(l, Role::Norm).with_qualifier("ffn")),
            &mut dx,
        );

        // attention: x_mid = x_in + ctx·Wo
        let mut dctx = vec![0.0; rows * d];
        linear_back(&c.ctx, &dx, rows, lw.wo, grad_slot(&mut grads, &ParamName::layer(l, Role::AttnWo)), &mut dctx);
        let (dq, dk, dv) = attention_backward(cfg, &fwd.segments, c, &dctx);
        let mut dh1 = vec![0.0; rows * d];
        linear_back(&c.h1, &dq, rows, lw.wq, grad_slot(&mut grads, &ParamName::layer(l, Role::AttnWq)), &mut dh1);
        linear_back(&c.h1, &dk, rows, lw.wk, grad_slot(&mut grads, &ParamName::layer(l, Role::AttnWk)), &mut dh1);
        linear_back(&c.h1, &dv, rows, lw.wv, grad_slot(&mut grads, &ParamName::layer(l, Role::AttnWv)), &mut dh1);
        rms_backward(
            &dh1,
            &c.x_in,
            &c.r1,
            d,
            lw.norm_attn,
            grad_slot(&mut grads, &ParamName::layer(l, Role::Norm).with_qualifier("attn")),
            &mut dx,
        );
    }

    // embeddings, in ascending row order
    {
        let dtok = grad_slot(&mut grads, &ParamName::global(Role::EmbedTok));
        for (seg, seq) in fwd.segments.iter().zip(seqs) {
            for (t, &tok) in seq.iter().enumerate() {
                let src = &dx[(seg.offset + t) * d..(seg.offset + t + 1) * d];
                for (o, s) in dtok[tok as usize * d..(tok as usize + 1) * d].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
    }
    {
        let dpos = grad_slot(&mut grads, &ParamName::global(Role::EmbedPos));
        for seg in &fwd.segments {
            for t in 0..seg.len {
                let src = &dx[(seg.offset + t) * d..(seg.offset + t + 1) * d];
                for (o, s) in dpos[t * d..(t + 1) * d].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
    }

    ParamStore::from_tensors_unchecked(cfg.clone(), grads)
}

fn attention_backward(
    cfg: &ModelConfig,
    segments: &[Segment],
    c: &LayerCache,
    dctx: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = cfg.hidden_dim;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; dctx.len()];
    let mut dk = vec![0.0; dctx.len()];
    let mut dv = vec![0.0; dctx.len()];
    let mut ds = Vec::new();
    let mut p_off = 0;
    for seg in segments {
        let n = seg.len;
        let at = |t: usize, c0: usize| (seg.offset + t) * d + c0;
        for h in 0..cfg.num_heads {
            let c0 = h * hd;
            let p = &c.probs[p_off..p_off + n * n];
            ds.clear();
            ds.resize(n * n, 0.0);
            for t in 0..n {
                let g = &dctx[at(t, c0)..at(t, c0) + hd];
                let mut dot = 0.0;
                for s in 0..=t {
                    let vs = &c.v[at(s, c0)..at(s, c0) + hd];
                    let dp = g.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>();
                    ds[t * n + s] = dp;
                    dot += dp * p[t * n + s];
                    let pts = p[t * n + s];
                    for (o, &gg) in dv[at(s, c0)..at(s, c0) + hd].iter_mut().zip(g) {
                        *o += pts * gg;
                    }
                }
                for s in 0..=t {
                    ds[t * n + s] = p[t * n + s] * (ds[t * n + s] - dot) * scale;
                }
            }
            for t in 0..n {
                for s in 0..=t {
                    let g = ds[t * n + s];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        dq[at(t, c0) + j] += g * c.k[at(s, c0) + j];
                        dk[at(s, c0) + j] += g * c.q[at(t, c0) + j];
                    }
                }
            }
            p_off += n * n;
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            max_seq_len: 8,
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            seed: 7,
        }
    }

    #[test]
    fn init_counts_and_determinism() {
        let cfg = small_cfg();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
        let matrices = a.iter().filter(|(_, t)| matches!(t, Tensor::Matrix(_))).count();
        let vectors = a.iter().filter(|(_, t)| matches!(t, Tensor::Vector(_))).count();
        assert_eq!(matrices, 2 * 7 + 3);
        assert_eq!(vectors, 2 * 2 + 1);
        assert!(init_model(&ModelConfig { hidden_dim: 15, ..cfg }).is_err());
    }

    #[test]
    fn uniform_loss_at_init() {
        let m = init_model(&small_cfg()).unwrap();
        let batch = TokenBatch::full(vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7]]);
        let loss = forward_loss(&m, &batch).unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn batch_mean_invariance() {
        let mut m = init_model(&small_cfg()).unwrap();
        // give the head some signal so the loss is not the uniform constant
        for (i, v) in m.get_mut(&ParamName::global(Role::HeadOut)).unwrap().as_mut_slice().iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.05;
        }
        let seq = vec![3, 1, 4, 1, 5, 9];
        let one = forward_loss(&m, &TokenBatch::full(vec![seq.clone()])).unwrap();
        let two = forward_loss(&m, &TokenBatch::full(vec![seq.clone(), seq])).unwrap();
        assert!((one - two).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_token_is_data_error() {
        let m = init_model(&small_cfg()).unwrap();
        assert!(matches!(forward_loss(&m, &TokenBatch::single(vec![1, 16])), Err(Error::Data(_))));
    }

    #[test]
    fn generate_contracts() {
        let m = init_model(&small_cfg()).unwrap();
        assert_eq!(generate(&m, &[1, 2], 0).unwrap(), vec![1, 2]);
        // zero head: all logits tie, lowest id wins
        assert_eq!(generate(&m, &[1, 2], 3).unwrap(), vec![1, 2, 0, 0, 0]);
        assert!(generate(&m, &[1; 9], 0).is_err());
        assert!(generate(&m, &[], 1).is_err());
    }
}

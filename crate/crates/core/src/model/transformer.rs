//! Forward and backward passes for the two architectures.
//!
//! Pre-norm transformer blocks with sinusoidal positions, written directly
//! against flat slices so the backward pass is exact (it is checked against
//! central finite differences in the integration tests). The decoder-only
//! stack is the language model; the translator adds an encoder and
//! cross-attention.
//!
//! Batch items are processed one at a time at their effective lengths, so PAD
//! positions never enter attention and contribute exactly zero loss and
//! gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;

use super::batch::Batch;
use super::config::{ModelConfig, ModelKind};
use super::params::{Layout, ParamVector};

const LN_EPS: f64 = 1e-5;

/// Loss and per-position negative log-likelihoods for one batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput<F: Scalar> {
    /// Mean NLL over the real target positions of the batch; 0 for a batch
    /// with no real targets.
    pub loss: F,
    /// `batch * tgt_len`, zero at inactive positions.
    pub per_token_nll: Vec<F>,
}

/// Computes the batch loss without touching gradients.
pub fn forward_loss<F: Scalar>(
    params: &ParamVector<F>,
    cfg: &ModelConfig,
    batch: &Batch,
    kind: ModelKind,
    dropout_seed: Option<u64>,
) -> Result<ForwardOutput<F>> {
    run_inner(
        params.data(),
        None,
        params.layout(),
        cfg,
        batch,
        kind,
        dropout_seed,
    )
}

/// Recomputes the forward pass and writes the exact gradient of the mean-NLL
/// loss into the parameter vector's gradient buffer (overwriting it).
pub fn backward<F: Scalar>(
    params: &mut ParamVector<F>,
    cfg: &ModelConfig,
    batch: &Batch,
    kind: ModelKind,
    dropout_seed: Option<u64>,
) -> Result<ForwardOutput<F>> {
    params.zero_grad();
    let (data, grad, layout) = params.split_mut();
    run_inner(data, Some(grad), layout, cfg, batch, kind, dropout_seed)
}

fn run_inner<F: Scalar>(
    p: &[F],
    mut grad: Option<&mut [F]>,
    layout: &Layout,
    cfg: &ModelConfig,
    batch: &Batch,
    kind: ModelKind,
    dropout_seed: Option<u64>,
) -> Result<ForwardOutput<F>> {
    cfg.validate()?;
    batch.validate_ids(cfg.vocab_size)?;
    if kind == ModelKind::Translator && batch.src_len == 0 {
        return Err(Error::InvalidConfig(
            "translation batch has no source side".into(),
        ));
    }

    let mut per_token_nll = vec![F::zero(); batch.batch * batch.tgt_len];
    if batch.n_tokens == 0 {
        return Ok(ForwardOutput {
            loss: F::zero(),
            per_token_nll,
        });
    }
    let inv_n = F::from64(1.0 / batch.n_tokens as f64);
    let mut dropout = DropoutState::new(cfg.dropout, dropout_seed);
    let mut nll_sum = F::zero();

    for item in 0..batch.batch {
        let trow = item * batch.tgt_len;
        let eff_t = batch.tgt_mask[trow..trow + batch.tgt_len]
            .iter()
            .filter(|&&m| m)
            .count();
        if eff_t == 0 {
            continue;
        }
        let tgt_in = &batch.tgt_in[trow..trow + eff_t];
        let tgt_out = &batch.tgt_out[trow..trow + eff_t];

        let (memory, eff_s, src_ids) = if kind == ModelKind::Translator {
            let srow = item * batch.src_len;
            let eff_s = batch.src_mask[srow..srow + batch.src_len]
                .iter()
                .filter(|&&m| m)
                .count();
            if eff_s == 0 {
                return Err(Error::InvalidConfig("empty source sentence in batch".into()));
            }
            let src_ids = &batch.src[srow..srow + eff_s];
            let enc = encode_item(p, layout, cfg, src_ids, &mut dropout);
            (Some(enc), eff_s, Some(src_ids))
        } else {
            (None, 0, None)
        };

        let dec = decode_item(
            p,
            layout,
            cfg,
            kind,
            tgt_in,
            memory.as_ref().map(|e| e.y.as_slice()),
            eff_s,
            &mut dropout,
        );

        // Loss head: logits = y W_out^T, per-row softmax cross-entropy.
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let w_out = t(p, layout, "out_proj");
        let mut logits = vec![F::zero(); eff_t * v];
        linear_fwd(&mut logits, &dec.y, w_out, eff_t, d, v);
        let mut dlogits = grad.as_ref().map(|_| vec![F::zero(); eff_t * v]);
        for r in 0..eff_t {
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &x in row {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            let target = tgt_out[r] as usize;
            let nll = lse - row[target];
            per_token_nll[trow + r] = nll;
            nll_sum += nll;
            if let Some(dl) = dlogits.as_mut() {
                let drow = &mut dl[r * v..(r + 1) * v];
                for (c, &x) in row.iter().enumerate() {
                    drow[c] = ((x - lse).exp()) * inv_n;
                }
                drow[target] -= inv_n;
            }
        }

        if let Some(g) = grad.as_deref_mut() {
            let dlogits = dlogits.unwrap();
            // d y and dW_out.
            let mut dy = vec![F::zero(); eff_t * d];
            linear_bwd_x(&mut dy, &dlogits, w_out, eff_t, d, v);
            linear_bwd_w(gs(g, layout, "out_proj"), &dlogits, &dec.y, eff_t, d, v);

            let d_mem = decode_item_bwd(
                p,
                g,
                layout,
                cfg,
                kind,
                tgt_in,
                memory.as_ref().map(|e| e.y.as_slice()),
                eff_s,
                &dec,
                dy,
            );

            if let (Some(enc), Some(src_ids)) = (memory.as_ref(), src_ids) {
                encode_item_bwd(p, g, layout, cfg, src_ids, enc, d_mem.unwrap());
            }
        }
    }

    Ok(ForwardOutput {
        loss: nll_sum * inv_n,
        per_token_nll,
    })
}

// ---------------------------------------------------------------------------
// Decode-time entry points (single sentence, no loss head)
// ---------------------------------------------------------------------------

/// Encoder output for one source sentence.
pub struct EncodedSource<F: Scalar> {
    pub memory: Vec<F>,
    pub rows: usize,
}

pub fn encode_source<F: Scalar>(
    params: &ParamVector<F>,
    cfg: &ModelConfig,
    src_ids: &[u32],
) -> Result<EncodedSource<F>> {
    cfg.validate()?;
    if src_ids.is_empty() {
        return Err(Error::InvalidConfig("cannot encode an empty sentence".into()));
    }
    if src_ids.len() > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: src_ids.len(),
            max_len: cfg.max_len,
        });
    }
    for &id in src_ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::IdOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    let mut dropout = DropoutState::new(0.0, None);
    let enc = encode_item(params.data(), params.layout(), cfg, src_ids, &mut dropout);
    Ok(EncodedSource {
        memory: enc.y,
        rows: src_ids.len(),
    })
}

/// Log-probabilities of the next token after `prefix_with_bos`.
///
/// Pass `memory` for the translator, `None` for the language model.
pub fn next_token_logprobs<F: Scalar>(
    params: &ParamVector<F>,
    cfg: &ModelConfig,
    memory: Option<&EncodedSource<F>>,
    prefix_with_bos: &[u32],
) -> Result<Vec<f64>> {
    if prefix_with_bos.is_empty() {
        return Err(Error::InvalidConfig("prefix must start with BOS".into()));
    }
    if prefix_with_bos.len() > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: prefix_with_bos.len(),
            max_len: cfg.max_len,
        });
    }
    for &id in prefix_with_bos {
        if id as usize >= cfg.vocab_size {
            return Err(Error::IdOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    let kind = if memory.is_some() {
        ModelKind::Translator
    } else {
        ModelKind::Lm
    };
    let mut dropout = DropoutState::new(0.0, None);
    let dec = decode_item(
        params.data(),
        params.layout(),
        cfg,
        kind,
        prefix_with_bos,
        memory.map(|m| m.memory.as_slice()),
        memory.map_or(0, |m| m.rows),
        &mut dropout,
    );
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let rows = prefix_with_bos.len();
    let y_last = &dec.y[(rows - 1) * d..rows * d];
    let w_out = t(params.data(), params.layout(), "out_proj");
    let mut logits = vec![F::zero(); v];
    linear_fwd(&mut logits, y_last, w_out, 1, d, v);
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &x in &logits {
        sum += (x - max).exp();
    }
    let lse = (max + sum.ln()).to64();
    Ok(logits.iter().map(|&x| x.to64() - lse).collect())
}

// ---------------------------------------------------------------------------
// Internal building blocks
// ---------------------------------------------------------------------------

struct DropoutState {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl DropoutState {
    fn new(p: f64, seed: Option<u64>) -> Self {
        let rng = match (p > 0.0, seed) {
            (true, Some(s)) => Some(rng_for(s, &[0xd20u64])),
            _ => None,
        };
        DropoutState { p, rng }
    }

    /// Applies inverted dropout in place; returns the multiplier mask when
    /// active so the backward pass can reuse it.
    fn apply<F: Scalar>(&mut self, x: &mut [F]) -> Option<Vec<F>> {
        let rng = self.rng.as_mut()?;
        let keep = F::from64(1.0 / (1.0 - self.p));
        let mask: Vec<F> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < self.p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        for (xi, &m) in x.iter_mut().zip(&mask) {
            *xi *= m;
        }
        Some(mask)
    }
}

fn t<'a, F: Scalar>(p: &'a [F], layout: &Layout, name: &str) -> &'a [F] {
    let spec = layout.spec(name).expect("tensor name");
    &p[spec.offset..spec.offset + spec.len()]
}

fn gs<'a, F: Scalar>(g: &'a mut [F], layout: &Layout, name: &str) -> &'a mut [F] {
    let spec = layout.spec(name).expect("tensor name");
    &mut g[spec.offset..spec.offset + spec.len()]
}

/// y[r,o] = sum_i x[r,i] * w[o,i]
fn linear_fwd<F: Scalar>(y: &mut [F], x: &[F], w: &[F], rows: usize, din: usize, dout: usize) {
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let yr = &mut y[r * dout..(r + 1) * dout];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wrow = &w[o * din..(o + 1) * din];
            let mut acc = F::zero();
            for i in 0..din {
                acc += xr[i] * wrow[i];
            }
            *yo = acc;
        }
    }
}

/// dx[r,i] += sum_o dy[r,o] * w[o,i]
fn linear_bwd_x<F: Scalar>(dx: &mut [F], dy: &[F], w: &[F], rows: usize, din: usize, dout: usize) {
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let dxr = &mut dx[r * din..(r + 1) * din];
        for (o, &dyo) in dyr.iter().enumerate() {
            if dyo == F::zero() {
                continue;
            }
            let wrow = &w[o * din..(o + 1) * din];
            for i in 0..din {
                dxr[i] += dyo * wrow[i];
            }
        }
    }
}

/// dw[o,i] += sum_r dy[r,o] * x[r,i]
fn linear_bwd_w<F: Scalar>(dw: &mut [F], dy: &[F], x: &[F], rows: usize, din: usize, dout: usize) {
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let xr = &x[r * din..(r + 1) * din];
        for (o, &dyo) in dyr.iter().enumerate() {
            if dyo == F::zero() {
                continue;
            }
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] += dyo * xr[i];
            }
        }
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

fn ln_fwd<F: Scalar>(x: &[F], g: &[F], b: &[F], rows: usize, d: usize) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::zero(); rows * d];
    let mut xhat = vec![F::zero(); rows * d];
    let mut inv_std = vec![F::zero(); rows];
    let dd = F::from64(d as f64);
    let eps = F::from64(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mean = F::zero();
        for &xi in xr {
            mean += xi;
        }
        mean = mean / dd;
        let mut var = F::zero();
        for &xi in xr {
            let c = xi - mean;
            var += c * c;
        }
        var = var / dd;
        let istd = (var + eps).sqrt().recip();
        inv_std[r] = istd;
        for i in 0..d {
            let h = (xr[i] - mean) * istd;
            xhat[r * d + i] = h;
            y[r * d + i] = g[i] * h + b[i];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// dx += LN backward; accumulates parameter grads into dg/db.
fn ln_bwd<F: Scalar>(
    dx: &mut [F],
    dy: &[F],
    cache: &LnCache<F>,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
    rows: usize,
    d: usize,
) {
    let dd = F::from64(d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhat = &cache.xhat[r * d..(r + 1) * d];
        let istd = cache.inv_std[r];
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat[i];
        }
        let mean_dxhat = sum_dxhat / dd;
        let mean_dxhat_xhat = sum_dxhat_xhat / dd;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dxr[i] += istd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

struct AttnCache<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// heads * rows_q * rows_k, zero where masked.
    attn: Vec<F>,
    ctx: Vec<F>,
}

/// Multi-head attention. `causal` restricts query i to keys 0..=i (valid only
/// when queries and keys index the same sequence).
fn attn_fwd<F: Scalar>(
    x_q: &[F],
    x_kv: &[F],
    wq: &[F],
    wk: &[F],
    wv: &[F],
    wo: &[F],
    rows_q: usize,
    rows_k: usize,
    cfg: &ModelConfig,
    causal: bool,
) -> (Vec<F>, AttnCache<F>) {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = F::from64(1.0 / (hd as f64).sqrt());

    let mut q = vec![F::zero(); rows_q * d];
    let mut k = vec![F::zero(); rows_k * d];
    let mut v = vec![F::zero(); rows_k * d];
    linear_fwd(&mut q, x_q, wq, rows_q, d, d);
    linear_fwd(&mut k, x_kv, wk, rows_k, d, d);
    linear_fwd(&mut v, x_kv, wv, rows_k, d, d);

    let mut attn = vec![F::zero(); heads * rows_q * rows_k];
    let mut ctx = vec![F::zero(); rows_q * d];
    let mut scores = vec![F::zero(); rows_k];
    for h in 0..heads {
        let hoff = h * hd;
        for i in 0..rows_q {
            let limit = if causal { i + 1 } else { rows_k };
            let qrow = &q[i * d + hoff..i * d + hoff + hd];
            let mut max = F::neg_infinity();
            for j in 0..limit {
                let krow = &k[j * d + hoff..j * d + hoff + hd];
                let mut s = F::zero();
                for c in 0..hd {
                    s += qrow[c] * krow[c];
                }
                s *= scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = F::zero();
            for j in 0..limit {
                let e = (scores[j] - max).exp();
                scores[j] = e;
                sum += e;
            }
            let inv = sum.recip();
            let arow = &mut attn[(h * rows_q + i) * rows_k..(h * rows_q + i + 1) * rows_k];
            for j in 0..limit {
                arow[j] = scores[j] * inv;
            }
            let crow = &mut ctx[i * d + hoff..i * d + hoff + hd];
            for j in 0..limit {
                let a = arow[j];
                if a == F::zero() {
                    continue;
                }
                let vrow = &v[j * d + hoff..j * d + hoff + hd];
                for c in 0..hd {
                    crow[c] += a * vrow[c];
                }
            }
        }
    }

    let mut out = vec![F::zero(); rows_q * d];
    linear_fwd(&mut out, &ctx, wo, rows_q, d, d);
    (out, AttnCache { q, k, v, attn, ctx })
}

/// Backward of `attn_fwd`. Accumulates into `dx_q`, and into `dx_kv` when the
/// key/value stream is distinct; for self-attention pass `None` and the k/v
/// contributions fold into `dx_q`.
#[allow(clippy::too_many_arguments)]
fn attn_bwd<F: Scalar>(
    d_out: &[F],
    cache: &AttnCache<F>,
    x_q: &[F],
    x_kv: &[F],
    wq: &[F],
    wk: &[F],
    wv: &[F],
    dwq: &mut [F],
    dwk: &mut [F],
    dwv: &mut [F],
    dwo: &mut [F],
    dx_q: &mut [F],
    mut dx_kv: Option<&mut [F]>,
    rows_q: usize,
    rows_k: usize,
    cfg: &ModelConfig,
    causal: bool,
    wo: &[F],
) {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = F::from64(1.0 / (hd as f64).sqrt());

    // Through the output projection.
    let mut d_ctx = vec![F::zero(); rows_q * d];
    linear_bwd_x(&mut d_ctx, d_out, wo, rows_q, d, d);
    linear_bwd_w(dwo, d_out, &cache.ctx, rows_q, d, d);

    let mut dq = vec![F::zero(); rows_q * d];
    let mut dk = vec![F::zero(); rows_k * d];
    let mut dv = vec![F::zero(); rows_k * d];
    let mut da = vec![F::zero(); rows_k];
    for h in 0..heads {
        let hoff = h * hd;
        for i in 0..rows_q {
            let limit = if causal { i + 1 } else { rows_k };
            let arow = &cache.attn[(h * rows_q + i) * rows_k..(h * rows_q + i + 1) * rows_k];
            let dcrow = &d_ctx[i * d + hoff..i * d + hoff + hd];
            // dA and dV.
            for j in 0..limit {
                let vrow = &cache.v[j * d + hoff..j * d + hoff + hd];
                let mut acc = F::zero();
                for c in 0..hd {
                    acc += dcrow[c] * vrow[c];
                }
                da[j] = acc;
                let a = arow[j];
                if a != F::zero() {
                    let dvrow = &mut dv[j * d + hoff..j * d + hoff + hd];
                    for c in 0..hd {
                        dvrow[c] += a * dcrow[c];
                    }
                }
            }
            // Softmax backward: ds_j = a_j (da_j - sum_k a_k da_k).
            let mut dot = F::zero();
            for j in 0..limit {
                dot += arow[j] * da[j];
            }
            let qrow = &cache.q[i * d + hoff..i * d + hoff + hd];
            let dqrow_i = i * d + hoff;
            for j in 0..limit {
                let ds = arow[j] * (da[j] - dot) * scale;
                if ds == F::zero() {
                    continue;
                }
                let krow = &cache.k[j * d + hoff..j * d + hoff + hd];
                for c in 0..hd {
                    dq[dqrow_i + c] += ds * krow[c];
                    dk[j * d + hoff + c] += ds * qrow[c];
                }
            }
        }
    }

    linear_bwd_x(dx_q, &dq, wq, rows_q, d, d);
    linear_bwd_w(dwq, &dq, x_q, rows_q, d, d);
    let dx_k_target: &mut [F] = match dx_kv.as_deref_mut() {
        Some(buf) => buf,
        None => dx_q,
    };
    linear_bwd_x(dx_k_target, &dk, wk, rows_k, d, d);
    linear_bwd_w(dwk, &dk, x_kv, rows_k, d, d);
    let dx_v_target: &mut [F] = match dx_kv {
        Some(buf) => buf,
        None => dx_q,
    };
    linear_bwd_x(dx_v_target, &dv, wv, rows_k, d, d);
    linear_bwd_w(dwv, &dv, x_kv, rows_k, d, d);
}

fn embed_fwd<F: Scalar>(emb: &[F], ids: &[u32], d: usize) -> Vec<F> {
    let scale = F::from64((d as f64).sqrt());
    let mut x = vec![F::zero(); ids.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        let erow = &emb[id as usize * d..(id as usize + 1) * d];
        let xrow = &mut x[r * d..(r + 1) * d];
        for i in 0..d {
            xrow[i] = erow[i] * scale;
        }
    }
    add_positions(&mut x, ids.len(), d);
    x
}

fn embed_bwd<F: Scalar>(d_emb: &mut [F], ids: &[u32], dx: &[F], d: usize) {
    let scale = F::from64((d as f64).sqrt());
    for (r, &id) in ids.iter().enumerate() {
        let grow = &mut d_emb[id as usize * d..(id as usize + 1) * d];
        let dxrow = &dx[r * d..(r + 1) * d];
        for i in 0..d {
            grow[i] += dxrow[i] * scale;
        }
    }
}

fn add_positions<F: Scalar>(x: &mut [F], rows: usize, d: usize) {
    for t_pos in 0..rows {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = t_pos as f64 * freq;
            x[t_pos * d + 2 * i] += F::from64(angle.sin());
            x[t_pos * d + 2 * i + 1] += F::from64(angle.cos());
        }
    }
}

struct EncCache<F: Scalar> {
    x0: Vec<F>,
    layers: Vec<EncLayerCache<F>>,
    final_ln: LnCache<F>,
    y: Vec<F>,
}

struct EncLayerCache<F: Scalar> {
    x_in: Vec<F>,
    ln1: LnCache<F>,
    ln1_out: Vec<F>,
    attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    x_mid: Vec<F>,
    ln2: LnCache<F>,
    ln2_out: Vec<F>,
    h_pre: Vec<F>,
    h: Vec<F>,
    drop2: Option<Vec<F>>,
}

fn encode_item<F: Scalar>(
    p: &[F],
    layout: &Layout,
    cfg: &ModelConfig,
    src_ids: &[u32],
    dropout: &mut DropoutState,
) -> EncCache<F> {
    let d = cfg.d_model;
    let ff = cfg.d_hidden;
    let rows = src_ids.len();
    let x0 = embed_fwd(t(p, layout, "src_embed"), src_ids, d);
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let x_in = x.clone();
        let (ln1_out, ln1) = ln_fwd(
            &x,
            t(p, layout, &format!("enc.{l}.ln1.g")),
            t(p, layout, &format!("enc.{l}.ln1.b")),
            rows,
            d,
        );
        let (mut a_out, attn) = attn_fwd(
            &ln1_out,
            &ln1_out,
            t(p, layout, &format!("enc.{l}.attn.wq")),
            t(p, layout, &format!("enc.{l}.attn.wk")),
            t(p, layout, &format!("enc.{l}.attn.wv")),
            t(p, layout, &format!("enc.{l}.attn.wo")),
            rows,
            rows,
            cfg,
            false,
        );
        let drop1 = dropout.apply(&mut a_out);
        for i in 0..rows * d {
            x[i] += a_out[i];
        }
        let x_mid = x.clone();
        let (ln2_out, ln2) = ln_fwd(
            &x,
            t(p, layout, &format!("enc.{l}.ln2.g")),
            t(p, layout, &format!("enc.{l}.ln2.b")),
            rows,
            d,
        );
        let mut h_pre = vec![F::zero(); rows * ff];
        linear_fwd(
            &mut h_pre,
            &ln2_out,
            t(p, layout, &format!("enc.{l}.ffn.w1")),
            rows,
            d,
            ff,
        );
        let h: Vec<F> = h_pre.iter().map(|&z| z.max(F::zero())).collect();
        let mut f_out = vec![F::zero(); rows * d];
        linear_fwd(
            &mut f_out,
            &h,
            t(p, layout, &format!("enc.{l}.ffn.w2")),
            rows,
            ff,
            d,
        );
        let drop2 = dropout.apply(&mut f_out);
        for i in 0..rows * d {
            x[i] += f_out[i];
        }
        layers.push(EncLayerCache {
            x_in,
            ln1,
            ln1_out,
            attn,
            drop1,
            x_mid,
            ln2,
            ln2_out,
            h_pre,
            h,
            drop2,
        });
    }
    let (y, final_ln) = ln_fwd(
        &x,
        t(p, layout, "enc.final_ln.g"),
        t(p, layout, "enc.final_ln.b"),
        rows,
        d,
    );
    EncCache {
        x0,
        layers,
        final_ln,
        y,
    }
}

fn encode_item_bwd<F: Scalar>(
    p: &[F],
    g: &mut [F],
    layout: &Layout,
    cfg: &ModelConfig,
    src_ids: &[u32],
    cache: &EncCache<F>,
    d_y: Vec<F>,
) {
    let d = cfg.d_model;
    let ff = cfg.d_hidden;
    let rows = src_ids.len();

    // x at the input of the final LN is the last layer's output stream; we
    // reconstruct grads walking backwards with dx as the running stream grad.
    let mut dx = vec![F::zero(); rows * d];
    {
        // final LN
        let gain = t(p, layout, "enc.final_ln.g").to_vec();
        let (dg, db_names) = ("enc.final_ln.g", "enc.final_ln.b");
        let mut dgain = vec![F::zero(); d];
        let mut dbias = vec![F::zero(); d];
        ln_bwd(
            &mut dx,
            &d_y,
            &cache.final_ln,
            &gain,
            &mut dgain,
            &mut dbias,
            rows,
            d,
        );
        acc(gs(g, layout, dg), &dgain);
        acc(gs(g, layout, db_names), &dbias);
    }

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        // FFN branch.
        let mut d_fout = dx.clone();
        if let Some(mask) = &lc.drop2 {
            mul_mask(&mut d_fout, mask);
        }
        let mut dh = vec![F::zero(); rows * ff];
        linear_bwd_x(
            &mut dh,
            &d_fout,
            t(p, layout, &format!("enc.{l}.ffn.w2")),
            rows,
            ff,
            d,
        );
        linear_bwd_w(
            gs(g, layout, &format!("enc.{l}.ffn.w2")),
            &d_fout,
            &lc.h,
            rows,
            ff,
            d,
        );
        for i in 0..rows * ff {
            if lc.h_pre[i] <= F::zero() {
                dh[i] = F::zero();
            }
        }
        let mut d_ln2_out = vec![F::zero(); rows * d];
        linear_bwd_x(
            &mut d_ln2_out,
            &dh,
            t(p, layout, &format!("enc.{l}.ffn.w1")),
            rows,
            d,
            ff,
        );
        linear_bwd_w(
            gs(g, layout, &format!("enc.{l}.ffn.w1")),
            &dh,
            &lc.ln2_out,
            rows,
            d,
            ff,
        );
        {
            let gain = t(p, layout, &format!("enc.{l}.ln2.g")).to_vec();
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            ln_bwd(
                &mut dx,
                &d_ln2_out,
                &lc.ln2,
                &gain,
                &mut dgain,
                &mut dbias,
                rows,
                d,
            );
            acc(gs(g, layout, &format!("enc.{l}.ln2.g")), &dgain);
            acc(gs(g, layout, &format!("enc.{l}.ln2.b")), &dbias);
        }

        // Self-attention branch.
        let mut d_aout = dx.clone();
        if let Some(mask) = &lc.drop1 {
            mul_mask(&mut d_aout, mask);
        }
        let mut d_ln1_out = vec![F::zero(); rows * d];
        {
            let wq = t(p, layout, &format!("enc.{l}.attn.wq")).to_vec();
            let wk = t(p, layout, &format!("enc.{l}.attn.wk")).to_vec();
            let wv = t(p, layout, &format!("enc.{l}.attn.wv")).to_vec();
            let wo = t(p, layout, &format!("enc.{l}.attn.wo")).to_vec();
            let mut dwq = vec![F::zero(); d * d];
            let mut dwk = vec![F::zero(); d * d];
            let mut dwv = vec![F::zero(); d * d];
            let mut dwo = vec![F::zero(); d * d];
            attn_bwd(
                &d_aout,
                &lc.attn,
                &lc.ln1_out,
                &lc.ln1_out,
                &wq,
                &wk,
                &wv,
                &mut dwq,
                &mut dwk,
                &mut dwv,
                &mut dwo,
                &mut d_ln1_out,
                None,
                rows,
                rows,
                cfg,
                false,
                &wo,
            );
            acc(gs(g, layout, &format!("enc.{l}.attn.wq")), &dwq);
            acc(gs(g, layout, &format!("enc.{l}.attn.wk")), &dwk);
            acc(gs(g, layout, &format!("enc.{l}.attn.wv")), &dwv);
            acc(gs(g, layout, &format!("enc.{l}.attn.wo")), &dwo);
        }
        {
            let gain = t(p, layout, &format!("enc.{l}.ln1.g")).to_vec();
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            ln_bwd(
                &mut dx,
                &d_ln1_out,
                &lc.ln1,
                &gain,
                &mut dgain,
                &mut dbias,
                rows,
                d,
            );
            acc(gs(g, layout, &format!("enc.{l}.ln1.g")), &dgain);
            acc(gs(g, layout, &format!("enc.{l}.ln1.b")), &dbias);
        }
        let _ = &lc.x_in;
        let _ = &lc.x_mid;
    }

    embed_bwd(gs(g, layout, "src_embed"), src_ids, &dx, d);
    let _ = &cache.x0;
}

fn acc<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mul_mask<F: Scalar>(x: &mut [F], mask: &[F]) {
    for (xi, &m) in x.iter_mut().zip(mask) {
        *xi *= m;
    }
}

struct DecCache<F: Scalar> {
    x0: Vec<F>,
    layers: Vec<DecLayerCache<F>>,
    final_ln: LnCache<F>,
    y: Vec<F>,
}

struct DecLayerCache<F: Scalar> {
    ln1: LnCache<F>,
    ln1_out: Vec<F>,
    self_attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    ln2: Option<LnCache<F>>,
    ln2_out: Option<Vec<F>>,
    cross_attn: Option<AttnCache<F>>,
    drop2: Option<Vec<F>>,
    ln3: LnCache<F>,
    ln3_out: Vec<F>,
    h_pre: Vec<F>,
    h: Vec<F>,
    drop3: Option<Vec<F>>,
}

#[allow(clippy::too_many_arguments)]
fn decode_item<F: Scalar>(
    p: &[F],
    layout: &Layout,
    cfg: &ModelConfig,
    kind: ModelKind,
    tgt_in: &[u32],
    memory: Option<&[F]>,
    mem_rows: usize,
    dropout: &mut DropoutState,
) -> DecCache<F> {
    let d = cfg.d_model;
    let ff = cfg.d_hidden;
    let rows = tgt_in.len();
    let emb_name = match kind {
        ModelKind::Lm => "embed",
        ModelKind::Translator => "tgt_embed",
    };
    let x0 = embed_fwd(t(p, layout, emb_name), tgt_in, d);
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (ln1_out, ln1) = ln_fwd(
            &x,
            t(p, layout, &format!("dec.{l}.ln1.g")),
            t(p, layout, &format!("dec.{l}.ln1.b")),
            rows,
            d,
        );
        let (mut a_out, self_attn) = attn_fwd(
            &ln1_out,
            &ln1_out,
            t(p, layout, &format!("dec.{l}.attn.wq")),
            t(p, layout, &format!("dec.{l}.attn.wk")),
            t(p, layout, &format!("dec.{l}.attn.wv")),
            t(p, layout, &format!("dec.{l}.attn.wo")),
            rows,
            rows,
            cfg,
            true,
        );
        let drop1 = dropout.apply(&mut a_out);
        for i in 0..rows * d {
            x[i] += a_out[i];
        }

        let (ln2, ln2_out, cross_attn, drop2) = if kind == ModelKind::Translator {
            let mem = memory.expect("translator requires encoder memory");
            let (ln2_out, ln2) = ln_fwd(
                &x,
                t(p, layout, &format!("dec.{l}.ln2.g")),
                t(p, layout, &format!("dec.{l}.ln2.b")),
                rows,
                d,
            );
            let (mut c_out, cross) = attn_fwd(
                &ln2_out,
                mem,
                t(p, layout, &format!("dec.{l}.cross.wq")),
                t(p, layout, &format!("dec.{l}.cross.wk")),
                t(p, layout, &format!("dec.{l}.cross.wv")),
                t(p, layout, &format!("dec.{l}.cross.wo")),
                rows,
                mem_rows,
                cfg,
                false,
            );
            let drop2 = dropout.apply(&mut c_out);
            for i in 0..rows * d {
                x[i] += c_out[i];
            }
            (Some(ln2), Some(ln2_out), Some(cross), drop2)
        } else {
            (None, None, None, None)
        };

        let (ln3_out, ln3) = ln_fwd(
            &x,
            t(p, layout, &format!("dec.{l}.ln3.g")),
            t(p, layout, &format!("dec.{l}.ln3.b")),
            rows,
            d,
        );
        let mut h_pre = vec![F::zero(); rows * ff];
        linear_fwd(
            &mut h_pre,
            &ln3_out,
            t(p, layout, &format!("dec.{l}.ffn.w1")),
            rows,
            d,
            ff,
        );
        let h: Vec<F> = h_pre.iter().map(|&z| z.max(F::zero())).collect();
        let mut f_out = vec![F::zero(); rows * d];
        linear_fwd(
            &mut f_out,
            &h,
            t(p, layout, &format!("dec.{l}.ffn.w2")),
            rows,
            ff,
            d,
        );
        let drop3 = dropout.apply(&mut f_out);
        for i in 0..rows * d {
            x[i] += f_out[i];
        }

        layers.push(DecLayerCache {
            ln1,
            ln1_out,
            self_attn,
            drop1,
            ln2,
            ln2_out,
            cross_attn,
            drop2,
            ln3,
            ln3_out,
            h_pre,
            h,
            drop3,
        });
    }
    let (y, final_ln) = ln_fwd(
        &x,
        t(p, layout, "dec.final_ln.g"),
        t(p, layout, "dec.final_ln.b"),
        rows,
        d,
    );
    DecCache {
        x0,
        layers,
        final_ln,
        y,
    }
}

/// Backward of `decode_item`; returns the gradient wrt the encoder memory for
/// the translator.
#[allow(clippy::too_many_arguments)]
fn decode_item_bwd<F: Scalar>(
    p: &[F],
    g: &mut [F],
    layout: &Layout,
    cfg: &ModelConfig,
    kind: ModelKind,
    tgt_in: &[u32],
    memory: Option<&[F]>,
    mem_rows: usize,
    cache: &DecCache<F>,
    d_y: Vec<F>,
) -> Option<Vec<F>> {
    let d = cfg.d_model;
    let ff = cfg.d_hidden;
    let rows = tgt_in.len();
    let mut d_mem = memory.map(|_| vec![F::zero(); mem_rows * d]);

    let mut dx = vec![F::zero(); rows * d];
    {
        let gain = t(p, layout, "dec.final_ln.g").to_vec();
        let mut dgain = vec![F::zero(); d];
        let mut dbias = vec![F::zero(); d];
        ln_bwd(
            &mut dx,
            &d_y,
            &cache.final_ln,
            &gain,
            &mut dgain,
            &mut dbias,
            rows,
            d,
        );
        acc(gs(g, layout, "dec.final_ln.g"), &dgain);
        acc(gs(g, layout, "dec.final_ln.b"), &dbias);
    }

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        // FFN branch.
        let mut d_fout = dx.clone();
        if let Some(mask) = &lc.drop3 {
            mul_mask(&mut d_fout, mask);
        }
        let mut dh = vec![F::zero(); rows * ff];
        linear_bwd_x(
            &mut dh,
            &d_fout,
            t(p, layout, &format!("dec.{l}.ffn.w2")),
            rows,
            ff,
            d,
        );
        linear_bwd_w(
            gs(g, layout, &format!("dec.{l}.ffn.w2")),
            &d_fout,
            &lc.h,
            rows,
            ff,
            d,
        );
        for i in 0..rows * ff {
            if lc.h_pre[i] <= F::zero() {
                dh[i] = F::zero();
            }
        }
        let mut d_ln3_out = vec![F::zero(); rows * d];
        linear_bwd_x(
            &mut d_ln3_out,
            &dh,
            t(p, layout, &format!("dec.{l}.ffn.w1")),
            rows,
            d,
            ff,
        );
        linear_bwd_w(
            gs(g, layout, &format!("dec.{l}.ffn.w1")),
            &dh,
            &lc.ln3_out,
            rows,
            d,
            ff,
        );
        {
            let gain = t(p, layout, &format!("dec.{l}.ln3.g")).to_vec();
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            ln_bwd(
                &mut dx,
                &d_ln3_out,
                &lc.ln3,
                &gain,
                &mut dgain,
                &mut dbias,
                rows,
                d,
            );
            acc(gs(g, layout, &format!("dec.{l}.ln3.g")), &dgain);
            acc(gs(g, layout, &format!("dec.{l}.ln3.b")), &dbias);
        }

        // Cross-attention branch.
        if kind == ModelKind::Translator {
            let mem = memory.unwrap();
            let lc_cross = lc.cross_attn.as_ref().unwrap();
            let ln2_out = lc.ln2_out.as_ref().unwrap();
            let mut d_cout = dx.clone();
            if let Some(mask) = &lc.drop2 {
                mul_mask(&mut d_cout, mask);
            }
            let mut d_ln2_out = vec![F::zero(); rows * d];
            {
                let wq = t(p, layout, &format!("dec.{l}.cross.wq")).to_vec();
                let wk = t(p, layout, &format!("dec.{l}.cross.wk")).to_vec();
                let wv = t(p, layout, &format!("dec.{l}.cross.wv")).to_vec();
                let wo = t(p, layout, &format!("dec.{l}.cross.wo")).to_vec();
                let mut dwq = vec![F::zero(); d * d];
                let mut dwk = vec![F::zero(); d * d];
                let mut dwv = vec![F::zero(); d * d];
                let mut dwo = vec![F::zero(); d * d];
                attn_bwd(
                    &d_cout,
                    lc_cross,
                    ln2_out,
                    mem,
                    &wq,
                    &wk,
                    &wv,
                    &mut dwq,
                    &mut dwk,
                    &mut dwv,
                    &mut dwo,
                    &mut d_ln2_out,
                    Some(d_mem.as_mut().unwrap()),
                    rows,
                    mem_rows,
                    cfg,
                    false,
                    &wo,
                );
                acc(gs(g, layout, &format!("dec.{l}.cross.wq")), &dwq);
                acc(gs(g, layout, &format!("dec.{l}.cross.wk")), &dwk);
                acc(gs(g, layout, &format!("dec.{l}.cross.wv")), &dwv);
                acc(gs(g, layout, &format!("dec.{l}.cross.wo")), &dwo);
            }
            {
                let gain = t(p, layout, &format!("dec.{l}.ln2.g")).to_vec();
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                ln_bwd(
                    &mut dx,
                    &d_ln2_out,
                    lc.ln2.as_ref().unwrap(),
                    &gain,
                    &mut dgain,
                    &mut dbias,
                    rows,
                    d,
                );
                acc(gs(g, layout, &format!("dec.{l}.ln2.g")), &dgain);
                acc(gs(g, layout, &format!("dec.{l}.ln2.b")), &dbias);
            }
        }

        // Self-attention branch.
        let mut d_aout = dx.clone();
        if let Some(mask) = &lc.drop1 {
            mul_mask(&mut d_aout, mask);
        }
        let mut d_ln1_out = vec![F::zero(); rows * d];
        {
            let wq = t(p, layout, &format!("dec.{l}.attn.wq")).to_vec();
            let wk = t(p, layout, &format!("dec.{l}.attn.wk")).to_vec();
            let wv = t(p, layout, &format!("dec.{l}.attn.wv")).to_vec();
            let wo = t(p, layout, &format!("dec.{l}.attn.wo")).to_vec();
            let mut dwq = vec![F::zero(); d * d];
            let mut dwk = vec![F::zero(); d * d];
            let mut dwv = vec![F::zero(); d * d];
            let mut dwo = vec![F::zero(); d * d];
            attn_bwd(
                &d_aout,
                &lc.self_attn,
                &lc.ln1_out,
                &lc.ln1_out,
                &wq,
                &wk,
                &wv,
                &mut dwq,
                &mut dwk,
                &mut dwv,
                &mut dwo,
                &mut d_ln1_out,
                None,
                rows,
                rows,
                cfg,
                true,
                &wo,
            );
            acc(gs(g, layout, &format!("dec.{l}.attn.wq")), &dwq);
            acc(gs(g, layout, &format!("dec.{l}.attn.wk")), &dwk);
            acc(gs(g, layout, &format!("dec.{l}.attn.wv")), &dwv);
            acc(gs(g, layout, &format!("dec.{l}.attn.wo")), &dwo);
        }
        {
            let gain = t(p, layout, &format!("dec.{l}.ln1.g")).to_vec();
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            ln_bwd(
                &mut dx,
                &d_ln1_out,
                &lc.ln1,
                &gain,
                &mut dgain,
                &mut dbias,
                rows,
                d,
            );
            acc(gs(g, layout, &format!("dec.{l}.ln1.g")), &dgain);
            acc(gs(g, layout, &format!("dec.{l}.ln1.b")), &dbias);
        }
    }

    let emb_name = match kind {
        ModelKind::Lm => "embed",
        ModelKind::Translator => "tgt_embed",
    };
    embed_bwd(gs(g, layout, emb_name), tgt_in, &dx, d);
    let _ = &cache.x0;
    d_mem
}

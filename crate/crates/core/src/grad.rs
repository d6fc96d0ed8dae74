//! Reverse-mode gradients of the flow-matching loss for [`Dit`].
//!
//! The forward pass here records every intermediate the backward pass needs.
//! It uses the same kernels in the same order as [`Dit::forward_plain`], so
//! its output is bit-identical to the inference path.

use alloc::vec;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{
    apply_gate, attention_heads, modulate, sinusoidal_features, AttentionTrace, Attention, Branch,
    Dit, FeedForward, LayerKind, Linear, Modulation, NORM_EPS,
};
use crate::tensor::{gelu_grad, silu_grad, Tensor};

struct SublayerTape {
    normed: Tensor,
    inv_std: Vec<f32>,
    input: Tensor,
    /// Pre-gate sublayer output.
    raw: Tensor,
}

struct BlockTape {
    modulation: Modulation,
    attn: SublayerTape,
    attn_trace: AttentionTrace,
    ffn: SublayerTape,
    ffn_pre: Tensor,
    ffn_act: Tensor,
}

struct Tape {
    features: Tensor,
    time_pre: Tensor,
    t_embed: Tensor,
    joined: Tensor,
    blocks: Vec<BlockTape>,
    final_normed: Tensor,
    final_inv: Vec<f32>,
    final_ln: Tensor,
    out: Tensor,
}

fn sublayer_input(h: &Tensor, m: &Modulation, kind: LayerKind) -> Result<(Tensor, Vec<f32>, Tensor)> {
    let (normed, inv_std) = h.normalize_rows(NORM_EPS);
    let (_, input) = modulate(h, m.shift(kind), m.scale(kind))?;
    Ok((normed, inv_std, input))
}

fn forward_with_tape(model: &Dit, x: &Tensor, t: f32, cond: &Tensor, branch: Branch) -> Result<Tape> {
    let features = sinusoidal_features(t, model.config.width)?;
    let time_pre = model.time.forward(&features)?;
    let t_embed = time_pre.silu()?;
    model.check_input(x, "x")?;
    model.check_input(cond, "cond")?;
    let joined = x.concat_cols(&model.branch_cond(cond, branch))?;
    let mut h = model.input.forward(&joined)?.add(&model.pos)?;
    let mut blocks = Vec::with_capacity(model.config.depth);
    for (b, block) in model.blocks.iter().enumerate() {
        let m = model.modulation(b, &t_embed)?;

        let (normed, inv_std, input) = sublayer_input(&h, &m, LayerKind::Attn)?;
        let trace = attention_heads(&input, &block.attn, model.config.heads)?;
        let attn_out = apply_gate(&trace.out, m.gate(LayerKind::Attn))?;
        h.add_assign(&attn_out)?;
        let attn = SublayerTape {
            normed,
            inv_std,
            input,
            raw: trace.out.clone(),
        };

        let (normed, inv_std, input) = sublayer_input(&h, &m, LayerKind::Ffn)?;
        let ffn_pre = block.ffn.up.forward(&input)?;
        let ffn_act = ffn_pre.gelu()?;
        let raw = block.ffn.down.forward(&ffn_act)?;
        let ffn_out = apply_gate(&raw, m.gate(LayerKind::Ffn))?;
        h.add_assign(&ffn_out)?;

        blocks.push(BlockTape {
            modulation: m,
            attn,
            attn_trace: trace,
            ffn: SublayerTape {
                normed,
                inv_std,
                input,
                raw,
            },
            ffn_pre,
            ffn_act,
        });
    }
    let (final_normed, final_inv) = h.normalize_rows(NORM_EPS);
    let final_ln = h.layer_norm(&model.final_gamma, &model.final_beta, NORM_EPS)?;
    let out = model.output.forward(&final_ln)?;
    Ok(Tape {
        features,
        time_pre,
        t_embed,
        joined,
        blocks,
        final_normed,
        final_inv,
        final_ln,
        out,
    })
}

/// Accumulates `dW`, `db` into `grad` and returns `dx`.
fn linear_back(layer: &Linear, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Result<Tensor> {
    grad.w.add_assign(&x.transpose()?.matmul(dy)?)?;
    grad.b.add_assign(&dy.sum_rows())?;
    Ok(dy.matmul(&layer.w.transpose()?)?)
}

/// Backward of row normalization without affine parameters.
fn norm_back(normed: &Tensor, inv_std: &[f32], dn: &Tensor) -> Result<Tensor> {
    let n = normed.last_dim();
    let mut out = Vec::with_capacity(dn.len());
    for (r, &inv) in inv_std.iter().enumerate() {
        let nr = normed.row(r);
        let dr = dn.row(r);
        let mean_d = dr.iter().sum::<f32>() / n as f32;
        let mean_dn = dr.iter().zip(nr).map(|(a, b)| a * b).sum::<f32>() / n as f32;
        out.extend(dr.iter().zip(nr).map(|(&d, &v)| inv * (d - mean_d - v * mean_dn)));
    }
    Ok(Tensor::from_vec(dn.dims(), out)?)
}

/// Row-wise sum of `a ⊙ b`, giving a vector over columns.
fn col_dot(a: &Tensor, b: &Tensor) -> Vec<f32> {
    let n = a.last_dim();
    let mut out = vec![0.0f32; n];
    for (ra, rb) in a.data().chunks_exact(n).zip(b.data().chunks_exact(n)) {
        for ((o, &x), &y) in out.iter_mut().zip(ra).zip(rb) {
            *o += x * y;
        }
    }
    out
}

fn scale_cols(x: &Tensor, s: &[f32], offset: f32) -> Result<Tensor> {
    let n = x.last_dim();
    let data = x
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(s).map(move |(&v, &c)| v * (c + offset)))
        .collect();
    Ok(Tensor::from_vec(x.dims(), data)?)
}

/// Backward through gate, sublayer body, modulation and normalization.
/// Writes the six modulation gradients for `kind` into `dmod` and returns
/// the gradient w.r.t. the block input `h`.
fn sublayer_back(
    tape: &SublayerTape,
    m: &Modulation,
    kind: LayerKind,
    d_out: &Tensor,
    dmod: &mut [f32],
    width: usize,
    body_back: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let base = 3 * kind as usize * width;
    let dgate = col_dot(d_out, &tape.raw);
    let d_raw = scale_cols(d_out, m.gate(kind), 0.0)?;
    let d_input = body_back(&d_raw)?;
    let dshift = d_input.sum_rows();
    let dscale = col_dot(&d_input, &tape.normed);
    for i in 0..width {
        dmod[base + i] += dshift.data()[i];
        dmod[base + width + i] += dscale[i];
        dmod[base + 2 * width + i] += dgate[i];
    }
    let dn = scale_cols(&d_input, m.scale(kind), 1.0)?;
    norm_back(&tape.normed, &tape.inv_std, &dn)
}

fn attention_back(
    attn: &Attention,
    grad: &mut Attention,
    x: &Tensor,
    trace: &AttentionTrace,
    heads: usize,
    d_out: &Tensor,
) -> Result<Tensor> {
    let seq = x.rows();
    let width = x.last_dim();
    let dh = width / heads;
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let d_concat = linear_back(&attn.o, &trace.concat, d_out, &mut grad.o)?;
    let mut dq = vec![0.0f32; seq * width];
    let mut dk = vec![0.0f32; seq * width];
    let mut dv = vec![0.0f32; seq * width];
    for h in 0..heads {
        let p = &trace.probs[h];
        let qh = trace.q.slice_cols(h * dh, dh)?;
        let kh = trace.k.slice_cols(h * dh, dh)?;
        let vh = trace.v.slice_cols(h * dh, dh)?;
        let d_oh = d_concat.slice_cols(h * dh, dh)?;
        let dp = d_oh.matmul(&vh.transpose()?)?;
        let dvh = p.transpose()?.matmul(&d_oh)?;
        let mut ds = Vec::with_capacity(seq * seq);
        for r in 0..seq {
            let pr = p.row(r);
            let dr = dp.row(r);
            let dot: f32 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
            ds.extend(pr.iter().zip(dr).map(|(&pv, &dv)| pv * (dv - dot) * scale));
        }
        let ds = Tensor::from_vec(&[seq, seq], ds)?;
        let dqh = ds.matmul(&kh)?;
        let dkh = ds.transpose()?.matmul(&qh)?;
        for r in 0..seq {
            let at = r * width + h * dh;
            dq[at..at + dh].copy_from_slice(dqh.row(r));
            dk[at..at + dh].copy_from_slice(dkh.row(r));
            dv[at..at + dh].copy_from_slice(dvh.row(r));
        }
    }
    let shape = [seq, width];
    let mut dx = linear_back(&attn.q, x, &Tensor::from_vec(&shape, dq)?, &mut grad.q)?;
    let dk = Tensor::from_vec(&shape, dk)?;
    grad.k.add_assign(&x.transpose()?.matmul(&dk)?)?;
    dx.add_assign(&dk.matmul(&attn.k.transpose()?)?)?;
    dx.add_assign(&linear_back(&attn.v, x, &Tensor::from_vec(&shape, dv)?, &mut grad.v)?)?;
    Ok(dx)
}

fn ffn_back(
    ffn: &FeedForward,
    grad: &mut FeedForward,
    x: &Tensor,
    pre: &Tensor,
    act: &Tensor,
    d_out: &Tensor,
) -> Result<Tensor> {
    let d_act = linear_back(&ffn.down, act, d_out, &mut grad.down)?;
    let d_pre = Tensor::from_vec(
        d_act.dims(),
        d_act
            .data()
            .iter()
            .zip(pre.data())
            .map(|(&d, &p)| d * gelu_grad(p))
            .collect(),
    )?;
    linear_back(&ffn.up, x, &d_pre, &mut grad.up)
}

/// Backpropagates `d_out` (gradient w.r.t. the velocity output) and adds
/// parameter gradients into `grad`.
fn backward(model: &Dit, tape: &Tape, d_out: &Tensor, grad: &mut Dit) -> Result<()> {
    let width = model.config.width;
    let d_ln = linear_back(&model.output, &tape.final_ln, d_out, &mut grad.output)?;
    grad.final_gamma
        .add_assign(&Tensor::from_vec(&[width], col_dot(&d_ln, &tape.final_normed))?)?;
    grad.final_beta.add_assign(&d_ln.sum_rows())?;
    let dn = scale_cols(&d_ln, model.final_gamma.data(), 0.0)?;
    let mut dh = norm_back(&tape.final_normed, &tape.final_inv, &dn)?;
    let mut d_embed = Tensor::zeros(&[1, width]);

    for (b, bt) in tape.blocks.iter().enumerate().rev() {
        let block = &model.blocks[b];
        let gblock = &mut grad.blocks[b];
        let m = &bt.modulation;
        let mut dmod = vec![0.0f32; 6 * width];

        let d_mid = sublayer_back(&bt.ffn, m, LayerKind::Ffn, &dh, &mut dmod, width, |d| {
            ffn_back(&block.ffn, &mut gblock.ffn, &bt.ffn.input, &bt.ffn_pre, &bt.ffn_act, d)
        })?;
        dh.add_assign(&d_mid)?;

        let heads = model.config.heads;
        let d_in = sublayer_back(&bt.attn, m, LayerKind::Attn, &dh, &mut dmod, width, |d| {
            attention_back(&block.attn, &mut gblock.attn, &bt.attn.input, &bt.attn_trace, heads, d)
        })?;
        dh.add_assign(&d_in)?;

        let dmod = Tensor::from_vec(&[1, 6 * width], dmod)?;
        d_embed.add_assign(&linear_back(&block.modulation, &tape.t_embed, &dmod, &mut gblock.modulation)?)?;
    }

    grad.pos.add_assign(&dh)?;
    linear_back(&model.input, &tape.joined, &dh, &mut grad.input)?;
    let d_time_pre = Tensor::from_vec(
        &[1, width],
        d_embed
            .data()
            .iter()
            .zip(tape.time_pre.data())
            .map(|(&d, &p)| d * silu_grad(p))
            .collect(),
    )?;
    linear_back(&model.time, &tape.features, &d_time_pre, &mut grad.time)?;
    Ok(())
}

/// One flow-matching regression target: `model(x_t, t, cond, branch) ≈ target`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmExample {
    pub x_t: Tensor,
    pub t: f32,
    pub cond: Tensor,
    pub branch: Branch,
    pub target: Tensor,
}

/// Mean squared error of one example, accumulated in `f64`.
pub fn example_loss(model: &Dit, ex: &CfmExample) -> Result<f64> {
    let pred = model.forward_plain(&ex.x_t, ex.t, &ex.cond, ex.branch)?;
    Ok(mse(&pred, &ex.target))
}

pub(crate) fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    sum / pred.len() as f64
}

/// Batch-mean loss and its gradient with respect to every parameter.
pub fn loss_and_grad(model: &Dit, batch: &[CfmExample]) -> Result<(f64, Dit)> {
    let mut grad = Dit::zeros(model.config)?;
    let mut total = 0.0f64;
    let b = batch.len() as f32;
    for ex in batch {
        let tape = forward_with_tape(model, &ex.x_t, ex.t, &ex.cond, ex.branch)?;
        total += mse(&tape.out, &ex.target);
        let n = tape.out.len() as f32;
        let d_out = tape
            .out
            .sub(&ex.target)?
            .scale(2.0 / (n * b))?;
        backward(model, &tape, &d_out, &mut grad)?;
    }
    Ok((total / batch.len() as f64, grad))
}

fn batch_loss(model: &Dit, batch: &[CfmExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(model, ex)?;
    }
    Ok(total / batch.len() as f64)
}

/// Central differences of the batch loss for every entry of parameter
/// tensor `index`, through the inference forward path.
pub fn finite_difference(model: &Dit, batch: &[CfmExample], index: usize, h: f32) -> Result<Vec<f64>> {
    let n = model.tensors()[index].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = model.clone();
        plus.tensors_mut()[index].data_mut()[i] += h;
        let mut minus = model.clone();
        minus.tensors_mut()[index].data_mut()[i] -= h;
        // The step actually representable in f32.
        let step = plus.tensors()[index].data()[i] as f64 - minus.tensors()[index].data()[i] as f64;
        out.push((batch_loss(&plus, batch)? - batch_loss(&minus, batch)?) / step);
    }
    Ok(out)
}

/// `‖analytic − numeric‖₂ / ‖numeric‖₂`.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n) * (a as f64 - n))
        .sum::<f64>();
    let scale = numeric.iter().map(|n| n * n).sum::<f64>();
    libm::sqrt(diff) / libm::sqrt(scale).max(1e-8)
}

/// Relative error of the analytic gradient of every parameter tensor, by
/// name.
pub fn gradient_check(model: &Dit, batch: &[CfmExample], h: f32) -> Result<Vec<(String, f64)>> {
    let (_, grad) = loss_and_grad(model, batch)?;
    let analytic = grad.tensors();
    model
        .param_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| Ok((name, relative_error(analytic[i].data(), &finite_difference(model, batch, i, h)?))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn taped_forward_matches_inference_path() {
        let cfg = ModelConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            seq_len: 5,
            in_dim: 3,
        };
        let model = Dit::init(cfg, 4).unwrap();
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(&cfg.sample_shape(), 1.0);
        let c = rng.normal_tensor(&cfg.sample_shape(), 1.0);
        for branch in Branch::BOTH {
            let tape = forward_with_tape(&model, &x, 0.3, &c, branch).unwrap();
            assert_eq!(tape.out, model.forward_plain(&x, 0.3, &c, branch).unwrap());
        }
    }

    #[test]
    fn norm_back_matches_difference_quotient() {
        let x = Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let dn = Tensor::from_vec(&[1, 4], vec![0.5, -0.25, 1.0, 0.75]).unwrap();
        let (n, inv) = x.normalize_rows(NORM_EPS);
        let dx = norm_back(&n, &inv, &dn).unwrap();
        let f = |x: &Tensor| -> f64 {
            let (n, _) = x.normalize_rows(NORM_EPS);
            n.data().iter().zip(dn.data()).map(|(a, b)| (*a * *b) as f64).sum()
        };
        for i in 0..4 {
            let h = 1e-2f32;
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 2e-3, "{i}: {fd} vs {}", dx.data()[i]);
        }
    }
}

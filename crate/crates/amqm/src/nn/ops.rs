//! Layer primitives: forward and backward passes for convolution,
//! pooling, ReLU, dropout, fully connected, softmax, and cross-entropy.
//!
//! Convolution is direct (no im2col). The stride-1 path walks kernel
//! offsets and accumulates whole shifted rows at a time, which the
//! compiler vectorizes well; other strides fall back to plain window
//! loops.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::tensor::Tensor;

/// Forward-pass mode. Train mode draws dropout masks; eval mode is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(format!(
            "{what} must be 3-D (channels x height x width), got {other:?}"
        ))),
    }
}

/// Valid output range along one axis for a kernel offset `off`, stride 1:
/// positions y with 0 <= y + off < extent.
fn axis_range(out_len: usize, extent: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (extent as isize - off).clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is C_in x H x W, `weights` C_out x C_in x k x k, `bias` C_out.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geom = ConvGeometry::resolve(input, weights, bias, stride, pad)?;
    let ConvGeometry {
        c_in,
        h,
        w,
        c_out,
        k,
        h_out,
        w_out,
    } = geom;

    let mut out = Tensor::zeros(vec![c_out, h_out, w_out]);
    let in_data = input.data();
    let w_data = weights.data();
    let b_data = bias.data();
    let out_data = out.data_mut();

    for o in 0..c_out {
        let out_map = &mut out_data[o * h_out * w_out..][..h_out * w_out];
        out_map.fill(b_data[o]);
        for c in 0..c_in {
            let in_map = &in_data[c * h * w..][..h * w];
            let kernel = &w_data[(o * c_in + c) * k * k..][..k * k];
            if stride == 1 {
                for ky in 0..k {
                    let off_y = ky as isize - pad as isize;
                    let (y_lo, y_hi) = axis_range(h_out, h, off_y);
                    for kx in 0..k {
                        let wv = kernel[ky * k + kx];
                        let off_x = kx as isize - pad as isize;
                        let (x_lo, x_hi) = axis_range(w_out, w, off_x);
                        if x_hi <= x_lo {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let iy = (y as isize + off_y) as usize;
                            let src = &in_map[iy * w + (x_lo as isize + off_x) as usize..]
                                [..x_hi - x_lo];
                            let dst = &mut out_map[y * w_out + x_lo..][..x_hi - x_lo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            } else {
                for y in 0..h_out {
                    for x in 0..w_out {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let iy = y as isize * stride as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix =
                                    x as isize * stride as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel[ky * k + kx]
                                    * in_map[iy as usize * w + ix as usize];
                            }
                        }
                        out_map[y * w_out + x] += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn resolve(
        input: &Tensor,
        weights: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeometry> {
        let (c_in, h, w) = dims3(input, "conv input")?;
        let (c_out, wc_in, k) = match weights.shape() {
            [o, c, k1, k2] if k1 == k2 => (*o, *c, *k1),
            other => {
                return Err(Error::shape(format!(
                    "conv weights must be C_out x C_in x k x k, got {other:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv weights expect {wc_in} input channels, input has {c_in}"
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv bias must have shape [{c_out}], got {:?}",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::domain("conv stride must be positive"));
        }
        let span_h = h as isize + 2 * pad as isize - k as isize;
        let span_w = w as isize + 2 * pad as isize - k as isize;
        if span_h < 0 || span_w < 0 || span_h % stride as isize != 0 || span_w % stride as isize != 0
        {
            return Err(Error::shape(format!(
                "conv output size is not integral: input {h}x{w}, kernel {k}, stride {stride}, pad {pad}"
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            h_out: (span_h / stride as isize) as usize + 1,
            w_out: (span_w / stride as isize) as usize + 1,
        })
    }
}

pub struct ConvGrads {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

/// Gradients of a scalar loss through `conv2d`, given the upstream
/// gradient `d_out` at the conv output.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let (c_in, h, w) = dims3(input, "conv input")?;
    let (c_out, _, k) = match weights.shape() {
        [o, c, k1, k2] if *c == c_in && k1 == k2 => (*o, *c, *k1),
        other => {
            return Err(Error::shape(format!(
                "conv weights inconsistent with input: {other:?}"
            )))
        }
    };
    let (do_c, h_out, w_out) = dims3(d_out, "conv upstream gradient")?;
    if do_c != c_out {
        return Err(Error::shape(format!(
            "upstream gradient has {do_c} channels, conv produces {c_out}"
        )));
    }

    let mut d_input = Tensor::zeros(vec![c_in, h, w]);
    let mut d_weights = Tensor::zeros(weights.shape().to_vec());
    let mut d_bias = Tensor::zeros(vec![c_out]);

    let in_data = input.data();
    let w_data = weights.data();
    let g_data = d_out.data();
    let di = d_input.data_mut();
    let dw = d_weights.data_mut();
    let db = d_bias.data_mut();

    for o in 0..c_out {
        let g_map = &g_data[o * h_out * w_out..][..h_out * w_out];
        db[o] += g_map.iter().sum::<f64>();
        for c in 0..c_in {
            let in_map = &in_data[c * h * w..][..h * w];
            let di_map = &mut di[c * h * w..][..h * w];
            let kernel = &w_data[(o * c_in + c) * k * k..][..k * k];
            let d_kernel = &mut dw[(o * c_in + c) * k * k..][..k * k];
            if stride == 1 {
                for ky in 0..k {
                    let off_y = ky as isize - pad as isize;
                    let (y_lo, y_hi) = axis_range(h_out, h, off_y);
                    for kx in 0..k {
                        let off_x = kx as isize - pad as isize;
                        let (x_lo, x_hi) = axis_range(w_out, w, off_x);
                        if x_hi <= x_lo {
                            continue;
                        }
                        let wv = kernel[ky * k + kx];
                        let mut wsum = 0.0;
                        for y in y_lo..y_hi {
                            let iy = (y as isize + off_y) as usize;
                            let ix0 = (x_lo as isize + off_x) as usize;
                            let g_row = &g_map[y * w_out + x_lo..][..x_hi - x_lo];
                            let in_row = &in_map[iy * w + ix0..][..x_hi - x_lo];
                            let di_row = &mut di_map[iy * w + ix0..][..x_hi - x_lo];
                            for ((g, s), d) in g_row.iter().zip(in_row).zip(di_row) {
                                wsum += g * s;
                                *d += wv * g;
                            }
                        }
                        d_kernel[ky * k + kx] += wsum;
                    }
                }
            } else {
                for y in 0..h_out {
                    for x in 0..w_out {
                        let g = g_map[y * w_out + x];
                        for ky in 0..k {
                            let iy = y as isize * stride as isize + ky as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix =
                                    x as isize * stride as isize + kx as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let flat = iy as usize * w + ix as usize;
                                d_kernel[ky * k + kx] += g * in_map[flat];
                                di_map[flat] += g * kernel[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        d_input,
        d_weights,
        d_bias,
    })
}

/// Winning input positions from a pooling forward pass, for the backward
/// route.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub input_shape: [usize; 3],
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties break to the first position in
/// row-major window order.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolRecord)> {
    let (c, h, w) = dims3(input, "pool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![c, ho, wo]);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    let in_data = input.data();
    let out_data = out.data_mut();
    for ch in 0..c {
        let in_map = &in_data[ch * h * w..][..h * w];
        for y in 0..ho {
            for x in 0..wo {
                let base = (2 * y) * w + 2 * x;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if in_map[idx] > in_map[best] {
                        best = idx;
                    }
                }
                out_data[ch * ho * wo + y * wo + x] = in_map[best];
                argmax.push(ch * h * w + best);
            }
        }
    }
    Ok((
        out,
        PoolRecord {
            input_shape: [c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(record: &PoolRecord, d_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = record.input_shape;
    if d_out.len() != record.argmax.len() {
        return Err(Error::shape(format!(
            "pool gradient has {} values, record expects {}",
            d_out.len(),
            record.argmax.len()
        )));
    }
    let mut d_input = Tensor::zeros(vec![c, h, w]);
    let di = d_input.data_mut();
    for (&src, &g) in record.argmax.iter().zip(d_out.data()) {
        di[src] += g;
    }
    Ok(d_input)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// ReLU gradient uses the pre-activation input; the derivative at 0 is
/// taken as 0.
pub fn relu_backward(input: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if input.shape() != d_out.shape() {
        return Err(Error::shape(format!(
            "relu gradient shape {:?} does not match input {:?}",
            d_out.shape(),
            input.shape()
        )));
    }
    let mut d_input = d_out.clone();
    for (d, x) in d_input.data_mut().iter_mut().zip(input.data()) {
        if *x <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(d_input)
}

/// Multipliers applied by a dropout forward pass; empty means identity
/// (eval mode).
#[derive(Debug, Clone, Default)]
pub struct DropoutRecord {
    pub mask: Vec<f64>,
}

/// Inverted dropout: each element is zeroed with probability `rate`,
/// survivors scale by 1/(1-rate) so the expectation is preserved and eval
/// mode needs no rescaling. Always draws exactly one variate per element
/// in train mode.
pub fn dropout(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut SplitMix64,
) -> Result<(Tensor, DropoutRecord)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!(
            "dropout rate {rate} must lie in [0, 1)"
        )));
    }
    if mode == Mode::Eval {
        return Ok((input.clone(), DropoutRecord::default()));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut mask = Vec::with_capacity(input.len());
    for v in out.data_mut() {
        let m = if rng.next_f64() < rate { 0.0 } else { scale };
        *v *= m;
        mask.push(m);
    }
    Ok((out, DropoutRecord { mask }))
}

pub fn dropout_backward(record: &DropoutRecord, d_out: &Tensor) -> Result<Tensor> {
    if record.mask.is_empty() {
        return Ok(d_out.clone());
    }
    if record.mask.len() != d_out.len() {
        return Err(Error::shape(format!(
            "dropout gradient has {} values, mask has {}",
            d_out.len(),
            record.mask.len()
        )));
    }
    let mut d_input = d_out.clone();
    for (d, m) in d_input.data_mut().iter_mut().zip(&record.mask) {
        *d *= m;
    }
    Ok(d_input)
}

/// out = weights . input + bias, with `input` 1-D of length n and
/// `weights` m x n.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = match input.shape() {
        [n] => *n,
        other => {
            return Err(Error::shape(format!(
                "fully connected input must be 1-D, got {other:?}"
            )))
        }
    };
    let (m, wn) = match weights.shape() {
        [m, n2] => (*m, *n2),
        other => {
            return Err(Error::shape(format!(
                "fully connected weights must be 2-D, got {other:?}"
            )))
        }
    };
    if wn != n || bias.shape() != [m] {
        return Err(Error::shape(format!(
            "fully connected shapes disagree: input {n}, weights {m}x{wn}, bias {:?}",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![m]);
    let x = input.data();
    let wd = weights.data();
    let od = out.data_mut();
    for i in 0..m {
        let row = &wd[i * n..][..n];
        let mut acc = bias.data()[i];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        od[i] = acc;
    }
    Ok(out)
}

pub struct FcGrads {
    pub d_input: Tensor,
    pub d_weights: Tensor,
    pub d_bias: Tensor,
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
) -> Result<FcGrads> {
    let n = input.len();
    let (m, wn) = match weights.shape() {
        [m, n2] => (*m, *n2),
        other => {
            return Err(Error::shape(format!(
                "fully connected weights must be 2-D, got {other:?}"
            )))
        }
    };
    if wn != n || d_out.shape() != [m] {
        return Err(Error::shape(format!(
            "fully connected backward shapes disagree: input {n}, weights {m}x{wn}, gradient {:?}",
            d_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(vec![n]);
    let mut d_weights = Tensor::zeros(vec![m, n]);
    let mut d_bias = Tensor::zeros(vec![m]);
    let x = input.data();
    let wd = weights.data();
    let g = d_out.data();
    let di = d_input.data_mut();
    let dwd = d_weights.data_mut();
    for i in 0..m {
        let gi = g[i];
        d_bias.data_mut()[i] = gi;
        let row = &wd[i * n..][..n];
        let d_row = &mut dwd[i * n..][..n];
        for j in 0..n {
            d_row[j] = gi * x[j];
            di[j] += gi * row[j];
        }
    }
    Ok(FcGrads {
        d_input,
        d_weights,
        d_bias,
    })
}

/// Numerically stable softmax over a 1-D logits tensor (n >= 2).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let n = match logits.shape() {
        [n] if *n >= 2 => *n,
        other => {
            return Err(Error::shape(format!(
                "softmax needs a 1-D tensor of length >= 2, got {other:?}"
            )))
        }
    };
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Tensor::zeros(vec![n]);
    let mut sum = 0.0;
    for (o, &v) in out.data_mut().iter_mut().zip(logits.data()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.data_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Probability floor applied before the log in cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn cross_entropy(probs: &Tensor, true_class: usize) -> Result<f64> {
    let n = probs.len();
    if probs.shape().len() != 1 || n < 2 {
        return Err(Error::shape(format!(
            "cross-entropy needs a 1-D distribution of length >= 2, got {:?}",
            probs.shape()
        )));
    }
    if true_class >= n {
        return Err(Error::domain(format!(
            "true class {true_class} out of range for {n} classes"
        )));
    }
    Ok(-probs.data()[true_class].max(PROB_FLOOR).ln())
}

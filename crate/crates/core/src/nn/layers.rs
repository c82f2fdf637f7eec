//! Stateless kernels used by the network. Feature maps are laid out
//! channel-major, `[C][B][H][W]`, so a convolution is one matrix product
//! between the filter bank and the unfolded input.

use rand::Rng;

use crate::real::Real;

/// Unfolds a `[C][B][H][W]` tensor into `[(C*k*k)][(B*H*W)]` patches with
/// zero padding `k / 2`.
pub fn im2col<S: Real>(input: &[S], channels: usize, batch: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cols_per_row = batch * plane;
    let mut cols = vec![S::zero(); channels * k * k * cols_per_row];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_per_row..(row + 1) * cols_per_row];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for b in 0..batch {
                    let src_plane = &input[(c * batch + b) * plane..(c * batch + b + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut dst_row[b * plane + y * w..b * plane + (y + 1) * w];
                        let sx_lo = (x_lo as isize + dx) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[sx_lo..sx_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into a
/// `[C][B][H][W]` tensor.
pub fn col2im<S: Real>(cols: &[S], channels: usize, batch: usize, h: usize, w: usize, k: usize) -> Vec<S> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cols_per_row = batch * plane;
    let mut out = vec![S::zero(); channels * batch * plane];
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * cols_per_row..(row + 1) * cols_per_row];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for b in 0..batch {
                    let dst_plane = &mut out[(c * batch + b) * plane..(c * batch + b + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let src = &src_row[b * plane + y * w..b * plane + (y + 1) * w];
                        let sx_lo = (x_lo as isize + dx) as usize;
                        let dst = &mut dst_plane[sy as usize * w + sx_lo..sy as usize * w + sx_lo + (x_hi - x_lo)];
                        for (d, &s) in dst.iter_mut().zip(&src[x_lo..x_hi]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adds `bias[c]` to every element of channel `c` in a channel-major buffer.
pub fn add_channel_bias<S: Real>(x: &mut [S], bias: &[S]) {
    let per_channel = x.len() / bias.len();
    for (chunk, &b) in x.chunks_exact_mut(per_channel).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Per-channel sums of a channel-major buffer (the bias gradient).
pub fn channel_sums<S: Real>(x: &[S], channels: usize) -> Vec<S> {
    let per_channel = x.len() / channels;
    x.chunks_exact(per_channel)
        .map(|chunk| chunk.iter().fold(S::zero(), |a, &v| a + v))
        .collect()
}

pub fn relu_inplace<S: Real>(x: &mut [S]) {
    for v in x {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Zeroes gradient entries whose forward activation was not positive.
pub fn relu_backward_inplace<S: Real>(grad: &mut [S], activation: &[S]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= S::zero() {
            *g = S::zero();
        }
    }
}

/// Non-overlapping `p×p` max pooling over `planes` independent `h×w` planes.
/// Returns pooled values and, for each output, the flat input index that won
/// (first maximum in row-major window order).
pub fn maxpool<S: Real>(input: &[S], planes: usize, h: usize, w: usize, p: usize) -> (Vec<S>, Vec<u32>) {
    let (oh, ow) = (h / p, w / p);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * p * w + ox * p;
                let mut best = input[best_idx];
                for dy in 0..p {
                    for dx in 0..p {
                        let idx = base + (oy * p + dy) * w + ox * p + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    (out, argmax)
}

/// Routes each pooled gradient to its window's argmax position.
pub fn maxpool_backward<S: Real>(grad_out: &[S], argmax: &[u32], input_len: usize) -> Vec<S> {
    let mut grad_in = vec![S::zero(); input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        let slot = &mut grad_in[idx as usize];
        *slot = *slot + g;
    }
    grad_in
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<S: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<S> {
    let keep = S::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Real>(logits: &[S], cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(cols) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut sum = S::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    out
}

/// Maps a gradient with respect to softmax outputs to one with respect to the
/// logits: `dl_i = p_i * (dp_i - sum_j p_j dp_j)`.
pub fn softmax_backward<S: Real>(probs: &[S], grad_probs: &[S], cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, dp) in probs.chunks_exact(cols).zip(grad_probs.chunks_exact(cols)) {
        let dot = p.iter().zip(dp).fold(S::zero(), |a, (&pi, &di)| a + pi * di);
        out.extend(p.iter().zip(dp).map(|(&pi, &di)| pi * (di - dot)));
    }
    out
}

//! Tensor primitives and their vector-Jacobian products.
//!
//! These functions are pure; [`crate::tape::Tape`] records them together with
//! the activations their VJPs need.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Action code marking cells that carry no supervision (obstacles, the goal).
pub const NO_ACTION: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Rank-2 inputs are treated as a single channel.
fn spatial_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    match *input.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(shape_err("conv2d", format!("input must be C×H×W or H×W, got {s:?}"))),
    }
}

pub(crate) fn conv_dims(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<ConvDims> {
    let (c_in, h, w) = spatial_dims(input)?;
    let [c_out, wc, kh, kw] = *weight.shape() else {
        return Err(shape_err(
            "conv2d",
            format!("weight must be C_out×C_in×F×F, got {:?}", weight.shape()),
        ));
    };
    if wc != c_in {
        return Err(shape_err(
            "conv2d",
            format!("C_in: input has {c_in} channels, weight expects {wc}"),
        ));
    }
    if kh != kw {
        return Err(shape_err("conv2d", format!("F: kernel is {kh}×{kw}, must be square")));
    }
    if kh % 2 == 0 {
        return Err(shape_err("conv2d", format!("F: kernel size {kh} must be odd")));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err(
                "conv2d",
                format!("C_out: bias shape {:?}, expected [{c_out}]", b.shape()),
            ));
        }
    }
    Ok(ConvDims {
        c_in,
        c_out,
        h,
        w,
        k: kh,
    })
}

/// Valid output range along one axis for kernel offset `d` with padding `pad`.
#[inline]
fn valid_range(d: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (len + pad).saturating_sub(d).min(len);
    (lo, hi)
}

/// Stride-1 "same" convolution (cross-correlation) with zero padding.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = conv_dims(input, weight, bias)?;
    let ConvDims { c_in, c_out, h, w, k } = dims;
    let pad = k / 2;
    let plane = h * w;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            out_o.fill(b.data()[o]);
        }
        for c in 0..c_in {
            let x_c = &x[c * plane..(c + 1) * plane];
            for di in 0..k {
                let (i_lo, i_hi) = valid_range(di, pad, h);
                for dj in 0..k {
                    let wv = wt[((o * c_in + c) * k + di) * k + dj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (j_lo, j_hi) = valid_range(dj, pad, w);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let si = i + di - pad;
                        let dst = &mut out_o[i * w + j_lo..i * w + j_hi];
                        let src = &x_c[si * w + j_lo + dj - pad..si * w + j_hi + dj - pad];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_out, h, w], out)
}

/// Cotangents of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_vjp(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dims = conv_dims(input, weight, None)?;
    let ConvDims { c_in, c_out, h, w, k } = dims;
    if grad_out.shape() != [c_out, h, w] {
        return Err(shape_err(
            "conv2d_vjp",
            format!("cotangent shape {:?}, expected [{c_out}, {h}, {w}]", grad_out.shape()),
        ));
    }
    let pad = k / 2;
    let plane = h * w;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut dx = vec![0.0; c_in * plane];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; c_out];
    for o in 0..c_out {
        let g_o = &g[o * plane..(o + 1) * plane];
        db[o] = g_o.iter().sum();
        for c in 0..c_in {
            let x_c = &x[c * plane..(c + 1) * plane];
            let dx_c = &mut dx[c * plane..(c + 1) * plane];
            for di in 0..k {
                let (i_lo, i_hi) = valid_range(di, pad, h);
                for dj in 0..k {
                    let widx = ((o * c_in + c) * k + di) * k + dj;
                    let wv = wt[widx];
                    let (j_lo, j_hi) = valid_range(dj, pad, w);
                    let mut acc = 0.0;
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let si = i + di - pad;
                        let g_row = &g_o[i * w + j_lo..i * w + j_hi];
                        let off = si * w + j_lo + dj - pad;
                        let x_row = &x_c[off..off + g_row.len()];
                        acc += g_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                        if wv != 0.0 {
                            let dx_row = &mut dx_c[off..off + g_row.len()];
                            for (d, gv) in dx_row.iter_mut().zip(g_row) {
                                *d += wv * gv;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[c_out], db)?,
    ))
}

/// Maximum over the leading (channel) axis. Ties go to the lowest channel.
pub fn channel_max(q: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [a, h, w] = *q.shape() else {
        return Err(shape_err("channel_max", format!("expected A×H×W, got {:?}", q.shape())));
    };
    let plane = h * w;
    let data = q.data();
    let mut v = data[..plane].to_vec();
    let mut arg = vec![0usize; plane];
    for ch in 1..a {
        let q_ch = &data[ch * plane..(ch + 1) * plane];
        for ((best, idx), &x) in v.iter_mut().zip(arg.iter_mut()).zip(q_ch) {
            if x > *best {
                *best = x;
                *idx = ch;
            }
        }
    }
    Ok((Tensor::from_vec(&[h, w], v)?, arg))
}

/// Routes each cell's cotangent to its winning channel.
pub fn channel_max_vjp(q_shape: &[usize], argmax: &[usize], grad_v: &Tensor) -> Result<Tensor> {
    let plane = argmax.len();
    if grad_v.numel() != plane {
        return Err(shape_err(
            "channel_max_vjp",
            format!("cotangent has {} elements, expected {plane}", grad_v.numel()),
        ));
    }
    let mut gq = Tensor::zeros(q_shape);
    let out = gq.data_mut();
    for (cell, (&ch, &g)) in argmax.iter().zip(grad_v.data()).enumerate() {
        out[ch * plane + cell] = g;
    }
    Ok(gq)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean masked cross-entropy of `A×H×W` logits against per-cell action codes.
///
/// Cells coded [`NO_ACTION`] are excluded. Returns `(loss, softmax, count)`.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[u8]) -> Result<(f64, Tensor, usize)> {
    let [a, h, w] = *logits.shape() else {
        return Err(shape_err(
            "cross_entropy",
            format!("expected A×H×W logits, got {:?}", logits.shape()),
        ));
    };
    let plane = h * w;
    if targets.len() != plane {
        return Err(shape_err(
            "cross_entropy",
            format!("{} targets for a {h}×{w} map", targets.len()),
        ));
    }
    let z = logits.data();
    let mut probs = vec![0.0; a * plane];
    let mut total = 0.0;
    let mut count = 0;
    for cell in 0..plane {
        let max = (0..a).map(|ch| z[ch * plane + cell]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..a).map(|ch| (z[ch * plane + cell] - max).exp()).sum();
        for ch in 0..a {
            probs[ch * plane + cell] = (z[ch * plane + cell] - max).exp() / denom;
        }
        let t = targets[cell];
        if t == NO_ACTION {
            continue;
        }
        let t = t as usize;
        if t >= a {
            return Err(shape_err(
                "cross_entropy",
                format!("action code {t} out of range for {a} channels"),
            ));
        }
        total += max + denom.ln() - z[t * plane + cell];
        count += 1;
    }
    if count == 0 {
        return Err(crate::Error::NoSupervision);
    }
    Ok((total / count as f64, Tensor::from_vec(logits.shape(), probs)?, count))
}

pub fn masked_cross_entropy_vjp(probs: &Tensor, targets: &[u8], count: usize, seed: f64) -> Tensor {
    let plane = targets.len();
    let scale = seed / count as f64;
    let mut g = probs.clone();
    let a = probs.numel() / plane;
    let gd = g.data_mut();
    for (cell, &t) in targets.iter().enumerate() {
        if t == NO_ACTION {
            for ch in 0..a {
                gd[ch * plane + cell] = 0.0;
            }
            continue;
        }
        for ch in 0..a {
            let onehot = if ch == t as usize { 1.0 } else { 0.0 };
            gd[ch * plane + cell] = (gd[ch * plane + cell] - onehot) * scale;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops over an explicitly padded input.
    fn reference_conv(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
        let (c_in, h, w) = spatial_dims(input).unwrap();
        let c_out = weight.shape()[0];
        let k = weight.shape()[2];
        let p = k / 2;
        let (ph, pw) = (h + 2 * p, w + 2 * p);
        let mut padded = vec![0.0; c_in * ph * pw];
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..w {
                    padded[(c * ph + i + p) * pw + j + p] = input.data()[(c * h + i) * w + j];
                }
            }
        }
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias.data()[o];
                    for c in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                acc += weight.get(&[o, c, di, dj]) * padded[(c * ph + i + di) * pw + j + dj];
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_counts_in_bounds_neighbours() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[1]))).unwrap();
        assert_eq!(y.get(&[0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 1]), 6.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 4, 5], 1.0, &mut rng);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &k, Some(&b)).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    assert_eq!(y.get(&[o, i, j]), b.data()[o]);
                }
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[2, 5, 5], 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[3], 1.0, &mut rng);
        let y = conv2d(&x, &k, Some(&b)).unwrap();
        let want = reference_conv(&x, &k, &b);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // 5x5 kernels on a non-square map
        let x = Tensor::uniform(&[3, 4, 7], 1.0, &mut rng);
        let k = Tensor::uniform(&[2, 3, 5, 5], 1.0, &mut rng);
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &k, Some(&b)).unwrap();
        for (a, b) in y.data().iter().zip(&reference_conv(&x, &k, &b)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let err = conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None).unwrap_err();
        assert!(err.to_string().contains("C_in"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None).unwrap_err();
        assert!(err.to_string().contains("F:"), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&Tensor::zeros(&[2]))).unwrap_err();
        assert!(err.to_string().contains("C_out"), "{err}");
    }

    #[test]
    fn channel_max_small_cases() {
        let q = Tensor::from_vec(&[2, 1, 1], vec![1.0, 5.0]).unwrap();
        let (v, arg) = channel_max(&q).unwrap();
        assert_eq!(v.data(), &[5.0]);
        assert_eq!(arg, vec![1]);

        let q = Tensor::from_vec(&[1, 1, 2], vec![3.0, -1.0]).unwrap();
        let (v, arg) = channel_max(&q).unwrap();
        assert_eq!(v.data(), &[3.0, -1.0]);
        let g = Tensor::from_vec(&[1, 2], vec![0.3, 0.7]).unwrap();
        let gq = channel_max_vjp(q.shape(), &arg, &g).unwrap();
        assert_eq!(gq.data(), g.data());
    }

    #[test]
    fn channel_max_ties_pick_lowest_index() {
        let q = Tensor::from_vec(&[3, 1, 1], vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(channel_max(&q).unwrap().1, vec![0]);
    }

    #[test]
    fn channel_max_matches_per_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::uniform(&[4, 6, 6], 1.0, &mut rng);
        let g = Tensor::uniform(&[6, 6], 1.0, &mut rng);
        let (v, arg) = channel_max(&q).unwrap();
        let gq = channel_max_vjp(q.shape(), &arg, &g).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut best = 0;
                for a in 1..4 {
                    if q.get(&[a, i, j]) > q.get(&[best, i, j]) {
                        best = a;
                    }
                }
                assert_eq!(v.get(&[i, j]), q.get(&[best, i, j]));
                for a in 0..4 {
                    let want = if a == best { g.get(&[i, j]) } else { 0.0 };
                    assert_eq!(gq.get(&[a, i, j]), want);
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_a() {
        let logits = Tensor::zeros(&[4, 2, 2]);
        let (loss, _, n) = masked_cross_entropy(&logits, &[0, 1, NO_ACTION, 3]).unwrap();
        assert_eq!(n, 3);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut logits = Tensor::zeros(&[4, 1, 1]);
        logits.data_mut()[2] = 30.0;
        let (loss, _, _) = masked_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn all_masked_is_an_error() {
        let logits = Tensor::zeros(&[4, 1, 2]);
        assert!(matches!(
            masked_cross_entropy(&logits, &[NO_ACTION, NO_ACTION]),
            Err(crate::Error::NoSupervision)
        ));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
    }
}

//! Low-level layer kernels shared by the forward and backward passes.
//!
//! Hot loops are written as contiguous slice updates so the compiler can
//! vectorize them; the stride-1 convolution path is the one that matters
//! for throughput (every perturbation-based method funnels through it).

/// Output spatial size for a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Output spatial size for max pooling (no padding).
pub fn pool_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// y[oc,oy,ox] = bias[oc] + sum over (ic,ky,kx) of w[oc,ic,ky,kx] * x[ic, oy*s+ky-p, ox*s+kx-p]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out: &mut [f32],
) {
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    debug_assert_eq!(out.len(), out_c * oh * ow);
    for oc in 0..out_c {
        let wbase = oc * in_c * kernel * kernel;
        for oy in 0..oh {
            let orow = &mut out[oc * oh * ow + oy * ow..][..ow];
            orow.fill(bias[oc]);
            for ic in 0..in_c {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[ic * h * w + iy as usize * w..][..w];
                    let wrow = &weight[wbase + ic * kernel * kernel + ky * kernel..][..kernel];
                    if stride == 1 {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ox0 = padding.saturating_sub(kx);
                            let ox1 = (w + padding - kx).min(ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let xoff = ox0 + kx - padding;
                            let src = &xrow[xoff..xoff + (ox1 - ox0)];
                            for (d, s) in orow[ox0..ox1].iter_mut().zip(src) {
                                *d += wv * *s;
                            }
                        }
                    } else {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    orow[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gin[ic,iy,ix] = sum over (oc,ky,kx) of w[oc,ic,ky,kx] * gout[oc,oy,ox]
/// with iy = oy*s+ky-p, ix = ox*s+kx-p. `gin` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    gout: &[f32],
    weight: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    gin: &mut [f32],
) {
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    debug_assert_eq!(gin.len(), in_c * h * w);
    for oc in 0..out_c {
        let wbase = oc * in_c * kernel * kernel;
        for oy in 0..oh {
            let grow = &gout[oc * oh * ow + oy * ow..][..ow];
            for ic in 0..in_c {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let girow = &mut gin[ic * h * w + iy as usize * w..][..w];
                    let wrow = &weight[wbase + ic * kernel * kernel + ky * kernel..][..kernel];
                    if stride == 1 {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ox0 = padding.saturating_sub(kx);
                            let ox1 = (w + padding - kx).min(ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let ioff = ox0 + kx - padding;
                            let src = &grow[ox0..ox1];
                            for (d, s) in girow[ioff..ioff + (ox1 - ox0)].iter_mut().zip(src) {
                                *d += wv * *s;
                            }
                        }
                    } else {
                        for (kx, &wv) in wrow.iter().enumerate() {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    girow[ix as usize] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients. Buffers must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_param_grad(
    x: &[f32],
    gout: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    wgrad: &mut [f32],
    bgrad: &mut [f32],
) {
    let oh = conv_out_dim(h, kernel, stride, padding);
    let ow = conv_out_dim(w, kernel, stride, padding);
    for oc in 0..out_c {
        let wbase = oc * in_c * kernel * kernel;
        let mut bsum = 0.0f32;
        for oy in 0..oh {
            let grow = &gout[oc * oh * ow + oy * ow..][..ow];
            bsum += grow.iter().sum::<f32>();
            for ic in 0..in_c {
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[ic * h * w + iy as usize * w..][..w];
                    let gwrow = &mut wgrad[wbase + ic * kernel * kernel + ky * kernel..][..kernel];
                    if stride == 1 {
                        for (kx, gw) in gwrow.iter_mut().enumerate() {
                            let ox0 = padding.saturating_sub(kx);
                            let ox1 = (w + padding - kx).min(ow);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let xoff = ox0 + kx - padding;
                            let mut acc = 0.0f32;
                            for (g, s) in grow[ox0..ox1].iter().zip(&xrow[xoff..xoff + (ox1 - ox0)])
                            {
                                acc += *g * *s;
                            }
                            *gw += acc;
                        }
                    } else {
                        for (kx, gw) in gwrow.iter_mut().enumerate() {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *gw += grow[ox] * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        bgrad[oc] += bsum;
    }
}

/// y[o] = bias[o] + dot(w[o,..], x)
pub fn dense_forward(x: &[f32], weight: &[f32], bias: &[f32], out_dim: usize, out: &mut [f32]) {
    let in_dim = x.len();
    for o in 0..out_dim {
        let wrow = &weight[o * in_dim..][..in_dim];
        let mut acc = 0.0f32;
        for (wv, xv) in wrow.iter().zip(x) {
            acc += wv * xv;
        }
        out[o] = acc + bias[o];
    }
}

/// gin = W^T gout. `gin` must be zeroed by the caller.
pub fn dense_input_grad(gout: &[f32], weight: &[f32], in_dim: usize, gin: &mut [f32]) {
    for (o, &g) in gout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let wrow = &weight[o * in_dim..][..in_dim];
        for (d, wv) in gin.iter_mut().zip(wrow) {
            *d += g * *wv;
        }
    }
}

/// wgrad[o,i] += gout[o] * x[i]; bgrad[o] += gout[o]
pub fn dense_param_grad(x: &[f32], gout: &[f32], wgrad: &mut [f32], bgrad: &mut [f32]) {
    let in_dim = x.len();
    for (o, &g) in gout.iter().enumerate() {
        bgrad[o] += g;
        if g == 0.0 {
            continue;
        }
        let grow = &mut wgrad[o * in_dim..][..in_dim];
        for (d, xv) in grow.iter_mut().zip(x) {
            *d += g * *xv;
        }
    }
}

/// Max pooling; `winners` receives, for every output element, the flat index
/// of the winning input element (ties resolved to the first in scan order).
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    out: &mut [f32],
    winners: &mut [u32],
) {
    let oh = pool_out_dim(h, kernel, stride);
    let ow = pool_out_dim(w, kernel, stride);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                for ky in 0..kernel {
                    let iy = oy * stride + ky;
                    let row = ch * h * w + iy * w;
                    for kx in 0..kernel {
                        let ix = ox * stride + kx;
                        let v = x[row + ix];
                        if v > best {
                            best = v;
                            best_idx = (row + ix) as u32;
                        }
                    }
                }
                let oi = ch * oh * ow + oy * ow + ox;
                out[oi] = best;
                winners[oi] = best_idx;
            }
        }
    }
}

/// Routes each output gradient to its recorded winner. `gin` zeroed by caller.
pub fn maxpool_backward(gout: &[f32], winners: &[u32], gin: &mut [f32]) {
    for (g, &wi) in gout.iter().zip(winners) {
        gin[wi as usize] += *g;
    }
}

pub fn relu_forward(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// Standard ReLU backward: pass gradient where the forward input was positive.
pub fn relu_backward(gout: &[f32], x: &[f32], gin: &mut [f32]) {
    for ((d, &g), &v) in gin.iter_mut().zip(gout).zip(x) {
        *d = if v > 0.0 { g } else { 0.0 };
    }
}

/// Guided ReLU backward: additionally requires the incoming gradient to be
/// positive.
pub fn relu_backward_guided(gout: &[f32], x: &[f32], gin: &mut [f32]) {
    for ((d, &g), &v) in gin.iter_mut().zip(gout).zip(x) {
        *d = if v > 0.0 && g > 0.0 { g } else { 0.0 };
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct nested-loop convolution used as an independent oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_naive(
        x: &[f32],
        in_c: usize,
        h: usize,
        w: usize,
        weight: &[f32],
        bias: &[f32],
        out_c: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f32> {
        let oh = conv_out_dim(h, k, s, p);
        let ow = conv_out_dim(w, k, s, p);
        let mut out = vec![0.0f32; out_c * oh * ow];
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += weight[((oc * in_c + ic) * k + ky) * k + kx]
                                        * x[(ic * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn lcg(state: &mut u64) -> f32 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut st = 42u64;
        for &(in_c, h, w, out_c, k, s, p) in &[
            (1usize, 8usize, 8usize, 2usize, 3usize, 1usize, 1usize),
            (2, 7, 9, 3, 3, 1, 0),
            (3, 10, 10, 2, 5, 1, 2),
            (2, 9, 9, 2, 3, 2, 1),
        ] {
            let x: Vec<f32> = (0..in_c * h * w).map(|_| lcg(&mut st)).collect();
            let weight: Vec<f32> = (0..out_c * in_c * k * k).map(|_| lcg(&mut st)).collect();
            let bias: Vec<f32> = (0..out_c).map(|_| lcg(&mut st)).collect();
            let oh = conv_out_dim(h, k, s, p);
            let ow = conv_out_dim(w, k, s, p);
            let mut fast = vec![0.0f32; out_c * oh * ow];
            conv2d_forward(&x, in_c, h, w, &weight, &bias, out_c, k, s, p, &mut fast);
            let naive = conv_naive(&x, in_c, h, w, &weight, &bias, out_c, k, s, p);
            for (a, b) in fast.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-5, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_records_winners() {
        let x = vec![
            1.0, 2.0, //
            3.0, 4.0, //
        ];
        let mut out = vec![0.0f32; 1];
        let mut winners = vec![0u32; 1];
        maxpool_forward(&x, 1, 2, 2, 2, 2, &mut out, &mut winners);
        assert_eq!(out[0], 4.0);
        assert_eq!(winners[0], 3);

        let mut gin = vec![0.0f32; 4];
        maxpool_backward(&[2.5], &winners, &mut gin);
        assert_eq!(gin, vec![0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let s = softmax(&[1.0, 2.0, 3.0]);
        assert!((s.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(s[2] > s[1] && s[1] > s[0]);
    }
}

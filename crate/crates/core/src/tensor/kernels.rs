//! Shared compute kernels for forward inference and tape backward passes.
//!
//! Inputs and outputs are f32 slices with explicit shapes; every dot product
//! and reduction runs an f64 accumulator. Parallel loops only split over
//! disjoint output regions, so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Spatial padding mode for convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

const LOG_EPS: f64 = 1e-12;

/// Output extent plus leading pad for one spatial axis.
pub(crate) fn conv_output_dim(input: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::param("stride", "must be positive"));
    }
    match padding {
        Padding::Valid => {
            if k > input {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel extent {k} exceeds input extent {input} (valid padding)"),
                ));
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, pad_total / 2))
        }
    }
}

fn check_rank4(op: &'static str, name: &str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("{name} must be rank 4, got {shape:?}")));
    }
    Ok(())
}

/// NHWC x [kh,kw,C,F] convolution. Returns (data, [N,OH,OW,F]).
pub(crate) fn conv2d_forward(
    input: &[f32],
    in_shape: &[usize],
    kernel: &[f32],
    k_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<(Vec<f32>, Vec<usize>)> {
    check_rank4("conv2d", "input", in_shape)?;
    check_rank4("conv2d", "kernel", k_shape)?;
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (kh, kw, kc, f) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel input channels {kc} vs input channels {c}"),
        ));
    }
    let (oh, pad_top) = conv_output_dim(h, kh, stride, padding)?;
    let (ow, pad_left) = conv_output_dim(w, kw, stride, padding)?;

    let mut out = vec![0.0f32; n * oh * ow * f];
    out.par_chunks_mut(oh * ow * f).enumerate().for_each(|(bi, out_n)| {
        let in_n = &input[bi * h * w * c..(bi + 1) * h * w * c];
        let mut acc = vec![0.0f64; f];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad_top as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad_left as isize;
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ky in 0..kh {
                    let y = iy0 + ky as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let x = ix0 + kx as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let in_base = (y as usize * w + x as usize) * c;
                        let k_base = (ky * kw + kx) * c * f;
                        for ci in 0..c {
                            let xv = in_n[in_base + ci] as f64;
                            let ks = &kernel[k_base + ci * f..k_base + ci * f + f];
                            for (a, &kv) in acc.iter_mut().zip(ks) {
                                *a += xv * kv as f64;
                            }
                        }
                    }
                }
                let out_base = (oy * ow + ox) * f;
                for (o, &a) in out_n[out_base..out_base + f].iter_mut().zip(acc.iter()) {
                    *o = a as f32;
                }
            }
        }
    });
    Ok((out, vec![n, oh, ow, f]))
}

/// Gradient of conv2d w.r.t. its input.
pub(crate) fn conv2d_backward_input(
    dout: &[f64],
    out_shape: &[usize],
    kernel: &[f32],
    k_shape: &[usize],
    in_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Vec<f64> {
    let (h, w, c) = (in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow, f) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = (k_shape[0], k_shape[1]);
    let (_, pad_top) = conv_output_dim(h, kh, stride, padding).expect("validated in forward");
    let (_, pad_left) = conv_output_dim(w, kw, stride, padding).expect("validated in forward");

    let n = in_shape[0];
    let mut dinput = vec![0.0f64; n * h * w * c];
    dinput.par_chunks_mut(h * w * c).enumerate().for_each(|(bi, din_n)| {
        let dout_n = &dout[bi * oh * ow * f..(bi + 1) * oh * ow * f];
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad_top as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad_left as isize;
                let dout_base = (oy * ow + ox) * f;
                let g = &dout_n[dout_base..dout_base + f];
                for ky in 0..kh {
                    let y = iy0 + ky as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let x = ix0 + kx as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let in_base = (y as usize * w + x as usize) * c;
                        let k_base = (ky * kw + kx) * c * f;
                        for ci in 0..c {
                            let ks = &kernel[k_base + ci * f..k_base + ci * f + f];
                            let mut acc = 0.0f64;
                            for (gv, &kv) in g.iter().zip(ks) {
                                acc += gv * kv as f64;
                            }
                            din_n[in_base + ci] += acc;
                        }
                    }
                }
            }
        }
    });
    dinput
}

/// Gradient of conv2d w.r.t. its kernel. Parallel over (ky,kx,ci) slices.
pub(crate) fn conv2d_backward_kernel(
    dout: &[f64],
    out_shape: &[usize],
    input: &[f32],
    in_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: Padding,
) -> Vec<f64> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow, f) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = (k_shape[0], k_shape[1]);
    let (_, pad_top) = conv_output_dim(h, kh, stride, padding).expect("validated in forward");
    let (_, pad_left) = conv_output_dim(w, kw, stride, padding).expect("validated in forward");

    let mut dkernel = vec![0.0f64; kh * kw * c * f];
    dkernel.par_chunks_mut(f).enumerate().for_each(|(slot, dk)| {
        let ci = slot % c;
        let kx = (slot / c) % kw;
        let ky = slot / (c * kw);
        for bi in 0..n {
            let in_n = &input[bi * h * w * c..(bi + 1) * h * w * c];
            let dout_n = &dout[bi * oh * ow * f..(bi + 1) * oh * ow * f];
            for oy in 0..oh {
                let y = (oy * stride) as isize - pad_top as isize + ky as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let x = (ox * stride) as isize - pad_left as isize + kx as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let xv = in_n[(y as usize * w + x as usize) * c + ci] as f64;
                    let g = &dout_n[(oy * ow + ox) * f..(oy * ow + ox) * f + f];
                    for (d, gv) in dk.iter_mut().zip(g) {
                        *d += xv * gv;
                    }
                }
            }
        }
    });
    dkernel
}

/// [N,D] x [D,K] matrix product.
pub(crate) fn matmul_forward(
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
) -> Result<(Vec<f32>, Vec<usize>)> {
    if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("incompatible shapes {a_shape:?} x {b_shape:?}"),
        ));
    }
    let (n, d, k) = (a_shape[0], a_shape[1], b_shape[1]);
    let mut out = vec![0.0f32; n * k];
    for row in 0..n {
        let mut acc = vec![0.0f64; k];
        for di in 0..d {
            let av = a[row * d + di] as f64;
            let bs = &b[di * k..di * k + k];
            for (ac, &bv) in acc.iter_mut().zip(bs) {
                *ac += av * bv as f64;
            }
        }
        for (o, &ac) in out[row * k..row * k + k].iter_mut().zip(acc.iter()) {
            *o = ac as f32;
        }
    }
    Ok((out, vec![n, k]))
}

pub(crate) fn matmul_backward(
    dout: &[f64],
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (n, d, k) = (a_shape[0], a_shape[1], b_shape[1]);
    let mut da = vec![0.0f64; n * d];
    let mut db = vec![0.0f64; d * k];
    for row in 0..n {
        let g = &dout[row * k..row * k + k];
        for di in 0..d {
            let bs = &b[di * k..di * k + k];
            let mut acc = 0.0f64;
            for (gv, &bv) in g.iter().zip(bs) {
                acc += gv * bv as f64;
            }
            da[row * d + di] = acc;
            let av = a[row * d + di] as f64;
            let dbs = &mut db[di * k..di * k + k];
            for (dbv, gv) in dbs.iter_mut().zip(g) {
                *dbv += av * gv;
            }
        }
    }
    (da, db)
}

/// Max pooling with valid padding; records the flat input index of each max.
pub(crate) fn max_pool_forward(
    input: &[f32],
    in_shape: &[usize],
    win: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Vec<f32>, Vec<usize>, Vec<u32>)> {
    check_rank4("max_pool2d", "input", in_shape)?;
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, pad_top) = conv_output_dim(h, win, stride, padding)?;
    let (ow, pad_left) = conv_output_dim(w, win, stride, padding)?;
    let mut out = vec![0.0f32; n * oh * ow * c];
    let mut arg = vec![0u32; n * oh * ow * c];
    for bi in 0..n {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad_top as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad_left as isize;
                for ci in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..win {
                        let y = iy0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..win {
                            let x = ix0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let idx = ((bi * h + y as usize) * w + x as usize) * c + ci;
                            // strictly-greater keeps the first max on ties
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((bi * oh + oy) * ow + ox) * c + ci;
                    out[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, vec![n, oh, ow, c], arg))
}

pub(crate) fn softmax_temp_forward(logits: &[f32], shape: &[usize], tau: f32) -> Result<Vec<f32>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::param("tau", format!("temperature must be positive, got {tau}")));
    }
    let k = *shape.last().ok_or_else(|| Error::shape("softmax", "rank 0 input".to_string()))?;
    let mut out = vec![0.0f32; logits.len()];
    for (row_in, row_out) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row_in.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; k];
        for (e, &z) in exps.iter_mut().zip(row_in) {
            *e = ((z as f64 - m) / tau as f64).exp();
            sum += *e;
        }
        for (o, e) in row_out.iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_temp_backward(dout: &[f64], probs: &[f32], k: usize, tau: f32) -> Vec<f64> {
    let mut din = vec![0.0f64; dout.len()];
    for ((g_row, p_row), d_row) in dout.chunks(k).zip(probs.chunks(k)).zip(din.chunks_mut(k)) {
        let dot: f64 = g_row.iter().zip(p_row).map(|(g, &p)| g * p as f64).sum();
        for ((d, g), &p) in d_row.iter_mut().zip(g_row).zip(p_row) {
            *d = p as f64 * (g - dot) / tau as f64;
        }
    }
    din
}

fn check_rows(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    if a != b || a.is_empty() {
        return Err(Error::shape(op, format!("shapes {a:?} vs {b:?}")));
    }
    let k = *a.last().unwrap();
    let rows = a.iter().product::<usize>() / k;
    Ok((rows, k))
}

pub(crate) fn cross_entropy_forward(
    logits: &[f32],
    labels: &[f32],
    l_shape: &[usize],
    y_shape: &[usize],
) -> Result<f32> {
    let (rows, k) = check_rows("cross_entropy", l_shape, y_shape)?;
    for (r, row) in labels.chunks(k).enumerate() {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < -1e-6) {
            return Err(Error::Input(format!(
                "labels row {r} is not a distribution (sum {s:.6})"
            )));
        }
    }
    let mut total = 0.0f64;
    for (z_row, y_row) in logits.chunks(k).zip(labels.chunks(k)) {
        let lse = log_sum_exp(z_row);
        for (&z, &y) in z_row.iter().zip(y_row) {
            if y != 0.0 {
                total += y as f64 * (lse - z as f64);
            }
        }
    }
    Ok((total / rows as f64) as f32)
}

pub(crate) fn cross_entropy_backward(
    g: f64,
    logits: &[f32],
    labels: &[f32],
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rows = logits.len() / k;
    let scale = g / rows as f64;
    let mut dlogits = vec![0.0f64; logits.len()];
    let mut dlabels = vec![0.0f64; labels.len()];
    for ((z_row, y_row), (dz_row, dy_row)) in logits
        .chunks(k)
        .zip(labels.chunks(k))
        .zip(dlogits.chunks_mut(k).zip(dlabels.chunks_mut(k)))
    {
        let lse = log_sum_exp(z_row);
        let label_sum: f64 = y_row.iter().map(|&v| v as f64).sum();
        for i in 0..k {
            let p = ((z_row[i] as f64) - lse).exp();
            dz_row[i] = scale * (label_sum * p - y_row[i] as f64);
            dy_row[i] = scale * (lse - z_row[i] as f64);
        }
    }
    (dlogits, dlabels)
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&z| (z as f64 - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn kl_div_forward(p: &[f32], q: &[f32], p_shape: &[usize], q_shape: &[usize]) -> Result<f32> {
    let (rows, k) = check_rows("kl_divergence", p_shape, q_shape)?;
    let mut total = 0.0f64;
    for (p_row, q_row) in p.chunks(k).zip(q.chunks(k)) {
        for (&pv, &qv) in p_row.iter().zip(q_row) {
            let pv = pv as f64;
            if pv > LOG_EPS {
                let qv = (qv as f64).max(LOG_EPS);
                total += pv * (pv.ln() - qv.ln());
            }
        }
    }
    Ok((total / rows as f64) as f32)
}

pub(crate) fn kl_div_backward(g: f64, p: &[f32], q: &[f32], k: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = p.len() / k;
    let scale = g / rows as f64;
    let mut dp = vec![0.0f64; p.len()];
    let mut dq = vec![0.0f64; q.len()];
    for i in 0..p.len() {
        let pv = p[i] as f64;
        if pv > LOG_EPS {
            let qv = (q[i] as f64).max(LOG_EPS);
            dp[i] = scale * (pv.ln() - qv.ln() + 1.0);
            // clamped coordinates take the zero subgradient
            if q[i] as f64 > LOG_EPS {
                dq[i] = -scale * pv / qv;
            }
        }
    }
    (dp, dq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_preserves_extent_at_stride_one() {
        let (out, pad) = conv_output_dim(7, 3, 1, Padding::Same).unwrap();
        assert_eq!(out, 7);
        assert_eq!(pad, 1);
    }

    #[test]
    fn valid_padding_formula() {
        let (out, pad) = conv_output_dim(10, 3, 2, Padding::Valid).unwrap();
        assert_eq!(out, 4); // floor((10-3)/2)+1
        assert_eq!(pad, 0);
    }

    #[test]
    fn matmul_small_known_product() {
        let a = [1.0, 2.0, 3.0, 4.0]; // [[1,2],[3,4]]
        let b = [5.0, 6.0, 7.0, 8.0]; // [[5,6],[7,8]]
        let (out, shape) = matmul_forward(&a, &[2, 2], &b, &[2, 2]).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        let input = [1.0, 1.0, 0.0, 1.0];
        let (out, shape, arg) = max_pool_forward(&input, &[1, 2, 2, 1], 2, 2, Padding::Valid).unwrap();
        assert_eq!(shape, vec![1, 1, 1, 1]);
        assert_eq!(out[0], 1.0);
        assert_eq!(arg[0], 0);
    }
}

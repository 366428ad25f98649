//! Raw forward/backward kernels over flat NCHW slices.
//!
//! The tape dispatches here; nothing in this module records anything.
//! All loops are sequential with a fixed iteration order, so repeated runs
//! produce bit-identical results. Inner loops are structured as contiguous
//! row updates so the compiler can vectorize them.

use crate::tensor::{Scalar, Shape};

/// Output spatial extent of a same-padded convolution: ceil(in / stride).
pub fn conv_out_extent(input: usize, stride: usize) -> usize {
    if input == 0 {
        0
    } else {
        (input - 1) / stride + 1
    }
}

/// Fill the patch matrix for one sample: row (ic,kh,kw), column (orow,ocol),
/// value x[ic][orow·s+kh-pad][ocol·s+kw-pad] with zeros outside the image.
fn im2col<T: Scalar>(
    x_sample: &[T],
    xs: Shape,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let pad = (k - 1) / 2;
    let m = oh * ow;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ic in 0..xs.c {
        let plane = &x_sample[ic * xs.plane()..(ic + 1) * xs.plane()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ic * k + kh) * k + kw) * m..((ic * k + kh) * k + kw + 1) * m];
                let shift_w = kw as isize - pad as isize;
                for orow in 0..oh {
                    let ih = (orow * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    let x_row = &plane[ih as usize * xs.w..(ih as usize + 1) * xs.w];
                    let dst = &mut row[orow * ow..(orow + 1) * ow];
                    if stride == 1 {
                        let lo = (-shift_w).max(0) as usize;
                        let hi = (xs.w as isize - shift_w).clamp(0, ow as isize) as usize;
                        if lo < hi {
                            let src = &x_row
                                [(lo as isize + shift_w) as usize..(hi as isize + shift_w) as usize];
                            dst[lo..hi].copy_from_slice(src);
                        }
                    } else {
                        for (ocol, d) in dst.iter_mut().enumerate() {
                            let iw = (ocol * stride) as isize + shift_w;
                            if iw >= 0 && iw < xs.w as isize {
                                *d = x_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of `im2col` back onto the input gradient.
fn col2im_add<T: Scalar>(
    col: &[T],
    xs: Shape,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    gx_sample: &mut [T],
) {
    let pad = (k - 1) / 2;
    let m = oh * ow;
    for ic in 0..xs.c {
        let plane = &mut gx_sample[ic * xs.plane()..(ic + 1) * xs.plane()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ic * k + kh) * k + kw) * m..((ic * k + kh) * k + kw + 1) * m];
                let shift_w = kw as isize - pad as isize;
                for orow in 0..oh {
                    let ih = (orow * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    let gx_row = &mut plane[ih as usize * xs.w..(ih as usize + 1) * xs.w];
                    let src = &row[orow * ow..(orow + 1) * ow];
                    if stride == 1 {
                        let lo = (-shift_w).max(0) as usize;
                        let hi = (xs.w as isize - shift_w).clamp(0, ow as isize) as usize;
                        if lo < hi {
                            let dst = &mut gx_row
                                [(lo as isize + shift_w) as usize..(hi as isize + shift_w) as usize];
                            for (d, &s) in dst.iter_mut().zip(&src[lo..hi]) {
                                *d = *d + s;
                            }
                        }
                    } else {
                        for (ocol, &s) in src.iter().enumerate() {
                            let iw = (ocol * stride) as isize + shift_w;
                            if iw >= 0 && iw < xs.w as isize {
                                gx_row[iw as usize] = gx_row[iw as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// C[r, m] += Σ_q A[r, q] · B[q, m], rows contiguous; the inner update is a
/// row-long multiply-add, which the compiler vectorizes.
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], rows: usize, inner: usize, m: usize) {
    for r in 0..rows {
        let c_row = &mut c[r * m..(r + 1) * m];
        for q in 0..inner {
            let av = a[r * inner + q];
            let b_row = &b[q * m..(q + 1) * m];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Cross-correlation with zero padding (k-1)/2 and stride 1 or 2, computed
/// per sample as weight [co, ci·k²] times the im2col patch matrix.
///
/// `x` is (n, ci, h, w), `weight` is (co, ci, k, k) packed in a Shape with
/// n=co and c=ci, `bias` has co entries. Returns (data, out_shape).
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    weight: &[T],
    ws: Shape,
    bias: &[T],
    stride: usize,
) -> (Vec<T>, Shape) {
    let (co, ci, k) = (ws.n, ws.c, ws.h);
    debug_assert_eq!(ws.h, ws.w);
    debug_assert_eq!(xs.c, ci);
    let (oh, ow) = (conv_out_extent(xs.h, stride), conv_out_extent(xs.w, stride));
    let os = Shape::new(xs.n, co, oh, ow);
    let m = oh * ow;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); os.numel()];
    let mut col = vec![T::zero(); kk * m];

    for n in 0..xs.n {
        let x_sample = &x[n * xs.c * xs.plane()..(n + 1) * xs.c * xs.plane()];
        im2col(x_sample, xs, k, stride, oh, ow, &mut col);
        let out_sample = &mut out[n * co * m..(n + 1) * co * m];
        for oc in 0..co {
            out_sample[oc * m..(oc + 1) * m].iter_mut().for_each(|v| *v = bias[oc]);
        }
        gemm_acc(weight, &col, out_sample, co, kk, m);
    }
    (out, os)
}

/// Gradients of `conv2d_forward`: gw = Σ_n g·colᵀ, gx = col2im(wᵀ·g),
/// gb = row sums of g. The flags skip the unused sides (frozen weights,
/// non-differentiable inputs).
pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    os: Shape,
    x: &[T],
    xs: Shape,
    weight: &[T],
    ws: Shape,
    stride: usize,
    need_x: bool,
    need_wb: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (co, ci, k) = (ws.n, ws.c, ws.h);
    let (oh, ow) = (os.h, os.w);
    let m = oh * ow;
    let kk = ci * k * k;
    let mut gx = need_x.then(|| vec![T::zero(); xs.numel()]);
    let mut gw = need_wb.then(|| vec![T::zero(); ws.numel()]);
    let mut gb = need_wb.then(|| vec![T::zero(); co]);
    let mut col = vec![T::zero(); kk * m];
    let mut col_t = need_wb.then(|| vec![T::zero(); kk * m]);
    let mut gcol = need_x.then(|| vec![T::zero(); kk * m]);

    for n in 0..xs.n {
        let g_sample = &grad_out[n * co * m..(n + 1) * co * m];
        if let Some(gb) = gb.as_mut() {
            for oc in 0..co {
                let mut sum = T::zero();
                for &g in &g_sample[oc * m..(oc + 1) * m] {
                    sum = sum + g;
                }
                gb[oc] = gb[oc] + sum;
            }
        }

        if let (Some(gw), Some(col_t)) = (gw.as_mut(), col_t.as_mut()) {
            let x_sample = &x[n * xs.c * xs.plane()..(n + 1) * xs.c * xs.plane()];
            im2col(x_sample, xs, k, stride, oh, ow, &mut col);
            // Transposing the patch matrix turns the weight-gradient
            // contraction into row-wise multiply-adds.
            for q in 0..kk {
                for mm in 0..m {
                    col_t[mm * kk + q] = col[q * m + mm];
                }
            }
            gemm_acc(g_sample, col_t, gw, co, m, kk);
        }

        if let Some(gcol) = gcol.as_mut() {
            // gcol[q, :] = Σ_oc w[oc, q] · g[oc, :], then scatter back.
            gcol.iter_mut().for_each(|v| *v = T::zero());
            for oc in 0..co {
                let g_row = &g_sample[oc * m..(oc + 1) * m];
                for q in 0..kk {
                    let wv = weight[oc * kk + q];
                    let gc_row = &mut gcol[q * m..(q + 1) * m];
                    for (gc, &g) in gc_row.iter_mut().zip(g_row) {
                        *gc = *gc + wv * g;
                    }
                }
            }
            let gx_sample = gx
                .as_mut()
                .map(|gx| &mut gx[n * xs.c * xs.plane()..(n + 1) * xs.c * xs.plane()])
                .expect("gx allocated with gcol");
            col2im_add(gcol, xs, k, stride, oh, ow, gx_sample);
        }
    }
    (gx, gw, gb)
}

/// Same-size box filter with valid-tap normalization (stride 1, odd k).
pub fn avg_pool_forward<T: Scalar>(x: &[T], xs: Shape, k: usize) -> Vec<T> {
    let r = k / 2;
    let mut out = vec![T::zero(); xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.idx(n, c, 0, 0);
            let plane = &x[base..base + xs.plane()];
            let out_plane = &mut out[base..base + xs.plane()];
            for i in 0..xs.h {
                let h0 = i.saturating_sub(r);
                let h1 = (i + r).min(xs.h - 1);
                for j in 0..xs.w {
                    let w0 = j.saturating_sub(r);
                    let w1 = (j + r).min(xs.w - 1);
                    let mut sum = T::zero();
                    for u in h0..=h1 {
                        for v in w0..=w1 {
                            sum = sum + plane[u * xs.w + v];
                        }
                    }
                    let count = ((h1 - h0 + 1) * (w1 - w0 + 1)) as f64;
                    out_plane[i * xs.w + j] = sum / T::from_f64(count);
                }
            }
        }
    }
    out
}

/// Adjoint of the valid-tap box filter: scatter g/count back over each window.
pub fn avg_pool_backward<T: Scalar>(grad_out: &[T], xs: Shape, k: usize) -> Vec<T> {
    let r = k / 2;
    let mut gx = vec![T::zero(); xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.idx(n, c, 0, 0);
            let g_plane = &grad_out[base..base + xs.plane()];
            let gx_plane = &mut gx[base..base + xs.plane()];
            for i in 0..xs.h {
                let h0 = i.saturating_sub(r);
                let h1 = (i + r).min(xs.h - 1);
                for j in 0..xs.w {
                    let w0 = j.saturating_sub(r);
                    let w1 = (j + r).min(xs.w - 1);
                    let count = ((h1 - h0 + 1) * (w1 - w0 + 1)) as f64;
                    let g = g_plane[i * xs.w + j] / T::from_f64(count);
                    for u in h0..=h1 {
                        for v in w0..=w1 {
                            gx_plane[u * xs.w + v] = gx_plane[u * xs.w + v] + g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling: out[2i+di, 2j+dj] = x[i, j].
pub fn upsample_nearest2_forward<T: Scalar>(x: &[T], xs: Shape) -> (Vec<T>, Shape) {
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let mut out = vec![T::zero(); os.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for i in 0..xs.h {
                for j in 0..xs.w {
                    let v = x[xs.idx(n, c, i, j)];
                    out[os.idx(n, c, 2 * i, 2 * j)] = v;
                    out[os.idx(n, c, 2 * i, 2 * j + 1)] = v;
                    out[os.idx(n, c, 2 * i + 1, 2 * j)] = v;
                    out[os.idx(n, c, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    (out, os)
}

/// Each input cell collects the gradient of its 2x2 output block.
pub fn upsample_nearest2_backward<T: Scalar>(grad_out: &[T], xs: Shape) -> Vec<T> {
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let mut gx = vec![T::zero(); xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for i in 0..xs.h {
                for j in 0..xs.w {
                    let g = grad_out[os.idx(n, c, 2 * i, 2 * j)]
                        + grad_out[os.idx(n, c, 2 * i, 2 * j + 1)]
                        + grad_out[os.idx(n, c, 2 * i + 1, 2 * j)]
                        + grad_out[os.idx(n, c, 2 * i + 1, 2 * j + 1)];
                    gx[xs.idx(n, c, i, j)] = g;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent quadruple-loop convolution used as the oracle.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        stride: usize,
    ) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let k = ws.h as isize;
        let pad = (k - 1) / 2;
        let os = Shape::new(xs.n, ws.n, conv_out_extent(xs.h, stride), conv_out_extent(xs.w, stride));
        let mut out = Tensor::zeros(os);
        for n in 0..os.n {
            for oc in 0..os.c {
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let mut acc = bias[oc];
                        for ic in 0..xs.c {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * stride) as isize + kh - pad;
                                    let iw = (ow * stride) as isize + kw - pad;
                                    if ih >= 0
                                        && ih < xs.h as isize
                                        && iw >= 0
                                        && iw < xs.w as isize
                                    {
                                        acc += x.at(n, ic, ih as usize, iw as usize)
                                            * w.at(oc, ic, kh as usize, kw as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, oc, oh, ow, acc);
                    }
                }
            }
        }
        out
    }

    fn seeded(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        // All sizes up to 8x8 spatial and 4x4 channel combinations.
        for &(h, w) in &[(5usize, 5usize), (8, 8), (7, 6), (4, 8)] {
            for &(ci, co) in &[(1usize, 1usize), (2, 3), (4, 4)] {
                for &k in &[1usize, 3, 5] {
                    for &stride in &[1usize, 2] {
                        let x = seeded(Shape::new(2, ci, h, w), 11 * h as u64 + k as u64);
                        let wt = seeded(Shape::new(co, ci, k, k), 97 + co as u64);
                        let bias: Vec<f64> = (0..co).map(|i| 0.1 * i as f64 - 0.05).collect();
                        let (got, os) =
                            conv2d_forward(x.data(), x.shape(), wt.data(), wt.shape(), &bias, stride);
                        let want = conv_oracle(&x, &wt, &bias, stride);
                        assert_eq!(os, want.shape());
                        let got = Tensor::from_vec(os, got).unwrap();
                        assert!(
                            got.max_abs_diff(&want) < 1e-12,
                            "conv mismatch h={h} w={w} ci={ci} co={co} k={k} s={stride}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn identity_1x1_kernel() {
        let x = seeded(Shape::new(1, 1, 4, 4), 3);
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let (out, os) = conv2d_forward(x.data(), x.shape(), w.data(), w.shape(), &[0.0], 1);
        assert_eq!(os, x.shape());
        assert_eq!(out, x.data());
    }

    #[test]
    fn averaging_kernel_constant_interior() {
        // 3x3 kernel of 1/9 over a constant plane: interior keeps the constant,
        // borders shrink because the zero pad contributes to the full 1/9 divisor.
        let c = 0.6f64;
        let x = Tensor::full(Shape::new(1, 1, 5, 5), c);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0 / 9.0);
        let (out, os) = conv2d_forward(x.data(), x.shape(), w.data(), w.shape(), &[0.0], 1);
        let out = Tensor::from_vec(os, out).unwrap();
        assert!((out.at(0, 0, 2, 2) - c).abs() < 1e-12);
        assert!((out.at(0, 0, 0, 0) - c * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn stride2_1x1_subsamples() {
        let x = Tensor::from_vec(
            Shape::new(1, 1, 4, 4),
            (0..16).map(|i| i as f64).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let (out, os) = conv2d_forward(x.data(), x.shape(), w.data(), w.shape(), &[0.0], 2);
        assert_eq!((os.h, os.w), (2, 2));
        assert_eq!(out, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn avg_pool_constant_input_all_k() {
        for &k in &[1usize, 3, 5, 7] {
            let x = Tensor::full(Shape::new(1, 2, 6, 6), 0.3);
            let out = avg_pool_forward(x.data(), x.shape(), k);
            for &v in &out {
                assert!((v - 0.3f64).abs() < 1e-15, "k={k}");
            }
        }
    }

    #[test]
    fn avg_pool_matches_sliding_window_oracle() {
        let xs = Shape::new(1, 1, 8, 8);
        let x = seeded(xs, 42);
        let out = avg_pool_forward(x.data(), xs, 3);
        // Independent sliding-window evaluation.
        for i in 0..8usize {
            for j in 0..8usize {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        let u = i as isize + di;
                        let v = j as isize + dj;
                        if u >= 0 && u < 8 && v >= 0 && v < 8 {
                            sum += x.at(0, 0, u as usize, v as usize);
                            cnt += 1.0;
                        }
                    }
                }
                assert!((out[i * 8 + j] - sum / cnt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_block_repeats() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, os) = upsample_nearest2_forward(x.data(), x.shape());
        assert_eq!((os.h, os.w), (4, 4));
        let want = vec![
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out, want);
    }
}

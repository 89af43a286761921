//! Raw numeric kernels over plain slices.
//!
//! Every kernel accumulates into its output (`out +=`), computes in a fixed
//! element order, and parallelizes only across disjoint output regions, so
//! results are bitwise independent of thread count.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Minimum rows before a matmul fans out across the thread pool.
const PAR_ROW_THRESHOLD: usize = 8;

/// `out[m,n] += a[m,k] . b[k,n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &alv) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (dst, &bv) in out_row.iter_mut().zip(b_row) {
                *dst = *dst + alv * bv;
            }
        }
    };
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// `out[m,n] += a[m,k] . b[n,k]^T`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, dst) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *dst = *dst + acc;
        }
    };
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// `out[m,n] += a[k,m]^T . b[k,n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        for l in 0..k {
            let alv = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for (dst, &bv) in out_row.iter_mut().zip(b_row) {
                *dst = *dst + alv * bv;
            }
        }
    };
    if m >= PAR_ROW_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
}

/// Spatial geometry shared by convolution-family kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a strided convolution: `out = floor((in + 2p - k)/s) + 1`.
    pub fn conv(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad_h: usize, pad_w: usize) -> Option<ConvGeom> {
        let oh = (in_h + 2 * pad_h).checked_sub(kernel)? / stride + 1;
        let ow = (in_w + 2 * pad_w).checked_sub(kernel)? / stride + 1;
        if oh == 0 || ow == 0 {
            return None;
        }
        Some(ConvGeom {
            in_h,
            in_w,
            kernel,
            stride,
            pad_h,
            pad_w,
            out_h: oh,
            out_w: ow,
        })
    }

    /// Geometry of a transposed convolution: `out = (in - 1) s - 2p + k`.
    /// Returned with roles arranged so the *transposed* output plays the
    /// convolution input (`in_h/in_w`) and the given input plays `out_h/out_w`.
    pub fn deconv(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad_h: usize, pad_w: usize) -> Option<ConvGeom> {
        let oh = ((in_h - 1) * stride + kernel).checked_sub(2 * pad_h)?;
        let ow = ((in_w - 1) * stride + kernel).checked_sub(2 * pad_w)?;
        if oh == 0 || ow == 0 {
            return None;
        }
        Some(ConvGeom {
            in_h: oh,
            in_w: ow,
            kernel,
            stride,
            pad_h,
            pad_w,
            out_h: in_h,
            out_w: in_w,
        })
    }
}

/// Unrolls one image `[c, in_h, in_w]` into a `[c*k*k, out_h*out_w]` matrix.
/// Out-of-range taps are zero.
pub fn im2col<T: Scalar>(image: &[T], channels: usize, geom: &ConvGeom, col: &mut [T]) {
    let ConvGeom {
        in_h,
        in_w,
        kernel,
        stride,
        pad_h,
        pad_w,
        out_h,
        out_w,
    } = *geom;
    debug_assert_eq!(image.len(), channels * in_h * in_w);
    debug_assert_eq!(col.len(), channels * kernel * kernel * out_h * out_w);
    let plane = out_h * out_w;
    for c in 0..channels {
        let img_c = &image[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = &mut col[((c * kernel + ki) * kernel + kj) * plane
                    ..((c * kernel + ki) * kernel + kj + 1) * plane];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad_h as isize;
                    let dst = &mut row[oh * out_w..(oh + 1) * out_w];
                    if ih < 0 || ih >= in_h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &img_c[ih as usize * in_w..(ih as usize + 1) * in_w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad_w as isize;
                        *v = if iw >= 0 && iw < in_w as isize {
                            src_row[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-accumulates a `[c*k*k, out_h*out_w]` matrix back into an image
/// buffer `[c, in_h, in_w]` (the adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(col: &[T], channels: usize, geom: &ConvGeom, image: &mut [T]) {
    let ConvGeom {
        in_h,
        in_w,
        kernel,
        stride,
        pad_h,
        pad_w,
        out_h,
        out_w,
    } = *geom;
    debug_assert_eq!(image.len(), channels * in_h * in_w);
    debug_assert_eq!(col.len(), channels * kernel * kernel * out_h * out_w);
    let plane = out_h * out_w;
    for c in 0..channels {
        let img_c = &mut image[c * in_h * in_w..(c + 1) * in_h * in_w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = &col[((c * kernel + ki) * kernel + kj) * plane
                    ..((c * kernel + ki) * kernel + kj + 1) * plane];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad_h as isize;
                    if ih < 0 || ih >= in_h as isize {
                        continue;
                    }
                    let dst_row = &mut img_c[ih as usize * in_w..(ih as usize + 1) * in_w];
                    let src = &row[oh * out_w..(oh + 1) * out_w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad_w as isize;
                        if iw >= 0 && iw < in_w as isize {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution (cross-correlation). `x: [b,c,.]`, `w: [o,c,k,k]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_c: usize,
    out_c: usize,
    geom: &ConvGeom,
    out: &mut [T],
) {
    let in_plane = in_c * geom.in_h * geom.in_w;
    let out_plane = out_c * geom.out_h * geom.out_w;
    let ckk = in_c * geom.kernel * geom.kernel;
    let spatial = geom.out_h * geom.out_w;
    debug_assert_eq!(x.len(), batch * in_plane);
    debug_assert_eq!(out.len(), batch * out_plane);
    out.par_chunks_mut(out_plane)
        .enumerate()
        .take(batch)
        .for_each(|(b, out_b)| {
            let mut col = vec![T::zero(); ckk * spatial];
            im2col(&x[b * in_plane..(b + 1) * in_plane], in_c, geom, &mut col);
            matmul_nn(w, &col, out_b, out_c, ckk, spatial);
            if let Some(bias) = bias {
                for (o, chunk) in out_b.chunks_mut(spatial).enumerate() {
                    for v in chunk.iter_mut() {
                        *v = *v + bias[o];
                    }
                }
            }
        });
}

/// Gradient of [`conv2d_forward`] w.r.t. its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    w: &[T],
    batch: usize,
    in_c: usize,
    out_c: usize,
    geom: &ConvGeom,
    grad_x: &mut [T],
) {
    let in_plane = in_c * geom.in_h * geom.in_w;
    let out_plane = out_c * geom.out_h * geom.out_w;
    let ckk = in_c * geom.kernel * geom.kernel;
    let spatial = geom.out_h * geom.out_w;
    grad_x
        .par_chunks_mut(in_plane)
        .enumerate()
        .take(batch)
        .for_each(|(b, gx_b)| {
            let mut colgrad = vec![T::zero(); ckk * spatial];
            matmul_tn(
                w,
                &grad_out[b * out_plane..(b + 1) * out_plane],
                &mut colgrad,
                ckk,
                out_c,
                spatial,
            );
            col2im(&colgrad, in_c, geom, gx_b);
        });
}

/// Gradients of [`conv2d_forward`] w.r.t. weight and bias, accumulated over
/// the batch in ascending index order.
pub fn conv2d_backward_params<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    batch: usize,
    in_c: usize,
    out_c: usize,
    geom: &ConvGeom,
    grad_w: &mut [T],
    grad_bias: Option<&mut [T]>,
) {
    let in_plane = in_c * geom.in_h * geom.in_w;
    let out_plane = out_c * geom.out_h * geom.out_w;
    let ckk = in_c * geom.kernel * geom.kernel;
    let spatial = geom.out_h * geom.out_w;
    let mut col = vec![T::zero(); ckk * spatial];
    for b in 0..batch {
        im2col(&x[b * in_plane..(b + 1) * in_plane], in_c, geom, &mut col);
        matmul_nt(
            &grad_out[b * out_plane..(b + 1) * out_plane],
            &col,
            grad_w,
            out_c,
            spatial,
            ckk,
        );
    }
    if let Some(gb) = grad_bias {
        for b in 0..batch {
            let go_b = &grad_out[b * out_plane..(b + 1) * out_plane];
            for (o, chunk) in go_b.chunks(spatial).enumerate() {
                let mut acc = T::zero();
                for &g in chunk {
                    acc = acc + g;
                }
                gb[o] = gb[o] + acc;
            }
        }
    }
}

/// Forward transposed convolution. `x: [b,c,.]`, `w: [c,o,k,k]`.
///
/// The geometry must come from [`ConvGeom::deconv`], whose `out_h/out_w`
/// equal the given input's spatial dims and `in_h/in_w` the produced ones.
pub fn deconv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_c: usize,
    out_c: usize,
    geom: &ConvGeom,
    out: &mut [T],
) {
    let in_plane = in_c * geom.out_h * geom.out_w;
    let out_plane = out_c * geom.in_h * geom.in_w;
    let okk = out_c * geom.kernel * geom.kernel;
    let spatial = geom.out_h * geom.out_w;
    out.par_chunks_mut(out_plane)
        .enumerate()
        .take(batch)
        .for_each(|(b, out_b)| {
            let mut col = vec![T::zero(); okk * spatial];
            matmul_tn(
                w,
                &x[b * in_plane..(b + 1) * in_plane],
                &mut col,
                okk,
                in_c,
                spatial,
            );
            col2im(&col, out_c, geom, out_b);
            if let Some(bias) = bias {
                let plane = geom.in_h * geom.in_w;
                for (o, chunk) in out_b.chunks_mut(plane).enumerate() {
                    for v in chunk.iter_mut() {
                        *v = *v + bias[o];
                    }
                }
            }
        });
}

/// Gradient of [`deconv2d_forward`] w.r.t. its input (a plain convolution
/// of the output gradient with the same weights).
pub fn deconv2d_backward_input<T: Scalar>(
    grad_out: &[T],
    w: &[T],
    batch: usize,
    in_c: usize,
    out_c: usize,
    geom: &ConvGeom,
    grad_x: &mut [T],
) {
    let in_plane = in_c * geom.out_h * geom.out_w;
    let out_plane = out_c * geom.in_h * geom.in_w;
    let okk = out_c * geom.kernel * geom.kernel;
    let spatial = geom.out_h * geom.out_w;
    grad_x
        .par_chunks_mut(in_plane)
        .enumerate()
        .take(batch)
        .for_each(|(b, gx_b)| {
            let mut col = vec![T::zero(); okk * spatial];
            im2col(
                &grad_out[b * out_plane..(b + 1) * out_plane],
                out_c,
                geom,
                &mut col,
            );
            matmul_nn(w, &col, gx_b, in_c, okk, spatial);
        });
}

/// Gradients of [`deconv2d_forward`] w.r.t. weight and bias.
pub fn deconv2d_backward_params<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    batch: usize,
    in_c: usize,
    out_c: usize,
    geom: &ConvGeom,
    grad_w: &mut [T],
    grad_bias: Option<&mut [T]>,
) {
    let in_plane = in_c * geom.out_h * geom.out_w;
    let out_plane = out_c * geom.in_h * geom.in_w;
    let okk = out_c * geom.kernel * geom.kernel;
    let spatial = geom.out_h * geom.out_w;
    let mut col = vec![T::zero(); okk * spatial];
    for b in 0..batch {
        im2col(
            &grad_out[b * out_plane..(b + 1) * out_plane],
            out_c,
            geom,
            &mut col,
        );
        matmul_nt(
            &x[b * in_plane..(b + 1) * in_plane],
            &col,
            grad_w,
            in_c,
            spatial,
            okk,
        );
    }
    if let Some(gb) = grad_bias {
        let plane = geom.in_h * geom.in_w;
        for b in 0..batch {
            let go_b = &grad_out[b * out_plane..(b + 1) * out_plane];
            for (o, chunk) in go_b.chunks(plane).enumerate() {
                let mut acc = T::zero();
                for &g in chunk {
                    acc = acc + g;
                }
                gb[o] = gb[o] + acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force cross-correlation oracle.
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        c: usize,
        o: usize,
        h: usize,
        wd: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (y * s + ki) as isize - p as isize;
                                let ix = (xo * s + kj) as isize - p as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[(ic * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + xo] = acc;
                }
            }
        }
        out
    }

    /// Brute-force scatter-accumulate oracle for transposed convolution.
    fn deconv_oracle(
        x: &[f64],
        w: &[f64],
        c: usize,
        o: usize,
        h: usize,
        wd: usize,
        k: usize,
        s: usize,
        ph: usize,
        pw: usize,
    ) -> Vec<f64> {
        let oh = (h - 1) * s + k - 2 * ph;
        let ow = (wd - 1) * s + k - 2 * pw;
        let mut out = vec![0.0; o * oh * ow];
        for ic in 0..c {
            for y in 0..h {
                for xo in 0..wd {
                    let v = x[(ic * h + y) * wd + xo];
                    for oc in 0..o {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ty = (y * s + ki) as isize - ph as isize;
                                let tx = (xo * s + kj) as isize - pw as isize;
                                if ty >= 0 && ty < oh as isize && tx >= 0 && tx < ow as isize {
                                    out[(oc * oh + ty as usize) * ow + tx as usize] +=
                                        v * w[((ic * o + oc) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn lcg_fill(buf: &mut [f64], mut state: u64) {
        for v in buf.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((state >> 33) as f64) / (u32::MAX as f64) - 0.5;
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let mut a = vec![0.0; m * k];
        let mut b = vec![0.0; k * n];
        lcg_fill(&mut a, 1);
        lcg_fill(&mut b, 2);
        let mut c_nn = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c_nn, m, k, n);

        // b transposed -> nt path
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c_nt, m, k, n);

        // a transposed -> tn path
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut c_tn = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c_tn, m, k, n);

        for i in 0..m * n {
            assert!((c_nn[i] - c_nt[i]).abs() < 1e-12);
            assert!((c_nn[i] - c_tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_all_ones_no_padding() {
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let geom = ConvGeom::conv(3, 3, 3, 1, 0, 0).unwrap();
        let mut out = vec![0.0; 1];
        conv2d_forward(&x, &w, None, 1, 1, 1, &geom, &mut out);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv_all_ones_padded() {
        let x = vec![1.0; 9];
        let w = vec![1.0; 9];
        let geom = ConvGeom::conv(3, 3, 3, 1, 1, 1).unwrap();
        let mut out = vec![0.0; 9];
        conv2d_forward(&x, &w, None, 1, 1, 1, &geom, &mut out);
        assert_eq!(
            out,
            vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_matches_oracle_random() {
        let (c, o, h, w, k, s, p) = (2, 3, 7, 6, 3, 2, 1);
        let mut x = vec![0.0; c * h * w];
        let mut wt = vec![0.0; o * c * k * k];
        lcg_fill(&mut x, 11);
        lcg_fill(&mut wt, 12);
        let geom = ConvGeom::conv(h, w, k, s, p, p).unwrap();
        let mut out = vec![0.0; o * geom.out_h * geom.out_w];
        conv2d_forward(&x, &wt, None, 1, c, o, &geom, &mut out);
        let oracle = conv_oracle(&x, &wt, c, o, h, w, k, s, p);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deconv_single_pixel_scatter() {
        // 1x1 input v, 2x2 ones kernel, stride 2, no padding -> 2x2 all v
        let x = vec![3.5];
        let w = vec![1.0; 4];
        let geom = ConvGeom::deconv(1, 1, 2, 2, 0, 0).unwrap();
        let mut out = vec![0.0; 4];
        deconv2d_forward(&x, &w, None, 1, 1, 1, &geom, &mut out);
        assert_eq!(out, vec![3.5; 4]);
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let (c, o, h, w, k, s, ph, pw) = (3, 2, 4, 5, 4, 2, 2, 1);
        let mut x = vec![0.0; c * h * w];
        let mut wt = vec![0.0; c * o * k * k];
        lcg_fill(&mut x, 21);
        lcg_fill(&mut wt, 22);
        let geom = ConvGeom::deconv(h, w, k, s, ph, pw).unwrap();
        let mut out = vec![0.0; o * geom.in_h * geom.in_w];
        deconv2d_forward(&x, &wt, None, 1, c, o, &geom, &mut out);
        let oracle = deconv_oracle(&x, &wt, c, o, h, w, k, s, ph, pw);
        assert_eq!(out.len(), oracle.len());
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deconv_geometry_reproduces_configured_sizes() {
        // 64x112 input, k=4, s=2, padding (2,1) -> 126x224
        let geom = ConvGeom::deconv(64, 112, 4, 2, 2, 1).unwrap();
        assert_eq!((geom.in_h, geom.in_w), (126, 224));
    }
}

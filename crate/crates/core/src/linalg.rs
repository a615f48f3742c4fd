//! Sequential dense kernels: GEMM variants and im2col/col2im.
//!
//! These loops carry essentially all of the training and search runtime, so
//! they are written in forms the compiler can vectorize without reordering
//! floating-point math:
//!
//! * row-update GEMM (`c[i,:] += a[i,k] * b[k,:]`) avoids reduction loops,
//! * explicit `mul_add` requests hardware FMA (single rounding, so results
//!   are identical across runs and platforms with FMA units),
//! * dot products use fixed-width accumulator arrays reduced in a fixed
//!   order, keeping them deterministic.
//!
//! All kernels *accumulate* into `c`; callers zero the output first when they
//! want a plain product.

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    // 4-row tiles: each pass over B updates four C rows, quartering B traffic.
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let (a0, a1, a2, a3) = (&a[i * k..][..k], &a[(i + 1) * k..][..k], &a[(i + 2) * k..][..k], &a[(i + 3) * k..][..k]);
        let mut kk = 0;
        while kk + 2 <= k {
            let b0 = &b[kk * n..][..n];
            let b1 = &b[(kk + 1) * n..][..n];
            let (x00, x01) = (a0[kk], a0[kk + 1]);
            let (x10, x11) = (a1[kk], a1[kk + 1]);
            let (x20, x21) = (a2[kk], a2[kk + 1]);
            let (x30, x31) = (a3[kk], a3[kk + 1]);
            for j in 0..n {
                let (v0, v1) = (b0[j], b1[j]);
                c0[j] = x01.mul_add(v1, x00.mul_add(v0, c0[j]));
                c1[j] = x11.mul_add(v1, x10.mul_add(v0, c1[j]));
                c2[j] = x21.mul_add(v1, x20.mul_add(v0, c2[j]));
                c3[j] = x31.mul_add(v1, x30.mul_add(v0, c3[j]));
            }
            kk += 2;
        }
        if kk < k {
            let b0 = &b[kk * n..][..n];
            let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let v = b0[j];
                c0[j] = x0.mul_add(v, c0[j]);
                c1[j] = x1.mul_add(v, c1[j]);
                c2[j] = x2.mul_add(v, c2[j]);
                c3[j] = x3.mul_add(v, c3[j]);
            }
        }
        i += 4;
    }
    // Remaining rows one at a time, K unrolled by four.
    while i < m {
        let arow = &a[i * k..][..k];
        let crow = &mut c[i * n..][..n];
        let mut kk = 0;
        while kk + 4 <= k {
            let (x0, x1, x2, x3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..][..n];
            let b1 = &b[(kk + 1) * n..][..n];
            let b2 = &b[(kk + 2) * n..][..n];
            let b3 = &b[(kk + 3) * n..][..n];
            for j in 0..n {
                crow[j] = x3.mul_add(
                    b3[j],
                    x2.mul_add(b2[j], x1.mul_add(b1[j], x0.mul_add(b0[j], crow[j]))),
                );
            }
            kk += 4;
        }
        while kk < k {
            let x = arow[kk];
            let brow = &b[kk * n..][..n];
            for j in 0..n {
                crow[j] = x.mul_add(brow[j], crow[j]);
            }
            kk += 1;
        }
        i += 1;
    }
}

/// Deterministic dot product: two 8-wide accumulator blocks, fixed-order
/// final reduction.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let k = x.len();
    let mut acc0 = [0.0f64; 8];
    let mut acc1 = [0.0f64; 8];
    let mut i = 0;
    while i + 16 <= k {
        for l in 0..8 {
            acc0[l] = x[i + l].mul_add(y[i + l], acc0[l]);
        }
        for l in 0..8 {
            acc1[l] = x[i + 8 + l].mul_add(y[i + 8 + l], acc1[l]);
        }
        i += 16;
    }
    while i + 8 <= k {
        for l in 0..8 {
            acc0[l] = x[i + l].mul_add(y[i + l], acc0[l]);
        }
        i += 8;
    }
    let mut tail = 0.0;
    while i < k {
        tail = x[i].mul_add(y[i], tail);
        i += 1;
    }
    let mut s = 0.0;
    for l in 0..8 {
        s += acc0[l] + acc1[l];
    }
    s + tail
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ` — `b` stored row-major as `[n,k]`.
/// Dot-product loops are latency-bound, so this transposes `b` into scratch
/// and reuses the row-update kernel; the O(n·k) copy is cheap next to the
/// O(m·n·k) multiply for every shape the networks produce.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], bt: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut b = vec![0.0f64; k * n];
    for j in 0..n {
        let row = &bt[j * k..][..k];
        for kk in 0..k {
            b[kk * n + j] = row[kk];
        }
    }
    gemm_nn(m, k, n, a, &b, c);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]` — `a` stored row-major as `[k,m]`.
/// Transposes `a` into scratch and reuses the row-update kernel; the O(k·m)
/// copy is negligible next to the O(k·m·n) multiply.
pub fn gemm_tn(m: usize, k: usize, n: usize, at: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(at.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut a = vec![0.0f64; m * k];
    for kk in 0..k {
        let row = &at[kk * m..][..m];
        for i in 0..m {
            a[i * k + kk] = row[i];
        }
    }
    gemm_nn(m, k, n, &a, b, c);
}

/// Output spatial size of a convolution/pool window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `[c,h,w]` image into columns `[c·kh·kw, oh·ow]` so a
/// convolution becomes a single GEMM. Out-of-range taps (padding) are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    for cc in 0..c {
        let plane = &x[cc * h * w..][..h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((cc * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..][..ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..][..w];
                    if stride == 1 {
                        // Contiguous source segment clipped to the image;
                        // zero the padded prefix/suffix.
                        let ix0 = kx as isize - pad as isize;
                        let lead = (-ix0).clamp(0, ow as isize) as usize;
                        let start = (ix0 + lead as isize) as usize;
                        let copy = (w.saturating_sub(start)).min(ow - lead);
                        dst[..lead].fill(0.0);
                        dst[lead..lead + copy].copy_from_slice(&src_row[start..start + copy]);
                        dst[lead + copy..].fill(0.0);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            dst[ox] = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Transposed counterpart of [`im2col`]: scatter-adds column gradients back
/// onto the image gradient. `dx` must be pre-zeroed by the caller (it may
/// accumulate over several calls).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(dx.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    for cc in 0..c {
        let plane = &mut dx[cc * h * w..][..h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((cc * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * ow..][..ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        // Small deterministic generator for test data; values in [-1, 1).
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn randv(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n).map(|_| lcg(seed)).collect()
    }

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            let scale = 1.0f64.max(w.abs());
            assert!((g - w).abs() <= tol * scale, "got {g}, want {w}");
        }
    }

    #[test]
    fn gemm_nn_matches_naive_triple_loop() {
        let mut seed = 7;
        // Sizes straddle the 4-row and 2-column tile boundaries.
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 4, 8), (6, 150, 100), (13, 27, 33)] {
            let a = randv(m * k, &mut seed);
            let b = randv(k * n, &mut seed);
            let mut c = randv(m * n, &mut seed);
            let mut want = c.clone();
            let prod = naive_nn(m, k, n, &a, &b);
            for (w, p) in want.iter_mut().zip(&prod) {
                *w += p;
            }
            gemm_nn(m, k, n, &a, &b, &mut c);
            assert_close(&c, &want, 1e-12);
        }
    }

    #[test]
    fn gemm_nt_matches_transposed_naive() {
        let mut seed = 11;
        for &(m, k, n) in &[(2, 17, 3), (5, 16, 5), (4, 33, 9)] {
            let a = randv(m * k, &mut seed);
            let bt = randv(n * k, &mut seed);
            // b[kk,j] = bt[j,kk]
            let mut b = vec![0.0; k * n];
            for j in 0..n {
                for kk in 0..k {
                    b[kk * n + j] = bt[j * k + kk];
                }
            }
            let want = naive_nn(m, k, n, &a, &b);
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c);
            assert_close(&c, &want, 1e-12);
        }
    }

    #[test]
    fn gemm_tn_matches_transposed_naive() {
        let mut seed = 13;
        for &(m, k, n) in &[(3, 9, 4), (8, 5, 16), (7, 21, 6)] {
            let at = randv(k * m, &mut seed);
            let b = randv(k * n, &mut seed);
            let mut a = vec![0.0; m * k];
            for kk in 0..k {
                for i in 0..m {
                    a[i * k + kk] = at[kk * m + i];
                }
            }
            let want = naive_nn(m, k, n, &a, &b);
            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, &at, &b, &mut c);
            assert_close(&c, &want, 1e-12);
        }
    }

    #[test]
    fn dot_matches_sequential_sum() {
        let mut seed = 17;
        for len in [0, 1, 7, 8, 15, 16, 17, 40, 129] {
            let x = randv(len, &mut seed);
            let y = randv(len, &mut seed);
            let want: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((dot(&x, &y) - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn im2col_matches_index_formula() {
        let mut seed = 19;
        for &(c, h, w, kh, kw, stride, pad) in &[
            (1, 4, 4, 3, 3, 1, 0),
            (2, 5, 6, 3, 3, 1, 1),
            (3, 7, 7, 5, 5, 1, 2),
            (2, 8, 8, 2, 2, 2, 0),
            (1, 6, 6, 3, 3, 2, 1),
        ] {
            let x = randv(c * h * w, &mut seed);
            let oh = conv_out_dim(h, kh, stride, pad);
            let ow = conv_out_dim(w, kw, stride, pad);
            let mut cols = vec![f64::NAN; c * kh * kw * oh * ow];
            im2col(&x, c, h, w, kh, kw, stride, pad, &mut cols);
            for cc in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let want = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[(cc * h + iy as usize) * w + ix as usize]
                                };
                                let got = cols[(((cc * kh + ky) * kw + kx) * oh + oy) * ow + ox];
                                assert_eq!(got, want, "c{cc} ky{ky} kx{kx} oy{oy} ox{ox}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y — the defining
        // property of the transpose, which is exactly what backward needs.
        let mut seed = 23;
        let (c, h, w, kh, kw, stride, pad) = (2, 6, 5, 3, 3, 1, 1);
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(w, kw, stride, pad);
        let x = randv(c * h * w, &mut seed);
        let y = randv(c * kh * kw * oh * ow, &mut seed);
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, stride, pad, &mut cols);
        let lhs = dot(&cols, &y);
        let mut xb = vec![0.0; x.len()];
        col2im(&y, c, h, w, kh, kw, stride, pad, &mut xb);
        let rhs = dot(&x, &xb);
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    #[ignore = "manual throughput probe"]
    fn bench_gemm_shapes() {
        use std::time::Instant;
        let mut seed = 29;
        // Shapes that occur in the two networks' forward/backward passes.
        for &(m, k, n, reps) in &[
            (64, 576, 1024, 40usize),
            (128, 1152, 256, 80),
            (256, 2304, 64, 160),
            (64, 27, 1024, 200),
            (128, 4096, 1024, 8),
            (6, 25, 784, 2000),
            (16, 150, 100, 8000),
        ] {
            let a = randv(m * k, &mut seed);
            let b = randv(k * n, &mut seed);
            let mut c = vec![0.0; m * n];
            let t = Instant::now();
            for _ in 0..reps {
                gemm_nn(m, k, n, &a, &b, &mut c);
            }
            let dt = t.elapsed().as_secs_f64();
            let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
            println!("gemm_nn {m}x{k}x{n}: {gf:.2} GFLOP/s");
            let t = Instant::now();
            for _ in 0..reps {
                gemm_nt(n, k, m, &b, &a, &mut vec![0.0; n * m]);
            }
            let dt = t.elapsed().as_secs_f64();
            let gf = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
            println!("gemm_nt {n}x{k}x{m}: {gf:.2} GFLOP/s");
        }
    }
}

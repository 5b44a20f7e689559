//! Raw forward/backward kernels for the layer types of the network.
//!
//! All kernels work on `(C, H, W)` row-major slices and use a fixed
//! summation order, so results do not depend on scheduling.

use crate::tensor::Real;

/// Target size, in elements, of one band of unfolded columns.
const BAND_ELEMS: usize = 1 << 16;

/// Output rows per band for a `ckk × wo` column layout.
fn band_rows(ckk: usize, wo: usize, ho: usize) -> usize {
    (BAND_ELEMS / (ckk * wo)).clamp(1, ho)
}

/// Unfold output rows `y0..y0+rows` of a valid `k×k` convolution over a
/// `(cin, h, w)` input into a `(cin*k*k, rows*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col_band<T: Real>(input: &[T], cin: usize, h: usize, w: usize, k: usize, y0: usize, rows: usize, cols: &mut [T]) {
    let wo = w - k + 1;
    let nc = rows * wo;
    debug_assert!(y0 + rows < h - k + 2);
    let mut row = 0;
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let dst = &mut cols[row * nc..(row + 1) * nc];
                for y in 0..rows {
                    let at = (y0 + y + i) * w + j;
                    dst[y * wo..(y + 1) * wo].copy_from_slice(&plane[at..at + wo]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_band`]: scatter-add columns into a `(cin, h, w)` buffer.
#[allow(clippy::too_many_arguments)]
pub fn col2im_band<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, y0: usize, rows: usize, out: &mut [T]) {
    let wo = w - k + 1;
    let nc = rows * wo;
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for i in 0..k {
            for j in 0..k {
                let src = &cols[row * nc..(row + 1) * nc];
                for y in 0..rows {
                    let at = (y0 + y + i) * w + j;
                    for (d, &s) in plane[at..at + wo].iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                        *d = *d + s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Unfold a whole `(cin, h, w)` input into a `(cin*k*k, ho*wo)` column matrix.
pub fn im2col<T: Real>(input: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    im2col_band(input, cin, h, w, k, 0, h - k + 1, cols);
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    col2im_band(cols, cin, h, w, k, 0, h - k + 1, out);
}

/// Sum in eight interleaved partial sums, combined in double precision.
fn lane_sum<T: Real>(v: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l = *l + x;
        }
    }
    let total: f64 = lanes.iter().chain(rest).map(|x| x.as_f64()).sum();
    T::from_f64(total)
}

/// Valid 2-D convolution (cross-correlation), stride 1. `kernels` is
/// `(cout, cin, k, k)`. The input is unfolded one band of output rows at a
/// time so the column buffer stays small.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
) -> Vec<T> {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let n = ho * wo;
    let ckk = cin * k * k;
    let mut out = vec![T::zero(); cout * n];
    if k > 1 && T::conv_forward_fast(input, cin, h, w, kernels, bias, cout, k, &mut out) {
        return out;
    }
    for (o, &b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].fill(b);
    }
    if k == 1 {
        T::gemm(cout, cin, n, kernels, false, input, false, &mut out, T::one());
        return out;
    }
    let band = band_rows(ckk, wo, ho);
    let mut cols = vec![T::zero(); ckk * band * wo];
    for y0 in (0..ho).step_by(band) {
        let rows = band.min(ho - y0);
        let nc = rows * wo;
        let cols = &mut cols[..ckk * nc];
        im2col_band(input, cin, h, w, k, y0, rows, cols);
        T::gemm_strided(cout, ckk, nc, kernels, ckk, 1, cols, nc, 1, &mut out[y0 * wo..], n, T::one());
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    grad_out: &[T],
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    cout: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let n = ho * wo;
    let ckk = cin * k * k;

    let grad_bias: Vec<T> = (0..cout).map(|o| lane_sum(&grad_out[o * n..(o + 1) * n])).collect();

    let mut grad_kernels = vec![T::zero(); cout * ckk];
    let mut grad_input = vec![T::zero(); cin * h * w];
    if k == 1 {
        T::gemm(cout, n, cin, grad_out, false, input, true, &mut grad_kernels, T::zero());
        T::gemm(cin, cout, n, kernels, true, grad_out, false, &mut grad_input, T::zero());
        return (grad_input, grad_kernels, grad_bias);
    }

    if T::conv_kernel_grad_fast(grad_out, input, cin, h, w, cout, k, &mut grad_kernels) {
        // the input gradient is a valid convolution of the zero-padded
        // output gradient with the flipped, transposed kernels
        let (hp, wp) = (h + k - 1, w + k - 1);
        let mut padded = vec![T::zero(); cout * hp * wp];
        for o in 0..cout {
            for y in 0..ho {
                let at = (o * hp + y + k - 1) * wp + k - 1;
                padded[at..at + wo].copy_from_slice(&grad_out[o * n + y * wo..o * n + (y + 1) * wo]);
            }
        }
        let mut flipped = vec![T::zero(); cin * cout * k * k];
        for o in 0..cout {
            for c in 0..cin {
                for i in 0..k {
                    for j in 0..k {
                        flipped[((c * cout + o) * k + k - 1 - i) * k + k - 1 - j] = kernels[((o * cin + c) * k + i) * k + j];
                    }
                }
            }
        }
        let zeros = vec![T::zero(); cin];
        if T::conv_forward_fast(&padded, cout, hp, wp, &flipped, &zeros, cin, k, &mut grad_input) {
            return (grad_input, grad_kernels, grad_bias);
        }
        grad_kernels.fill(T::zero());
    }

    let band = band_rows(ckk, wo, ho);
    let mut cols = vec![T::zero(); ckk * band * wo];
    let mut grad_cols = vec![T::zero(); ckk * band * wo];
    for y0 in (0..ho).step_by(band) {
        let rows = band.min(ho - y0);
        let nc = rows * wo;
        let cols = &mut cols[..ckk * nc];
        let grad_cols = &mut grad_cols[..ckk * nc];
        let g = &grad_out[y0 * wo..];
        im2col_band(input, cin, h, w, k, y0, rows, cols);
        T::gemm_strided(cout, nc, ckk, g, n, 1, cols, 1, nc, &mut grad_kernels, ckk, T::one());
        T::gemm_strided(ckk, cout, nc, kernels, 1, ckk, g, n, 1, grad_cols, nc, T::zero());
        col2im_band(grad_cols, cin, h, w, k, y0, rows, &mut grad_input);
    }
    (grad_input, grad_kernels, grad_bias)
}

/// 2×2 max-pool, stride 2. Returns the pooled values and, per output cell,
/// the flat input index of the winning element (first maximum in row-major
/// window order).
pub fn maxpool2_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); c * ho * wo];
    let mut arg = vec![0u32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            let top = (ch * h + 2 * y) * w;
            let (r0, r1) = (&input[top..top + w], &input[top + w..top + 2 * w]);
            let at = (ch * ho + y) * wo;
            for (x, (o, a)) in out[at..at + wo].iter_mut().zip(&mut arg[at..at + wo]).enumerate() {
                let window = [(r0[2 * x], 0), (r0[2 * x + 1], 1), (r1[2 * x], w), (r1[2 * x + 1], w + 1)];
                let mut best = window[0];
                for &cand in &window[1..] {
                    if cand.0 > best.0 {
                        best = cand;
                    }
                }
                *o = best.0;
                *a = (top + 2 * x + best.1) as u32;
            }
        }
    }
    (out, arg)
}

/// Stride-2 transposed convolution with a 2×2 kernel `(cin, cout, 2, 2)`:
/// every input cell scatters into its own 2×2 output block.
#[allow(clippy::too_many_arguments)]
pub fn upconv2_forward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    // blocks[(o,i,j), (y,x)] = sum_c K[c,(o,i,j)] * X[c,(y,x)]
    let mut blocks = vec![T::zero(); cout * 4 * hw];
    T::gemm(cout * 4, cin, hw, kernels, true, input, false, &mut blocks, T::zero());
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); cout * oh * ow];
    for o in 0..cout {
        for i in 0..2 {
            for j in 0..2 {
                let src = &blocks[((o * 2 + i) * 2 + j) * hw..((o * 2 + i) * 2 + j + 1) * hw];
                for y in 0..h {
                    for x in 0..w {
                        out[(o * oh + 2 * y + i) * ow + 2 * x + j] = src[y * w + x] + bias[o];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`upconv2_forward`] with respect to input, kernels and bias.
#[allow(clippy::too_many_arguments)]
pub fn upconv2_backward<T: Real>(
    grad_out: &[T],
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[T],
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_blocks = vec![T::zero(); cout * 4 * hw];
    let mut grad_bias = vec![T::zero(); cout];
    for o in 0..cout {
        let mut acc = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let dst = &mut grad_blocks[((o * 2 + i) * 2 + j) * hw..((o * 2 + i) * 2 + j + 1) * hw];
                for y in 0..h {
                    for x in 0..w {
                        let g = grad_out[(o * oh + 2 * y + i) * ow + 2 * x + j];
                        dst[y * w + x] = g;
                        acc += g.as_f64();
                    }
                }
            }
        }
        grad_bias[o] = T::from_f64(acc);
    }
    let mut grad_input = vec![T::zero(); cin * hw];
    T::gemm(cin, cout * 4, hw, kernels, false, &grad_blocks, false, &mut grad_input, T::zero());
    let mut grad_kernels = vec![T::zero(); cin * cout * 4];
    T::gemm(cin, hw, cout * 4, input, false, &grad_blocks, true, &mut grad_kernels, T::zero());
    (grad_input, grad_kernels, grad_bias)
}

/// Per-pixel softmax across the channel axis with max subtraction.
pub fn softmax_channels<T: Real>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for p in 0..hw {
        let mut m = input[p];
        for ch in 1..c {
            m = m.max(input[ch * hw + p]);
        }
        let mut total = T::zero();
        for ch in 0..c {
            let e = (input[ch * hw + p] - m).exp();
            out[ch * hw + p] = e;
            total = total + e;
        }
        for ch in 0..c {
            out[ch * hw + p] = out[ch * hw + p] / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f32], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((*x as f64 - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn single_precision_conv_matches_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(cin, cout, h, w, k) in &[(3, 8, 22, 30, 3), (6, 5, 14, 12, 3), (2, 4, 7, 6, 3), (4, 3, 10, 21, 2)] {
            let (ho, wo) = (h - k + 1, w - k + 1);
            let x: Vec<f64> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kr: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..cout * ho * wo).map(|_| rng.random_range(-1.0..1.0)).collect();
            let single = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
            let (xs, ks, bs, gs) = (single(&x), single(&kr), single(&b), single(&g));

            close(&conv2d_forward(&xs, cin, h, w, &ks, &bs, cout, k), &conv2d_forward(&x, cin, h, w, &kr, &b, cout, k), 1e-5);
            let (gi, gk, gb) = conv2d_backward(&gs, &xs, cin, h, w, &ks, cout, k);
            let (gi2, gk2, gb2) = conv2d_backward(&g, &x, cin, h, w, &kr, cout, k);
            close(&gi, &gi2, 1e-5);
            close(&gk, &gk2, 1e-4);
            close(&gb, &gb2, 1e-5);
        }
    }
}

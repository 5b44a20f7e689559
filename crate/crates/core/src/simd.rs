//! AVX2/FMA kernels for single-precision valid convolution.
//!
//! Both kernels read the input planes in place instead of unfolding them,
//! and keep a fixed summation order so results are reproducible.

use std::arch::x86_64::*;

/// Output channels per register block.
const MB: usize = 4;
/// Input taps per register block in the kernel gradient.
const RB: usize = 2;
/// Rows per cache band in the kernel gradient.
const BAND: usize = 8;

pub fn available() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

fn tap_offsets(cin: usize, h: usize, w: usize, k: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(cin * k * k);
    for c in 0..cin {
        for i in 0..k {
            for j in 0..k {
                offsets.push(c * h * w + i * w + j);
            }
        }
    }
    offsets
}

/// `out[o, y, x] = bias[o] + Σ kernels[o, c, i, j] · input[c, y+i, x+j]`,
/// overwriting `out`. Needs an output row of at least 8 and [`available`].
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kernels: &[f32],
    bias: &[f32],
    cout: usize,
    k: usize,
    out: &mut [f32],
) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let n = ho * wo;
    let ckk = cin * k * k;
    assert!(available() && wo >= 8);
    assert!(input.len() >= cin * h * w && kernels.len() == cout * ckk && bias.len() == cout && out.len() >= cout * n);
    let offsets = tap_offsets(cin, h, w, k);
    let mut packed = vec![0.0f32; ckk * MB];
    let mut o = 0;
    while o < cout {
        let mb = MB.min(cout - o);
        packed.fill(0.0);
        for m in 0..mb {
            for r in 0..ckk {
                packed[r * MB + m] = kernels[(o + m) * ckk + r];
            }
        }
        let mut b = [0.0f32; MB];
        b[..mb].copy_from_slice(&bias[o..o + mb]);
        // SAFETY: features checked above; every load stays below
        // offsets[r] + (ho-1)*w + wo <= cin*h*w and every store inside
        // rows o..o+mb of `out`.
        unsafe { forward_block(input, &offsets, &packed, &b, w, ho, wo, &mut out[o * n..], n, mb) };
        o += mb;
    }
}

#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_block(
    input: &[f32],
    offsets: &[usize],
    packed: &[f32],
    bias: &[f32; MB],
    w: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
    n: usize,
    mb: usize,
) {
    let wide = if wo >= 16 { 16 } else { 8 };
    let inp = input.as_ptr();
    let kp = packed.as_ptr();
    for y in 0..ho {
        let mut x0 = 0;
        while x0 < wo {
            // the last block is shifted left and recomputes a few columns
            let x = x0.min(wo - wide);
            let base = y * w + x;
            let mut acc = [[_mm256_setzero_ps(); 2]; MB];
            for (r, &off) in offsets.iter().enumerate() {
                let p = inp.add(off + base);
                let v0 = _mm256_loadu_ps(p);
                let v1 = if wide == 16 { _mm256_loadu_ps(p.add(8)) } else { v0 };
                for (m, a) in acc.iter_mut().enumerate() {
                    let kb = _mm256_broadcast_ss(&*kp.add(r * MB + m));
                    a[0] = _mm256_fmadd_ps(kb, v0, a[0]);
                    a[1] = _mm256_fmadd_ps(kb, v1, a[1]);
                }
            }
            for (m, a) in acc.iter().enumerate().take(mb) {
                let b = _mm256_set1_ps(bias[m]);
                let dst = out.as_mut_ptr().add(m * n + y * wo + x);
                _mm256_storeu_ps(dst, _mm256_add_ps(a[0], b));
                if wide == 16 {
                    _mm256_storeu_ps(dst.add(8), _mm256_add_ps(a[1], b));
                }
            }
            x0 = x + wide;
        }
    }
}

/// `gk[o, c, i, j] += Σ_{y,x} g[o, y, x] · input[c, y+i, x+j]` for a valid
/// convolution. Needs [`available`].
#[allow(clippy::too_many_arguments)]
pub fn conv_kernel_grad(g: &[f32], input: &[f32], cin: usize, h: usize, w: usize, cout: usize, k: usize, gk: &mut [f32]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let ckk = cin * k * k;
    assert!(available());
    assert!(g.len() >= cout * ho * wo && input.len() >= cin * h * w && gk.len() == cout * ckk);
    let offsets = tap_offsets(cin, h, w, k);
    for y0 in (0..ho).step_by(BAND) {
        let rows = BAND.min(ho - y0);
        let mut o = 0;
        while o < cout {
            let mo = if cout - o >= MB { MB } else { 1 };
            let mut r = 0;
            while r < ckk {
                let rb = if ckk - r >= RB { RB } else { 1 };
                // SAFETY: features checked above; loads stay inside rows
                // y0..y0+rows of g and below offsets[r] + (ho-1)*w + wo.
                let sums = unsafe {
                    match (mo, rb) {
                        (MB, RB) => grad_block::<MB, RB>(g, input, &offsets[r..], w, wo, ho * wo, o, y0, rows),
                        (MB, _) => grad_block::<MB, 1>(g, input, &offsets[r..], w, wo, ho * wo, o, y0, rows),
                        (_, RB) => grad_block::<1, RB>(g, input, &offsets[r..], w, wo, ho * wo, o, y0, rows),
                        _ => grad_block::<1, 1>(g, input, &offsets[r..], w, wo, ho * wo, o, y0, rows),
                    }
                };
                for m in 0..mo {
                    for q in 0..rb {
                        gk[(o + m) * ckk + r + q] += sums[m][q];
                    }
                }
                r += rb;
            }
            o += mo;
        }
    }
}

#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn grad_block<const M: usize, const R: usize>(
    g: &[f32],
    input: &[f32],
    offsets: &[usize],
    w: usize,
    wo: usize,
    n: usize,
    o: usize,
    y0: usize,
    rows: usize,
) -> [[f32; RB]; MB] {
    const LANES: [i32; 16] = [-1, -1, -1, -1, -1, -1, -1, -1, 0, 0, 0, 0, 0, 0, 0, 0];
    let tail = wo % 8;
    let mask = _mm256_loadu_si256(LANES.as_ptr().add(8 - tail) as *const __m256i);
    let gp = g.as_ptr().add(o * n);
    let inp = input.as_ptr();
    let mut acc = [[_mm256_setzero_ps(); R]; M];
    for y in y0..y0 + rows {
        let mut x = 0;
        while x < wo {
            let full = x + 8 <= wo;
            let mut gv = [_mm256_setzero_ps(); M];
            for (m, v) in gv.iter_mut().enumerate() {
                let p = gp.add(m * n + y * wo + x);
                *v = if full { _mm256_loadu_ps(p) } else { _mm256_maskload_ps(p, mask) };
            }
            for q in 0..R {
                let p = inp.add(offsets[q] + y * w + x);
                let iv = if full { _mm256_loadu_ps(p) } else { _mm256_maskload_ps(p, mask) };
                for m in 0..M {
                    acc[m][q] = _mm256_fmadd_ps(gv[m], iv, acc[m][q]);
                }
            }
            x += 8;
        }
    }
    let mut sums = [[0.0f32; RB]; MB];
    for m in 0..M {
        for q in 0..R {
            let mut lanes = [0.0f32; 8];
            _mm256_storeu_ps(lanes.as_mut_ptr(), acc[m][q]);
            sums[m][q] = lanes.iter().sum();
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[allow(clippy::too_many_arguments)]
    fn naive_forward(x: &[f32], cin: usize, h: usize, w: usize, kr: &[f32], b: &[f32], cout: usize, k: usize) -> Vec<f64> {
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = b[o] as f64;
                    for c in 0..cin {
                        for i in 0..k {
                            for j in 0..k {
                                s += kr[((o * cin + c) * k + i) * k + j] as f64 * x[(c * h + y + i) * w + xx + j] as f64;
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = s;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_naive_loops() {
        if !available() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(cin, cout, h, w, k) in &[(3, 8, 20, 27, 3), (5, 6, 12, 10, 3), (2, 3, 9, 40, 2), (4, 9, 30, 17, 3)] {
            let (ho, wo) = (h - k + 1, w - k + 1);
            let x = random(&mut rng, cin * h * w);
            let kr = random(&mut rng, cout * cin * k * k);
            let b = random(&mut rng, cout);
            let mut out = vec![f32::NAN; cout * ho * wo];
            conv_forward(&x, cin, h, w, &kr, &b, cout, k, &mut out);
            let want = naive_forward(&x, cin, h, w, &kr, &b, cout, k);
            for (a, e) in out.iter().zip(&want) {
                assert!((*a as f64 - e).abs() < 1e-4, "{a} vs {e}");
            }

            let g = random(&mut rng, cout * ho * wo);
            let mut gk = vec![0.5f32; cout * cin * k * k];
            conv_kernel_grad(&g, &x, cin, h, w, cout, k, &mut gk);
            for o in 0..cout {
                for c in 0..cin {
                    for i in 0..k {
                        for j in 0..k {
                            let mut s = 0.5f64;
                            for y in 0..ho {
                                for xx in 0..wo {
                                    s += g[(o * ho + y) * wo + xx] as f64 * x[(c * h + y + i) * w + xx + j] as f64;
                                }
                            }
                            let got = gk[((o * cin + c) * k + i) * k + j] as f64;
                            assert!((got - s).abs() < 1e-3, "{got} vs {s}");
                        }
                    }
                }
            }
        }
    }
}

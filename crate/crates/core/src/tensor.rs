//! Dense row-major tensors.
//!
//! Storage is generic over the scalar so the same kernels run in 32-bit for
//! training and in 64-bit when checking gradients against finite differences.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point scalar usable as tensor storage.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `C = A·B + beta·C` on contiguous row-major operands, `A` (or its
    /// transpose) `m×k`, `B` `k×n`, `C` `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_trans: bool, b: &[Self], b_trans: bool, c: &mut [Self], beta: Self) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        // stored shape of a: (m,k) or (k,m) when transposed
        let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
        let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
        Self::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n, beta);
    }

    /// Strided form of [`Real::gemm`]: element `(i, j)` of `A` is
    /// `a[i*rsa + j*csa]`, likewise for `B`, and `C` rows are `ldc` apart.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        ldc: usize,
        beta: Self,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Direct valid convolution, see [`crate::ops::conv2d_forward`]. Writes
    /// `out` and returns true when a specialized kernel handled the call.
    #[allow(clippy::too_many_arguments)]
    fn conv_forward_fast(
        _input: &[Self],
        _cin: usize,
        _h: usize,
        _w: usize,
        _kernels: &[Self],
        _bias: &[Self],
        _cout: usize,
        _k: usize,
        _out: &mut [Self],
    ) -> bool {
        false
    }

    /// Kernel gradient of a valid convolution added into `gk`; returns
    /// true when a specialized kernel handled the call.
    #[allow(clippy::too_many_arguments)]
    fn conv_kernel_grad_fast(
        _grad_out: &[Self],
        _input: &[Self],
        _cin: usize,
        _h: usize,
        _w: usize,
        _cout: usize,
        _k: usize,
        _gk: &mut [Self],
    ) -> bool {
        false
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path $(, $extra:item)*) => {
        impl Real for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                ldc: usize,
                beta: Self,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
                assert!(k == 0 || (a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb)));
                assert!(c.len() > last(m, n, ldc, 1));
                // SAFETY: the asserts above bound every index the kernel
                // reaches through these strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            $($extra)*
        }
    };
}

#[cfg(target_arch = "x86_64")]
impl_real!(
    f32,
    matrixmultiply::sgemm,
    fn conv_forward_fast(
        input: &[f32],
        cin: usize,
        h: usize,
        w: usize,
        kernels: &[f32],
        bias: &[f32],
        cout: usize,
        k: usize,
        out: &mut [f32],
    ) -> bool {
        if w - k + 1 < 8 || !crate::simd::available() {
            return false;
        }
        crate::simd::conv_forward(input, cin, h, w, kernels, bias, cout, k, out);
        true
    },
    fn conv_kernel_grad_fast(
        grad_out: &[f32],
        input: &[f32],
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        gk: &mut [f32],
    ) -> bool {
        if !crate::simd::available() {
            return false;
        }
        crate::simd::conv_kernel_grad(grad_out, input, cin, h, w, cout, k, gk);
        true
    }
);
#[cfg(not(target_arch = "x86_64"))]
impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense n-dimensional array. Layout is `(channels, height, width)` for
/// images and activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected rank-3 (C,H,W), got {:?}", self.shape))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }
}

/// Reflect an out-of-range index back into `0..n` without repeating the edge
/// sample: `-1 → 1`, `n → n-2`. Applied repeatedly for long overhangs.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(Tensor::<f32>::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn reflection_without_edge_duplication() {
        let row = [1, 2, 3];
        let ext: Vec<i32> = (-2..3).map(|i| row[reflect_index(i, 3)]).collect();
        assert_eq!(ext, vec![3, 2, 1, 2, 3]);
        assert_eq!(reflect_index(3, 3), 1);
        assert_eq!(reflect_index(4, 3), 0);
        assert_eq!(reflect_index(-7, 1), 0);
        // several periods away
        assert_eq!(reflect_index(-5, 3), 1);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

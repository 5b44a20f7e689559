//! Central finite differences, used as the oracle for reverse-mode gradients.

use crate::tensor::{Real, Tensor};

/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate of every tensor.
pub fn finite_diff_grad<T, F>(mut f: F, params: &[Tensor<T>], step: f64) -> Vec<Tensor<T>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let values = finite_diff_at(&mut f, params, &coords, step);
    let mut out: Vec<Tensor<T>> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (&(p, i), v) in coords.iter().zip(values) {
        out[p].data_mut()[i] = T::from_f64(v);
    }
    out
}

/// Central differences restricted to `(tensor, flat index)` coordinates.
pub fn finite_diff_at<T, F>(mut f: F, params: &[Tensor<T>], coords: &[(usize, usize)], step: f64) -> Vec<f64>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    let mut work: Vec<Tensor<T>> = params.to_vec();
    coords
        .iter()
        .map(|&(p, i)| {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = T::from_f64(orig.as_f64() + step);
            let plus = f(&work);
            work[p].data_mut()[i] = T::from_f64(orig.as_f64() - step);
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let x = vec![Tensor::<f64>::scalar(3.0)];
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &x, 1e-3);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = vec![Tensor::<f64>::full(&[4], 1.5)];
        let g = finite_diff_grad(|_| 42.0, &x, 1e-3);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }
}

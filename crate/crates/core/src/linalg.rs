//! Dense vector helpers over `[f64]` slices.
//!
//! Matrices in this crate are flat row-major `Vec<f64>` buffers; these helpers
//! keep the inner loops allocation-free.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `x^T M x` for a symmetric `d x d` row-major `M`.
pub fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    debug_assert_eq!(m.len(), d * d);
    m.chunks_exact(d)
        .zip(x)
        .map(|(row, xi)| xi * dot(row, x))
        .sum()
}

/// Max-abs of `a - b` relative to `1 + max|b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = 1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
        / scale
}

/// Magnitude below which gradient comparisons fall back to absolute error.
pub const GRAD_REL_FLOOR: f64 = 1e-3;

/// Central-difference gradient of `f` at `point`:
/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate.
pub fn finite_diff_grad<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    (0..point.len())
        .map(|i| {
            p[i] = point[i] + eps;
            let plus = f(&p);
            p[i] = point[i] - eps;
            let minus = f(&p);
            p[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, b)| rel_error(*a, *b)).fold(0.0, f64::max)
}

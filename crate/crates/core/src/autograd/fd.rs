//! Central finite differences, the reference every analytic gradient is
//! checked against.

/// `(f(x + h e_j) - f(x - h e_j)) / 2h` for every coordinate `j`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + step;
            let plus = f(&probe);
            probe[j] = x[j] - step;
            let minus = f(&probe);
            probe[j] = x[j];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `||a - b|| / max(||b||, ||a||, floor)`.
pub fn relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(reference).max(norm(analytic)).max(floor)
}

/// Largest relative disagreement between the analytic gradient returned by
/// `op` and central finite differences with step `epsilon`.
///
/// `op` maps an input vector to `(value, gradient)`. The relative error of
/// each coordinate is `|a - n| / max(|a|, |n|, 1e-6)`, so coordinates whose
/// gradient is essentially zero are compared absolutely.
pub fn gradient_check<F>(op: F, input: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = op(input);
    assert_eq!(analytic.len(), input.len(), "gradient length must match input");
    let mut x = input.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (fp, _) = op(&x);
        x[i] = orig - epsilon;
        let (fm, _) = op(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

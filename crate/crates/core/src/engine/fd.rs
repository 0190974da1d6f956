//! Finite-difference gradient verification.

/// Coordinates where both gradients are below this magnitude are masked.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdMode {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// Five-point stencil, fourth-order accurate.
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|)`, or zero when both are under [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

/// Finite-difference estimate of the gradient of `f` at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], step: f64, mode: FdMode) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |offset: f64| {
                probe[i] = x[i] + offset;
                let v = f(&probe);
                probe[i] = x[i];
                v
            };
            match mode {
                FdMode::Central => (at(step) - at(-step)) / (2.0 * step),
                FdMode::FivePoint => {
                    (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step)
                }
            }
        })
        .collect()
}

/// Compares `analytic` against finite differences of `f` at `x`.
pub fn fd_check<F>(f: F, x: &[f64], analytic: &[f64], step: f64, mode: FdMode) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length must match parameter length");
    let numeric = numeric_gradient(f, x, step, mode);
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > max_rel_error || e.is_nan() {
            max_rel_error = e;
            worst = Some(i);
        }
    }
    FdReport { max_rel_error, worst, numeric }
}

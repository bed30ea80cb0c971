//! Central finite-difference gradient checking.
//!
//! The numeric side evaluates the loss twice per coordinate and never
//! touches the tape, so it stays independent of the backward rules it
//! verifies.

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst relative error |analytic − numeric| / max(1, |numeric|).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Panics when any coordinate exceeds `tol`.
pub fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    let err = max_rel_err(analytic, numeric);
    assert!(
        err < tol,
        "{what}: finite-difference mismatch, max relative error {err:.3e} >= {tol:.1e}"
    );
}

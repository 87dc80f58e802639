use super::{Tape, Tensor, Var};
use crate::error::{GrocoError, Result};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Below this magnitude on both sides a coordinate is compared absolutely.
const ABS_FLOOR: f64 = 1e-10;

/// Per-coordinate comparison of an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub errors: Vec<f64>,
    pub worst: usize,
    pub max_error: f64,
    pub tol: f64,
    /// Magnitude below which coordinates are compared against the floor.
    pub floor: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn build(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64, floor: f64) -> Self {
        let errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error_with_floor(a, n, floor))
            .collect();
        let (worst, max_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        GradCheckReport {
            analytic,
            numeric,
            errors,
            worst,
            max_error,
            tol,
            floor,
            passed: max_error < tol,
        }
    }
}

/// `|a - n| / max(|a|, |n|)`, or `|a - n|` when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    if analytic.abs().max(numeric.abs()) < floor {
        (analytic - numeric).abs() / floor
    } else {
        relative_error(analytic, numeric)
    }
}

/// Smallest gradient magnitude central differences can resolve to relative
/// accuracy `tol`: evaluating `f` carries rounding of about `eps * |f|`,
/// which the difference quotient amplifies by `1 / h`.
pub fn resolution_floor(value: f64, h: f64, tol: f64) -> f64 {
    (f64::EPSILON * value.abs().max(1.0) / (h * tol)).max(ABS_FLOOR)
}

fn central_differences<F>(f: &F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GrocoError::numeric(
                None,
                format!("non-finite evaluation perturbing coordinate {i}"),
            ));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Compare `analytic` against central differences of `f` at `point`.
pub fn grad_check<F>(
    f: F,
    analytic: &[f64],
    point: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(GrocoError::invalid(format!(
            "step must be positive, got {h}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(GrocoError::invalid(
            "analytic gradient length differs from point",
        ));
    }
    let numeric = central_differences(&f, point, h)?;
    let floor = resolution_floor(f(point)?, h, tol);
    Ok(GradCheckReport::build(
        analytic.to_vec(),
        numeric,
        tol,
        floor,
    ))
}

/// Grad-check a scalar function recorded on a tape.
///
/// `build` receives a fresh tape and a leaf vector holding the point and
/// must return the scalar loss. The analytic gradient comes from
/// [`Tape::backward`]; every numeric evaluation re-records the forward pass.
/// `configure` is applied to the tape used for the analytic pass only (the
/// fault-injection hook goes there).
pub fn grad_check_tape<B, C>(
    build: B,
    configure: C,
    point: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, Var) -> Result<Var>,
    C: Fn(&mut Tape),
{
    let mut tape = Tape::new();
    configure(&mut tape);
    let x = tape.leaf(Tensor::vector(point.to_vec()));
    let loss = build(&mut tape, x)?;
    let analytic = tape.backward(loss)?.get(x).into_data();
    let f = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(p.to_vec()));
        let l = build(&mut t, x)?;
        Ok(t.value(l).item())
    };
    grad_check(f, &analytic, point, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check_tape(
            |t, x| t.mul(x, x).and_then(|y| t.sum(y)),
            |_| {},
            &[3.0],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!((r.analytic[0] - 6.0).abs() < 1e-12);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
        assert!(r.passed);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = grad_check(|x| Ok(x[0] * x[0]), &[5.0], &[3.0], 1e-6, 1e-5).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, 0);
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        assert!(grad_check(|x| Ok(x[0]), &[1.0], &[0.0], 0.0, 1e-5).is_err());
        assert!(matches!(
            grad_check(|_| Ok(f64::NAN), &[1.0], &[0.0], 1e-6, 1e-5),
            Err(GrocoError::Numeric { .. })
        ));
    }

    #[test]
    fn tiny_coordinates_compared_absolutely() {
        assert!((relative_error(1e-12, 3e-12) - 2e-12).abs() < 1e-24);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

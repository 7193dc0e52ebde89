use super::{AutodiffError, Tape, Tensor, Var};

/// Central-difference step used by [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative errors are measured against `max(|analytic|, |numeric|, RELATIVE_FLOOR)`
/// so that entries whose true gradient is zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub failure: Option<String>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`.
pub fn grad_check<F, E>(f: F, point: &Tensor, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError> + std::fmt::Display,
{
    grad_check_with_step(f, point, tol, DEFAULT_STEP)
}

pub fn grad_check_with_step<F, E>(f: F, point: &Tensor, tol: f64, step: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError> + std::fmt::Display,
{
    let failed = |msg: String| GradCheckReport {
        analytic: Vec::new(),
        numeric: Vec::new(),
        max_rel_error: f64::INFINITY,
        worst_index: 0,
        tol,
        passed: false,
        failure: Some(msg),
    };

    let analytic = match analytic_grad(&f, point) {
        Ok(g) => g,
        Err(e) => return failed(e.to_string()),
    };

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = match (evaluate(&f, plus), evaluate(&f, minus)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return failed(e.to_string()),
        };
        numeric.push((fp - fm) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });

    GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
        failure: None,
    }
}

fn evaluate<F, E>(f: &F, point: Tensor) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point)?;
    let out = f(&mut tape, x)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(AutodiffError::NotScalar(v.shape().to_vec()).into());
    }
    Ok(v.item())
}

fn analytic_grad<F, E>(f: &F, point: &Tensor) -> Result<Vec<f64>, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    Ok(tape.grad(x).map(<[f64]>::to_vec).unwrap_or_default())
}

//! Central-difference gradient verification.

use crate::error::{Result, TensorError};

/// One evaluation of the function under test.
#[derive(Clone, Debug)]
pub struct Probe {
    pub value: f64,
    /// Analytic gradient; only read at the base point.
    pub grad: Vec<f64>,
    /// Smooth-piece identifier, see [`crate::Graph::kink_signature`].
    pub kinks: u64,
}

impl Probe {
    pub fn smooth(value: f64, grad: Vec<f64>) -> Self {
        Self { value, grad, kinks: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates where every step size straddled a kink.
    pub skipped: usize,
}

/// `|a − n| / max(1e−12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-12)
}

/// `|a − n| / max(floor, |a| + |n|)`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Checks every coordinate of `point`.
pub fn gradcheck<F>(f: F, point: &[f64], h: f64) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    gradcheck_coords(f, point, h, &coords)
}

/// Checks the listed coordinates. When the ±h evaluations land on a
/// different smooth piece than the base point, the step is shrunk tenfold
/// (up to three times) before the coordinate is skipped.
pub fn gradcheck_coords<F>(f: F, point: &[f64], h: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    gradcheck_coords_floor(f, point, h, 1e-12, coords)
}

/// As [`gradcheck_coords`], with `floor` as the smallest denominator of the
/// relative error. Derivatives far below the rounding resolution of the
/// central difference (about `ε·|f|/h`) are then compared in absolute terms.
pub fn gradcheck_coords_floor<F>(mut f: F, point: &[f64], h: f64, floor: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if !(floor > 0.0) {
        return Err(TensorError::Argument(format!("error floor {floor} must be positive")));
    }
    if h <= 0.0 || !h.is_finite() {
        return Err(TensorError::Argument(format!("step size {h} must be positive")));
    }
    let base = f(point)?;
    if !base.value.is_finite() {
        return Err(TensorError::Numeric("function returned NaN at the base point".into()));
    }
    if base.grad.len() != point.len() {
        return Err(TensorError::Dimension(format!(
            "analytic gradient has {} entries for {} coordinates",
            base.grad.len(),
            point.len()
        )));
    }
    let mut report = GradcheckReport { max_rel_error: 0.0, worst_coord: None, checked: 0, skipped: 0 };
    let mut x = point.to_vec();
    for &i in coords {
        let mut step = h;
        let mut numeric = None;
        for _ in 0..4 {
            x[i] = point[i] + step;
            let plus = f(&x)?;
            x[i] = point[i] - step;
            let minus = f(&x)?;
            x[i] = point[i];
            if !plus.value.is_finite() || !minus.value.is_finite() {
                return Err(TensorError::Numeric(format!("function returned NaN near coordinate {i}")));
            }
            if plus.kinks == base.kinks && minus.kinks == base.kinks {
                numeric = Some((plus.value - minus.value) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        match numeric {
            Some(n) => {
                let err = relative_error_floor(base.grad[i], n, floor);
                report.checked += 1;
                if report.worst_coord.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_coord = Some(i);
                }
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

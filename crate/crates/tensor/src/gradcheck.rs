use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing autodiff against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / (autodiff.abs() + numeric.abs() + 1e-12)
}

/// `|a - n| / max(|a| + |n|, floor)`; `floor` absorbs finite-difference round-off.
pub fn floored_relative_error(autodiff: f64, numeric: f64, floor: f64) -> f64 {
    (autodiff - numeric).abs() / (autodiff.abs() + numeric.abs()).max(floor).max(1e-12)
}

/// Checks every coordinate of `x` for a scalar-valued `f`.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, step: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, &Var<E>) -> Result<Var<E>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, step, &all).map(|r| r.max_relative_error)
}

/// Like [`grad_check`] but restricted to the listed coordinates.
pub fn grad_check_at<E, F>(f: F, x: &Tensor<E>, step: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &Var<E>) -> Result<Var<E>>,
{
    check(f, x, step, coords, 0.0, false)
}

/// Like [`grad_check_at`] but with a five-point stencil and errors measured by
/// [`floored_relative_error`].
pub fn grad_check_floored<E, F>(f: F, x: &Tensor<E>, step: f64, coords: &[usize], floor: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &Var<E>) -> Result<Var<E>>,
{
    check(f, x, step, coords, floor, true)
}

fn check<E, F>(f: F, x: &Tensor<E>, step: f64, coords: &[usize], floor: f64, five_point: bool) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &Var<E>) -> Result<Var<E>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, &xv)?;
    if !y.value().all_finite() {
        return Err(TensorError::NonFinite("grad_check: f(x)".into()));
    }
    let grads = tape.backward(&y)?;
    let analytic = grads.get_or_zeros(&xv);
    if !analytic.all_finite() {
        return Err(TensorError::NonFinite("grad_check: autodiff gradient".into()));
    }

    let eval = |data: Vec<E>| -> Result<f64> {
        let t = Tape::no_grad();
        let v = t.constant(Tensor::from_vec(x.shape(), data)?);
        let out = f(&t, &v)?.value().item().f64();
        if out.is_finite() {
            Ok(out)
        } else {
            Err(TensorError::NonFinite("grad_check: perturbed f(x)".into()))
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        autodiff: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let base = x.to_vec();
    for &i in coords {
        let at = |h: f64| -> Result<f64> {
            let mut moved = base.clone();
            moved[i] = moved[i] + E::of(h);
            eval(moved)
        };
        let numeric = if five_point {
            (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step)
        } else {
            (at(step)? - at(-step)?) / (2.0 * step)
        };
        let a = analytic.data()[i].f64();
        let err = floored_relative_error(a, numeric, floor);
        if err > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: err,
                worst_index: i,
                autodiff: a,
                numeric,
                checked: coords.len(),
            };
        }
    }
    Ok(report)
}

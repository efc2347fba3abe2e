use serde::Serialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Lower bound on the relative-error denominator. Gradients smaller than this
/// are compared on an absolute scale, where central differences at
/// `h = 1e-5` carry round-off of order `1e-11`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries left out because a perturbed evaluation crossed a ReLU,
    /// PReLU or clamp break, where central differences are meaningless.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn checked_entries(&self) -> usize {
        self.params.iter().map(|p| p.len - p.skipped.len()).sum()
    }

    pub fn skipped_entries(&self) -> usize {
        self.params.iter().map(|p| p.skipped.len()).sum()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, values: &[Tensor], trainable: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values
        .iter()
        .map(|v| {
            if trainable {
                tape.param(v.clone())
            } else {
                tape.constant(v.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let loss = tape.value(out);
    if loss.shape() != (1, 1) {
        return Err(Error::ShapeMismatch {
            op: "gradcheck",
            left: loss.shape(),
            right: (1, 1),
        });
    }
    if !loss.to_scalar().is_finite() {
        return Err(Error::NonFinite { op: "gradcheck" });
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of a scalar computation against central finite
/// differences, entry by entry.
///
/// `f` must rebuild the same computation from the supplied leaves on every
/// call; any randomness has to be frozen outside it.
///
/// An entry is skipped when either perturbed evaluation changes the
/// [`Tape::kink_pattern`] of the unperturbed one. Skipped indices are listed
/// in the report so callers can bound how many there are.
pub fn gradcheck<F>(params: &[(String, Tensor)], f: F, step: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, out) = evaluate(&f, &values, true)?;
    let loss = tape.value(out).to_scalar();
    let grads = tape.backward(out)?;
    let pattern = tape.kink_pattern();

    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, original)) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[p], original);
        let mut worst: Option<(f64, usize, f64, f64)> = None;
        let mut skipped = Vec::new();
        for k in 0..original.len() {
            let base = original.data()[k];
            values[p].data_mut()[k] = base + step;
            let (t1, _, o1) = evaluate(&f, &values, false)?;
            values[p].data_mut()[k] = base - step;
            let (t2, _, o2) = evaluate(&f, &values, false)?;
            values[p].data_mut()[k] = base;
            if t1.kink_pattern() != pattern || t2.kink_pattern() != pattern {
                skipped.push(k);
                continue;
            }
            let numeric = (t1.value(o1).to_scalar() - t2.value(o2).to_scalar()) / (2.0 * step);
            let a = analytic.data()[k];
            let err = relative_error(a, numeric);
            if worst.is_none_or(|w| err > w.0) {
                worst = Some((err, k, a, numeric));
            }
        }
        let worst = worst.unwrap_or((0.0, 0, 0.0, 0.0));
        checks.push(ParamCheck {
            name: name.clone(),
            len: original.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            analytic: worst.2,
            numeric: worst.3,
            skipped,
        });
    }
    Ok(GradcheckReport {
        loss,
        params: checks,
    })
}

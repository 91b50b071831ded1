use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / (|numeric| + 1e-12)` over coordinates.
    pub max_rel_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone())?;
    let y = f(&tape, leaf)?.item();
    if !y.is_finite() {
        return Err(AutodiffError::NonFinite { op: "check_grad" });
    }
    Ok(y)
}

/// Check the tape gradient of scalar `f` at `x` against central
/// differences with step `eps`.
pub fn check_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone())?;
        let y = f(&tape, leaf)?;
        tape.gradient_values(y, &[leaf])?.remove(0)
    };
    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * eps);
    }
    let numeric = Tensor::new(x.shape().to_vec(), numeric)?;
    let max_rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}

/// `max_i |a_i - n_i| / (|n_i| + 1e-12)`
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max)
}

//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it shares nothing
//! with the backward rules it checks.

use super::{AutodiffError, Tape, Tensor, Var};

/// Denominator floor for the relative error; keeps entries whose true
/// gradient is ~0 from being judged on fp64 round-off alone.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` against
/// central differences with step `h` on every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("param leaf")).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data()[ei], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

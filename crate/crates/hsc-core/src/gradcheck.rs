//! Finite-difference validation of tape gradients.
//!
//! The numeric side is a centered difference of the scalar objective, built
//! by re-running the forward closure on perturbed copies of the inputs. It
//! never touches the analytic backward pass, so the two sides stay
//! independent.

use crate::error::Result;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all inputs and elements.
    pub max_rel_err: f64,
    /// Input index and element index where it occurred.
    pub worst: (usize, usize),
    /// Analytic and numeric values at the worst element.
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients of `f` (a scalar-valued forward pass over the
/// given inputs) against centered finite differences with step `eps`.
///
/// Relative error uses `|a - n| / max(|a|, |n|, 1e-3)` so that near-zero
/// gradients are judged on an absolute scale.
pub fn gradcheck<F>(inputs: &[(Vec<f64>, Vec<usize>)], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(d.clone(), s.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(*v).len()]))
        .collect();

    let eval = |probe: &[(Vec<f64>, Vec<usize>)]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe
            .iter()
            .map(|(d, s)| t.leaf(d.clone(), s.clone(), false))
            .collect::<Result<_>>()?;
        let o = f(&mut t, &vs)?;
        Ok(t.value(o))
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut probe: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
    for (ii, (data, _)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let h = eps * data[ei].abs().max(1.0);
            probe[ii].0[ei] = data[ei] + h;
            let fp = eval(&probe)?;
            probe[ii].0[ei] = data[ei] - h;
            let fm = eval(&probe)?;
            probe[ii].0[ei] = data[ei];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst: (ii, ei), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

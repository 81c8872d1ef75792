//! Central finite-difference gradient checking in `f64`.

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the function is not smooth there
    /// (the step straddles a kink such as relu at 0).
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `f(inputs)` with central differences.
///
/// `f` builds a scalar from the supplied leaves. At most `max_coords`
/// coordinates per input are probed (evenly strided). A coordinate whose
/// difference quotients at `step` and `step / 2` disagree by more than
/// `kink_tol` is counted as skipped rather than checked.
pub fn check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: usize,
    kink_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(false)))
            .collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let n = inputs[which].numel();
        let zeros = vec![0.0; n];
        let analytic = g.grad(v).unwrap_or(&zeros).to_vec();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = inputs[which].data()[i];
            let mut at = |x: f64| -> Result<f64> {
                probe[which].data_mut()[i] = x;
                eval(&probe)
            };
            let fd = (at(x0 + step)? - at(x0 - step)?) / (2.0 * step);
            let fd_half = (at(x0 + step / 2.0)? - at(x0 - step / 2.0)?) / step;
            probe[which].data_mut()[i] = x0;
            if relative_error(fd, fd_half) > kink_tol {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], fd));
        }
    }
    Ok(report)
}

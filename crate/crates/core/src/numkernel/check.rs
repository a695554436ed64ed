//! Central finite-difference gradient oracle.
//!
//! Only forward evaluations are used on the numeric side, so the check stays
//! independent of the backward pass it validates.

use super::{Graph, KernelError, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

/// Entries whose analytic and numeric gradients are both below this magnitude
/// are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// Compares `backward` gradients of the scalar built by `loss` against central
/// differences with step `h`, over every entry of every parameter.
pub fn gradient_check<F>(params: &[Tensor], h: f64, loss: F) -> Result<GradCheck, KernelError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, KernelError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let vars = ps.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, entries: 0 };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.entries += 1;
        }
    }
    Ok(report)
}

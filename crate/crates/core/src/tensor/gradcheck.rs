use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// elements where either magnitude exceeds `abs_tol`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.scalar(out)
}

/// Compares the graph's gradients of the scalar `f` with respect to every
/// element of every input against central finite differences.
///
/// An element fails when `|a - n| > abs_tol + rel_tol * max(|a|, |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], rel_tol: f64, abs_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Rank {
            op: "grad_check",
            shape: g.shape(out).to_vec(),
        });
    }
    g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).map(<[f64]>::to_vec).unwrap_or_default();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(j).copied().unwrap_or(0.0);
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(diff);
            if scale > abs_tol {
                report.max_rel_error = report.max_rel_error.max(diff / scale);
            }
            if diff > abs_tol + rel_tol * scale {
                report.failures.push(GradFailure {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

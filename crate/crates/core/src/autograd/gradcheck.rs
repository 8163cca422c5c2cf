//! Central-difference gradient checking.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor4;

/// Outcome of comparing analytic gradients against central differences.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per checked input, in input order.
    pub max_rel_err: Vec<f64>,
    /// `(input, flat index)` of the overall worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub eps: f64,
    pub tolerance: f64,
    /// First coordinate at which the function produced a non-finite value.
    pub non_finite_at: Option<(usize, usize)>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn overall_max(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks the gradient of the scalar `f(graph, inputs)` with respect to every
/// coordinate of every tensor in `inputs`.
///
/// `f` is called once on a recording graph for the analytic gradient and
/// twice per coordinate on no-grad graphs.
pub fn finite_diff_check<F>(
    mut f: F,
    inputs: &[Tensor4<f64>],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(crate::Error::contract(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let analytic_loss = g.value(loss).data()[0];
    let grads = g.backward(loss)?;

    let mut eval = |xs: &[Tensor4<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: vec![0.0; inputs.len()],
        worst: None,
        eps,
        tolerance,
        non_finite_at: None,
        passed: true,
    };
    if !analytic_loss.is_finite() {
        report.non_finite_at = Some((0, 0));
        report.passed = false;
        return Ok(report);
    }

    let mut worst = -1.0;
    let mut xs: Vec<Tensor4<f64>> = inputs.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?.clone();
        for i in 0..inputs[p].numel() {
            let orig = xs[p].data()[i];
            xs[p].data_mut()[i] = orig + eps;
            let plus = eval(&xs)?;
            xs[p].data_mut()[i] = orig - eps;
            let minus = eval(&xs)?;
            xs[p].data_mut()[i] = orig;

            let a = analytic.data()[i];
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite_at.get_or_insert((p, i));
                report.passed = false;
                continue;
            }
            let e = rel_err(a, numeric);
            if e > report.max_rel_err[p] {
                report.max_rel_err[p] = e;
            }
            if e > worst {
                worst = e;
                report.worst = Some((p, i));
            }
        }
    }
    report.passed &= report.max_rel_err.iter().all(|&e| e < tolerance);
    Ok(report)
}

/// Single-input form of [`finite_diff_check`] with the default tolerance of
/// `1e-5`.
pub fn check_gradient<F>(mut f: F, x: &Tensor4<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, 1e-5)
}

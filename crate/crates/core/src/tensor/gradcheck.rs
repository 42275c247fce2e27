use super::{Graph, Tensor, Var};
use crate::error::{CastError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat entry index) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` receives a fresh graph and one leaf per entry of `params` (in the same
/// order) and must return a scalar loss. It is called once for the analytic pass
/// and twice per parameter entry for the numeric pass.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(CastError::DomainError(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(CastError::NotScalar(v.shape().to_vec()));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(CastError::NumericalFailure("loss is non-finite at a perturbed point".into()));
        }
        Ok(x)
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every param leaf has a gradient entry");
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, e));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

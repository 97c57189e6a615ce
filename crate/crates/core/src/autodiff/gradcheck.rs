use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the gradient of the scalar built by `f` with respect to `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar. It is called once with trainable leaves and twice per coordinate
/// with perturbed constant leaves, so it has to be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Usage(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let report = grad_check(|g, p| g.square(p[0]), &[Tensor::scalar(1.5)], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.worst, Some((0, 0)));
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // clamp has a zero gradient where it saturates, but the numeric
        // derivative straddling the boundary is not zero.
        let report = grad_check(
            |g, p| {
                let c = g.clamp(p[0], -1.0, 1.0)?;
                g.sum(c)
            },
            &[Tensor::vector(vec![0.3, 1.0])],
            1e-3,
        )
        .unwrap();
        assert_eq!(report.worst, Some((0, 1)));
        assert!(!report.passes(1e-3));
    }

    #[test]
    fn epsilon_range_enforced() {
        assert!(grad_check(|g, p| g.square(p[0]), &[Tensor::scalar(1.0)], 0.1).is_err());
        assert!(grad_check(|g, p| g.square(p[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}

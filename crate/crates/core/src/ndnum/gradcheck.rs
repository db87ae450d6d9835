//! Central-difference verification of reverse-mode gradients.

use super::{Gradients, Graph, NdError, Result, Var};

/// Outcome of a finite-difference sweep over every coordinate of the checked
/// inputs.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input handle and flat coordinate where the worst error occurred.
    pub worst: Option<(Var, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare analytic gradients of `output` against central differences for
/// every coordinate of each tensor in `wrt`.
///
/// Relative error uses `|a - n| / max(1, |a|, |n|)`, so coordinates where both
/// sides vanish count as exact. The graph is restored to its original state
/// before returning.
pub fn grad_check(
    graph: &mut Graph,
    output: Var,
    wrt: &[Var],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(NdError::Structural(format!(
            "finite-difference step {step} outside [1e-6, 1e-3]"
        )));
    }
    if graph.value(output).numel() != 1 {
        return Err(NdError::NonScalarOutput(
            graph.value(output).shape().to_vec(),
        ));
    }

    let analytic: Gradients = graph.backward(output)?;
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;

    for &v in wrt {
        let base = graph.value(v).data().to_vec();
        let agrad: Vec<f64> = match analytic.wrt(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; base.len()],
        };
        for coord in 0..base.len() {
            graph.nudge_input(v, coord, base[coord] + step)?;
            graph.forward()?;
            let plus = graph.value(output).item();

            graph.nudge_input(v, coord, base[coord] - step)?;
            graph.forward()?;
            let minus = graph.value(output).item();

            graph.nudge_input(v, coord, base[coord])?;

            let numeric = (plus - minus) / (2.0 * step);
            let a = agrad[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((v, coord));
            }
        }
    }
    graph.forward()?;

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn quadratic_form_is_tight() {
        // f(x) = x . (A x), gradient (A + A^T) x
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.5, -1.2, 2.0]).with_grad());
        let a = g.constant(
            Tensor::new(
                vec![3, 3],
                vec![2.0, 0.3, -0.1, 0.3, 1.5, 0.4, -0.1, 0.4, 3.0],
            )
            .unwrap(),
        );
        let ax = g.matmul(a, x).unwrap();
        let f = g.dot(x, ax).unwrap();
        let report = grad_check(&mut g, f, &[x], 1e-5, 1e-7).unwrap();
        assert!(report.passed, "rel error {}", report.max_rel_error);
    }

    #[test]
    fn zero_function_has_zero_gradients() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let z = g.scale(x, 0.0).unwrap();
        let f = g.sum(z).unwrap();
        let report = grad_check(&mut g, f, &[x], 1e-5, 1e-12).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0).with_grad());
        let f = g.mul(x, x).unwrap();
        assert!(grad_check(&mut g, f, &[x], 1e-2, 1e-4).is_err());
        assert!(grad_check(&mut g, f, &[x], 1e-8, 1e-4).is_err());
    }
}

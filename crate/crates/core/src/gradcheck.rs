//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Central-difference gradient check over every element of `params`.
///
/// `f` receives a fresh graph plus one leaf per parameter and must return a
/// scalar. The relative error of each element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_steps(f, params, &[eps])
}

/// Like [`grad_check`], but each element is compared at every step in
/// `steps` and keeps its best agreement. Near a kink (ReLU, attention mask
/// boundaries) only steps that straddle it are biased, so a second, much
/// smaller step keeps such elements checkable.
pub fn grad_check_steps<F>(f: F, params: &[Tensor<f64>], steps: &[f64]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let selection: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    check_selected(&f, params, steps, &selection)
}

/// Like [`grad_check`], but checks at most `per_param` randomly chosen
/// elements of each parameter.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = SeededRng::new(seed);
    let selection: Vec<Vec<usize>> = params
        .iter()
        .map(|p| rng.sample_sorted(p.numel(), per_param))
        .collect();
    check_selected(&f, params, &[eps], &selection)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

fn check_selected<F>(
    f: &F,
    params: &[Tensor<f64>],
    steps: &[f64],
    selection: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, elems) in selection.iter().enumerate() {
        for &ei in elems {
            let orig = work[pi].data()[ei];
            let a = analytic[pi].data()[ei];
            let mut rel = f64::INFINITY;
            for &eps in steps {
                work[pi].data_mut()[ei] = orig + eps;
                let plus = evaluate(f, &work)?;
                work[pi].data_mut()[ei] = orig - eps;
                let minus = evaluate(f, &work)?;
                work[pi].data_mut()[ei] = orig;

                let numeric = (plus - minus) / (2.0 * eps);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                rel = rel.min((a - numeric).abs() / denom);
            }
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = grad_check(
            |g, p| {
                let x = p[0];
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[Tensor::full(&[3], 1.0)],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked, 3);
    }
}

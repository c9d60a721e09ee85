use super::graph::{Graph, Var};
use super::matrix::Matrix;
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::EvaluationFailure(format!(
            "objective evaluated to {v}"
        )));
    }
    Ok(v)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of the scalar `f` over every entry of `params`.
///
/// The relative error of an entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_diff_check_strided(f, params, step, 1)
}

/// Like [`finite_diff_check`] but probes only every `stride`-th entry of each
/// parameter (always including entry 0). Useful for large models.
pub fn finite_diff_check_strided<F>(f: F, params: &[Matrix], step: f64, stride: usize) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let stride = stride.max(1);
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::EvaluationFailure("objective is not finite".into()));
    }
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(params[p].rows(), params[p].cols()));
        for k in (0..params[p].len()).step_by(stride) {
            let orig = params[p].as_slice()[k];
            work[p].as_mut_slice()[k] = orig + step;
            let hi = evaluate(&f, &work)?;
            work[p].as_mut_slice()[k] = orig - step;
            let lo = evaluate(&f, &work)?;
            work[p].as_mut_slice()[k] = orig;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic.as_slice()[k];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let p = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let err = finite_diff_check(|g, v| Ok(g.sum(v[0])), &[p], 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn half_squared_norm() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let sq = g.square(v);
        let s = g.sum(sq);
        let h = g.scale(s, 0.5);
        let grads = g.backward(h).unwrap();
        assert_eq!(grads.get(v).unwrap(), &x);
        let err = finite_diff_check(
            |g, v| {
                let sq = g.square(v[0]);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_fails() {
        let x = Matrix::from_rows(&[[-1.0]]);
        let r = finite_diff_check(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &[x],
            1e-4,
        );
        assert!(matches!(r, Err(Error::EvaluationFailure(_))));
    }
}

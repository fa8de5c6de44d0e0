use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::DiffError;

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn compare_gradients<F>(
    analytic: &[Tensor],
    params: &[Tensor],
    eps: f64,
    mut f: F,
) -> Result<GradCheck, DiffError>
where
    F: FnMut(&[Tensor]) -> Result<f64, DiffError>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(DiffError::InvalidArgument("eps must be positive"));
    }
    if analytic.len() != params.len() {
        return Err(DiffError::InvalidArgument(
            "gradient/parameter count mismatch",
        ));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
    };
    for p in 0..work.len() {
        analytic[p].check_same("compare_gradients", &params[p])?;
        for k in 0..work[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let plus = f(&work)?;
            work[p].data_mut()[k] = orig - eps;
            let minus = f(&work)?;
            work[p].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(DiffError::NonFinite("finite_diff_check objective"));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[p].data()[k], numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((p, k));
            }
        }
    }
    Ok(report)
}

/// Gradients of the scalar built by `build` with respect to `params`.
pub fn analytic_gradients<F>(build: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>), DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, ids.iter().map(|&id| g.grad(id).clone()).collect()))
}

/// Max relative error between the reverse-mode gradient of `build` and central
/// differences of the same objective.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let (value, analytic) = analytic_gradients(&build, params)?;
    if !value.is_finite() {
        return Err(DiffError::NonFinite("finite_diff_check objective"));
    }
    let report = compare_gradients(&analytic, params, eps, |ps| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    })?;
    Ok(report.max_rel_err)
}

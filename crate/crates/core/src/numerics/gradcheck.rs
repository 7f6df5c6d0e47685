//! Central finite-difference gradient checking against tape gradients.

use super::{Graph, NodeId, NumericsError, Tensor};

/// Denominator floor for the relative error. Below this magnitude the
/// comparison is effectively absolute: a central difference of an O(1)
/// loss carries rounding noise of roughly 1e-12 to 1e-10, so gradients
/// that are exactly zero (a key bias under softmax, for instance) must
/// still compare cleanly against it.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks every coordinate of every tensor in `params`.
///
/// `f` must build a scalar loss from the parameter nodes it is given; it is
/// called once with a tape for the analytic gradient and twice per
/// coordinate for the central difference `(f(x+eps) − f(x−eps)) / 2eps`.
pub fn grad_check<F, E>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    check_coords(f, params, eps, |_, len| (0..len).collect())
}

/// Like [`grad_check`] but checks at most `per_tensor` evenly spaced
/// coordinates of each tensor. Used for models too large to sweep fully.
pub fn grad_check_sampled<F, E>(f: F, params: &[Tensor], eps: f64, per_tensor: usize) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    check_coords(f, params, eps, |t, len| {
        if len <= per_tensor {
            return (0..len).collect();
        }
        // Offset by the tensor index so equal-shaped tensors probe
        // different coordinates.
        let stride = len / per_tensor;
        (0..per_tensor).map(|i| (i * stride + t) % len).collect()
    })
}

fn evaluate<F, E>(f: &F, params: &[Tensor]) -> Result<f64, E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p, false)).collect();
    let loss = f(&mut g, &ids)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(NumericsError::NonScalarLoss {
            shape: v.shape().to_vec(),
        }
        .into());
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite {
            what: "loss during finite differencing".into(),
        }
        .into());
    }
    Ok(v)
}

fn check_coords<F, E>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords: impl Fn(usize, usize) -> Vec<usize>,
) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p, true)).collect();
        let loss = f(&mut g, &ids)?;
        let grads = g.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(id, p)| grads.get_or_zeros(*id, p.len()))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (t, param) in params.iter().enumerate() {
        for c in coords(t, param.len()) {
            let orig = param.data()[c];
            work[t].data_mut()[c] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[t].data_mut()[c] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, c));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

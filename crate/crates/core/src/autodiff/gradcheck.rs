use super::{AdError, Graph, NodeId, Param, Tensor};

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh graph and the registered parameter handles and
/// returns the scalar root. Returns the maximum over all parameter entries
/// of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], step: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Graph, &[Param]) -> Result<NodeId, AdError>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Param>, NodeId), AdError> {
        let mut g = Graph::new();
        let handles: Vec<Param> = values.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &handles)?;
        Ok((g, handles, root))
    };
    let (g, handles, root) = eval(params)?;
    let grads = g.backward(root)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, handle) in handles.iter().enumerate() {
        let analytic = grads.get(handle);
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let (gp, _, rp) = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let (gm, _, rm) = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * step);
            let err = (analytic.data()[j] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

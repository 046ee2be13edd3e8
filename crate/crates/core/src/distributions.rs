//! Gaussian primitives and log-space utilities, both as graph nodes and as
//! plain scalar helpers.

use std::f64::consts::PI;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// `½·ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_positive(g: &Graph, var: NodeId, what: &str) -> Result<()> {
    if let Some(v) = g.value(var).data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("{what}: non-positive variance {v}")));
    }
    Ok(())
}

/// `mean + sqrt(var) * eps`, differentiable in `mean` and `var`.
pub fn reparam_sample(g: &mut Graph, mean: NodeId, var: NodeId, eps: &Tensor) -> Result<NodeId> {
    check_positive(g, var, "reparam_sample")?;
    let sd = g.sqrt(var)?;
    let e = g.constant(eps.clone());
    let scaled = g.mul(sd, e)?;
    Ok(g.add(mean, scaled)?)
}

/// Elementwise `-½·ln(2π·var) - (y - mean)² / (2·var)` with broadcasting.
pub fn gaussian_log_pdf(g: &mut Graph, y: NodeId, mean: NodeId, var: NodeId) -> Result<NodeId> {
    check_positive(g, var, "gaussian_log_pdf")?;
    let d = g.sub(y, mean)?;
    let sq = g.square(d)?;
    let q = g.div(sq, var)?;
    let q = g.scale(q, -0.5)?;
    let lv = g.log(var)?;
    let lv = g.scale(lv, -0.5)?;
    let lv = g.add_scalar(lv, -HALF_LN_2PI)?;
    Ok(g.add(q, lv)?)
}

/// `log(mean(exp(x)))` along `axis`, computed with a max shift.
pub fn log_mean_exp(g: &mut Graph, x: NodeId, axis: usize) -> Result<NodeId> {
    let n = *g.shape(x).get(axis).ok_or_else(|| {
        Error::InvalidArgument(format!("log_mean_exp: axis {axis} out of range"))
    })?;
    if n == 0 {
        return Err(Error::InvalidArgument("log_mean_exp: empty axis".into()));
    }
    let lse = g.logsumexp_axis(x, axis)?;
    Ok(g.add_scalar(lse, -(n as f64).ln())?)
}

pub fn normal_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_mean_exp_slice(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

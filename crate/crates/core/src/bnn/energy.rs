use crate::autodiff::{Graph, NodeId, Param, Tensor};
use crate::distributions::{gaussian_log_pdf, log_mean_exp, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::RngStream;

use super::{BnnArchitecture, ModelHyperparams, VariationalPosterior, VB_ALPHA};

/// Posterior parameters placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundPosterior {
    pub w_mean: Vec<NodeId>,
    pub w_logvar: Vec<NodeId>,
    pub z_mean: NodeId,
    pub z_logvar: NodeId,
    pub log_noise: NodeId,
    pub learn_z: bool,
    /// Trainable leaves in registration order: weight means, weight
    /// log-variances, then `z` means and log-variances and the log noise
    /// when those are trained.
    pub params: Vec<Param>,
}

pub fn bind(
    g: &mut Graph,
    q: &VariationalPosterior,
    log_noise: &Tensor,
    learn_z: bool,
    learn_noise: bool,
) -> BoundPosterior {
    let mut params = Vec::new();
    let mut leaf = |g: &mut Graph, t: &Tensor, trainable: bool| {
        if trainable {
            let p = g.param(t.clone());
            params.push(p);
            p.node
        } else {
            g.constant(t.clone())
        }
    };
    let w_mean = q.w_mean.iter().map(|t| leaf(g, t, true)).collect();
    let w_logvar = q.w_logvar.iter().map(|t| leaf(g, t, true)).collect();
    let z_mean = leaf(g, &q.z_mean, learn_z);
    let z_logvar = leaf(g, &q.z_logvar, learn_z);
    let log_noise = leaf(g, log_noise, learn_noise);
    BoundPosterior { w_mean, w_logvar, z_mean, z_logvar, log_noise, learn_z, params }
}

/// Standard-normal draws behind one energy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyNoise {
    /// Per layer, `[K, out, in + 1]`.
    pub w: Vec<Tensor>,
    /// `[K, B]`.
    pub z: Tensor,
}

impl EnergyNoise {
    pub fn draw(arch: &BnnArchitecture, k: usize, batch: usize, stream: &mut RngStream) -> Self {
        let w = arch.layer_shapes().iter().map(|&(o, i)| stream.standard_normal(&[k, o, i])).collect();
        let z = stream.standard_normal(&[k, batch]);
        Self { w, z }
    }

    pub fn samples(&self) -> usize {
        self.z.shape()[0]
    }
}

/// Rows of the normalized training set with their global indices.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub rows: &'a [usize],
}

fn std_from_logvar(g: &mut Graph, lv: NodeId) -> Result<NodeId> {
    let h = g.scale(lv, 0.5)?;
    Ok(g.exp(h)?)
}

/// Reparameterized weights `m + exp(lv / 2) * eps`, one node per layer.
pub fn sample_weights(g: &mut Graph, q: &BoundPosterior, eps: &[Tensor]) -> Result<Vec<NodeId>> {
    if eps.len() != q.w_mean.len() {
        return Err(Error::InvalidArgument(format!(
            "{} noise tensors for {} layers",
            eps.len(),
            q.w_mean.len()
        )));
    }
    let mut out = Vec::with_capacity(eps.len());
    for ((&m, &lv), e) in q.w_mean.iter().zip(&q.w_logvar).zip(eps) {
        let sd = std_from_logvar(g, lv)?;
        let e = g.constant(e.clone());
        let s = g.mul(sd, e)?;
        out.push(g.add(m, s)?);
    }
    Ok(out)
}

/// `(log q(W) - log p(W)) / N` for each sample along axis 0 of the weights.
pub fn log_site_w(
    g: &mut Graph,
    weights: &[NodeId],
    q: &BoundPosterior,
    lambda: f64,
    n: usize,
) -> Result<NodeId> {
    if n == 0 {
        return Err(Error::InvalidArgument("log_site_w: N must be at least 1".into()));
    }
    let zero = g.scalar(0.0);
    let prior_var = g.scalar(lambda);
    let mut total: Option<NodeId> = None;
    for ((&w, &m), &lv) in weights.iter().zip(&q.w_mean).zip(&q.w_logvar) {
        let shape = g.shape(w).to_vec();
        let (k, per) = match shape.as_slice() {
            [o, i] => (1, o * i),
            [k, o, i] => (*k, o * i),
            _ => return Err(Error::InvalidArgument(format!("log_site_w: weight shape {shape:?}"))),
        };
        let var = g.exp(lv)?;
        let lq = gaussian_log_pdf(g, w, m, var)?;
        let lp = gaussian_log_pdf(g, w, zero, prior_var)?;
        let d = g.sub(lq, lp)?;
        let d = g.reshape(d, &[k, per])?;
        let s = g.sum_axis(d, 1)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("log_site_w: no layers".into()))?;
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Elementwise `log q(z) - log p(z)` with `q = N(m, exp(lv))`, `p = N(0, gamma)`.
pub fn log_site_z(g: &mut Graph, z: NodeId, m: NodeId, lv: NodeId, gamma: f64) -> Result<NodeId> {
    let var = g.exp(lv)?;
    let lq = gaussian_log_pdf(g, z, m, var)?;
    let zero = g.scalar(0.0);
    let pv = g.scalar(gamma);
    let lp = gaussian_log_pdf(g, z, zero, pv)?;
    Ok(g.sub(lq, lp)?)
}

fn log_normalizer_sum(g: &mut Graph, m: NodeId, lv: NodeId) -> Result<NodeId> {
    let n = g.value(m).len() as f64;
    let neg = g.neg(lv)?;
    let prec = g.exp(neg)?;
    let m2 = g.square(m)?;
    let q = g.mul(m2, prec)?;
    let t = g.add(lv, q)?;
    let s = g.sum_all(t)?;
    let s = g.scale(s, 0.5)?;
    Ok(g.add_scalar(s, n * HALF_LN_2PI)?)
}

/// Sum over all factors of `½ log(2πv) + m² / (2v)`.
pub fn log_zq(g: &mut Graph, q: &BoundPosterior) -> Result<NodeId> {
    let mut total = log_normalizer_sum(g, q.z_mean, q.z_logvar)?;
    for (&m, &lv) in q.w_mean.iter().zip(&q.w_logvar) {
        let s = log_normalizer_sum(g, m, lv)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Log-normalizer of the prior over all weights and `n` disturbances.
pub fn log_z_prior(arch: &BnnArchitecture, n: usize, lambda: f64, gamma: f64) -> f64 {
    let w = arch.num_weights() as f64;
    0.5 * w * (2.0 * std::f64::consts::PI * lambda).ln()
        + 0.5 * n as f64 * (2.0 * std::f64::consts::PI * gamma).ln()
}

/// Black-box alpha energy on a minibatch.
///
/// Returns `-(1/alpha)(N/|B|) sum_n log mean_k exp(alpha r_nk) - log Z_prior`
/// with `r_nk = log p(y_n | W_k, x_n, z_nk) - log_site_w(W_k) - log_site_z(z_nk)`.
/// This is the energy written with exponential-family sites, after the
/// `log Z_q` terms cancel against the site normalizers.
pub fn energy_alpha(
    g: &mut Graph,
    arch: &BnnArchitecture,
    q: &BoundPosterior,
    batch: Batch<'_>,
    n_total: usize,
    hyper: &ModelHyperparams,
    noise: &EnergyNoise,
) -> Result<NodeId> {
    let alpha = hyper.alpha;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}; use the VB preset (alpha = {VB_ALPHA:e})"
        )));
    }
    let b = batch.rows.len();
    let k = noise.samples();
    if b == 0 {
        return Err(Error::InvalidArgument("energy: empty minibatch".into()));
    }
    if batch.x.shape() != [b, arch.input_dim] || batch.y.shape() != [b, arch.output_dim] {
        return Err(Error::InvalidArgument(format!(
            "energy: batch shapes {:?} / {:?} do not match {} rows of a {} -> {} model",
            batch.x.shape(),
            batch.y.shape(),
            b,
            arch.input_dim,
            arch.output_dim
        )));
    }
    if g.value(q.z_mean).len() != n_total {
        return Err(Error::InvalidArgument(format!(
            "energy: posterior covers {} points but N = {n_total}",
            g.value(q.z_mean).len()
        )));
    }
    if noise.z.shape() != [k, b] {
        return Err(Error::InvalidArgument(format!("energy: z noise shape {:?}", noise.z.shape())));
    }

    let w = sample_weights(g, q, &noise.w)?;
    let site_w = log_site_w(g, &w, q, hyper.lambda, n_total)?;
    let site_w = g.reshape(site_w, &[k, 1])?;

    let (z, site_z) = if q.learn_z {
        let m = g.gather(q.z_mean, batch.rows)?;
        let lv = g.gather(q.z_logvar, batch.rows)?;
        let sd = std_from_logvar(g, lv)?;
        let e = g.constant(noise.z.clone());
        let s = g.mul(sd, e)?;
        let z = g.add(m, s)?;
        let site = log_site_z(g, z, m, lv, hyper.gamma)?;
        (z, Some(site))
    } else {
        let sd = hyper.gamma.sqrt();
        (g.constant(noise.z.map(|e| e * sd)), None)
    };

    let x = g.constant(batch.x.clone());
    let x = g.broadcast_to(x, &[k, b, arch.input_dim])?;
    let z3 = g.reshape(z, &[k, b, 1])?;
    let input = g.concat(&[x, z3], 2)?;
    let f = nn::forward(g, &w, input)?;

    let y = g.constant(batch.y.clone());
    let var = g.exp(q.log_noise)?;
    let ll = gaussian_log_pdf(g, y, f, var)?;
    let ll = g.sum_axis(ll, 2)?;

    let mut r = g.sub(ll, site_w)?;
    if let Some(sz) = site_z {
        r = g.sub(r, sz)?;
    }
    let a = g.scale(r, alpha)?;
    let lme = log_mean_exp(g, a, 0)?;
    let total = g.sum_all(lme)?;
    let data = g.scale(total, -(n_total as f64) / (alpha * b as f64))?;
    let prior = log_z_prior(arch, n_total, hyper.lambda, hyper.gamma);
    Ok(g.add_scalar(data, -prior)?)
}

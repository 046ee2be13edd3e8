use crate::autodiff::{Graph, NodeId, Tensor};
use crate::distributions::{log_mean_exp_slice, normal_log_pdf};
use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::RngStream;

use super::train::FittedModel;

/// Lower bound on predictive noise variances in original units.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Elements per intermediate activation when batching predictions.
const CHUNK_ELEMS: usize = 1 << 21;

/// Network output for rows `x` (`[B, D]`) with disturbances `z` (length `B`)
/// under one set of weights (`[out, in + 1]` per layer).
pub fn forward(weights: &[Tensor], x: &Tensor, z: &[f64]) -> Result<Tensor> {
    if x.ndim() != 2 || x.shape()[0] != z.len() {
        return Err(Error::InvalidArgument(format!(
            "forward: {} disturbances for inputs of shape {:?}",
            z.len(),
            x.shape()
        )));
    }
    let d = x.shape()[1];
    let first = weights.first().ok_or_else(|| Error::InvalidArgument("forward: no layers".into()))?;
    if first.ndim() != 2 || first.shape()[1] != d + 2 {
        return Err(Error::InvalidArgument(format!(
            "forward: first layer {:?} does not take {d} features plus z and bias",
            first.shape()
        )));
    }
    let mut g = Graph::new();
    let w: Vec<NodeId> = weights.iter().map(|t| g.constant(t.clone())).collect();
    let xn = g.constant(x.clone());
    let zn = g.constant(Tensor::new(vec![z.len(), 1], z.to_vec())?);
    let input = g.concat(&[xn, zn], 1)?;
    let out = nn::forward(&mut g, &w, input)?;
    Ok(g.value(out).clone())
}

/// Test-set scores in original target units.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    /// Mean log predictive density of the full target vector.
    pub ll: f64,
    pub mse_dims: Vec<f64>,
    pub ll_dims: Vec<f64>,
}

impl FittedModel {
    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    /// Noise variances in original units, floored.
    pub fn noise_var_original(&self) -> Vec<f64> {
        let v = self.noise_var();
        match &self.stats {
            Some(s) => v.iter().zip(&s.y_std).map(|(v, sd)| (v * sd * sd).max(NOISE_FLOOR)).collect(),
            None => v.iter().map(|v| v.max(NOISE_FLOOR)).collect(),
        }
    }

    pub fn normalize_inputs(&self, x: &Tensor) -> Tensor {
        match &self.stats {
            Some(s) => s.normalize_x(x),
            None => x.clone(),
        }
    }

    /// Noise-free outputs `f(x, z; W)` for `s` draws of `(W, z)` from
    /// `q(W) p(z)`, as `[s, B, K]` in normalized units. Inputs are normalized.
    pub fn sample_outputs(&self, x: &Tensor, s: usize, stream: &mut RngStream) -> Result<Tensor> {
        let b = x.shape()[0];
        let d = self.arch.input_dim;
        if x.shape() != [b, d] {
            return Err(Error::InvalidArgument(format!("expected [B, {d}] inputs, got {:?}", x.shape())));
        }
        let k = self.arch.output_dim;
        let chunk = (CHUNK_ELEMS / (b * self.arch.max_width()).max(1)).max(1);
        let sd = self.hyper.gamma.sqrt();
        let mut out = Vec::with_capacity(s * b * k);
        let mut done = 0;
        while done < s {
            let c = chunk.min(s - done);
            let w = self.posterior.draw_weights(c, stream);
            let z = stream.standard_normal(&[c, b, 1]).map(|e| e * sd);
            let mut g = Graph::new();
            let wn: Vec<NodeId> = w.into_iter().map(|t| g.constant(t)).collect();
            let xn = g.constant(x.clone());
            let xn = g.broadcast_to(xn, &[c, b, d])?;
            let zn = g.constant(z);
            let input = g.concat(&[xn, zn], 2)?;
            let f = nn::forward(&mut g, &wn, input)?;
            out.extend_from_slice(g.value(f).data());
            done += c;
        }
        Ok(Tensor::new(vec![s, b, k], out)?)
    }

    /// Mixture components of the predictive at one input row in original
    /// units: `s` means (`[s, K]`) and the shared diagonal noise variance.
    pub fn predictive_components(
        &self,
        x_star: &[f64],
        s: usize,
        stream: &mut RngStream,
    ) -> Result<(Tensor, Vec<f64>)> {
        let x = Tensor::new(vec![1, x_star.len()], x_star.to_vec())?;
        let f = self.sample_outputs(&self.normalize_inputs(&x), s, stream)?;
        let f = f.reshape(&[s, self.arch.output_dim])?;
        let f = match &self.stats {
            Some(st) => st.denormalize_y(&f),
            None => f,
        };
        Ok((f, self.noise_var_original()))
    }

    /// `s` draws from the predictive at `x_star`, in original units (`[s, K]`).
    pub fn predictive_samples(&self, x_star: &[f64], s: usize, stream: &mut RngStream) -> Result<Tensor> {
        let (mut f, var) = self.predictive_components(x_star, s, stream)?;
        let k = self.arch.output_dim;
        let eps = stream.standard_normal(&[s, k]);
        for (j, (v, e)) in f.data_mut().iter_mut().zip(eps.data()).enumerate() {
            *v += var[j % k].sqrt() * e;
        }
        Ok(f)
    }
}

/// Scores `data` (original units) with `s` predictive samples per point.
pub fn test_metrics(model: &FittedModel, data: &Dataset, s: usize, stream: &mut RngStream) -> Result<Metrics> {
    if s < 1 {
        return Err(Error::InvalidArgument("test_metrics: need at least one sample".into()));
    }
    let n = data.len();
    let k = model.arch.output_dim;
    if data.target_dim() != k || data.feature_dim() != model.arch.input_dim {
        return Err(Error::InvalidArgument("test_metrics: dataset does not match the model".into()));
    }
    let var = model.noise_var_original();
    let xn = model.normalize_inputs(&data.x);
    let rows_per = (CHUNK_ELEMS / (s * model.arch.max_width()).max(1)).clamp(1, n.max(1));
    let (mut se, mut ll, mut ll_dims) = (vec![0.0; k], 0.0, vec![0.0; k]);
    let mut comp = vec![0.0; s];
    let mut comp_dims = vec![vec![0.0; s]; k];
    let mut start = 0;
    while start < n {
        let end = (start + rows_per).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let xb = Tensor::new(vec![rows.len(), model.arch.input_dim], {
            let c = model.arch.input_dim;
            xn.data()[start * c..end * c].to_vec()
        })?;
        let f = model.sample_outputs(&xb, s, stream)?;
        let b = rows.len();
        for (r, &row) in rows.iter().enumerate() {
            let y = data.y.row(row);
            comp.iter_mut().for_each(|c| *c = 0.0);
            for j in 0..k {
                let (mu, sd) = match &model.stats {
                    Some(st) => (st.y_mean[j], st.y_std[j]),
                    None => (0.0, 1.0),
                };
                let mut mean = 0.0;
                for (si, c) in comp.iter_mut().enumerate() {
                    let fv = f.data()[(si * b + r) * k + j] * sd + mu;
                    mean += fv;
                    let lp = normal_log_pdf(y[j], fv, var[j]);
                    comp_dims[j][si] = lp;
                    *c += lp;
                }
                mean /= s as f64;
                se[j] += (mean - y[j]) * (mean - y[j]);
                ll_dims[j] += log_mean_exp_slice(&comp_dims[j]);
            }
            ll += log_mean_exp_slice(&comp);
        }
        start = end;
    }
    let nf = n as f64;
    let mse_dims: Vec<f64> = se.iter().map(|v| v / nf).collect();
    let mse = mse_dims.iter().sum::<f64>() / k as f64;
    Ok(Metrics {
        mse,
        rmse: mse.sqrt(),
        ll: ll / nf,
        mse_dims,
        ll_dims: ll_dims.iter().map(|v| v / nf).collect(),
    })
}

//! Deterministic MLP baseline with Gaussian output noise fitted on held-out
//! data.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::bnn::train::{get_adam, get_stats, put_adam, put_stats};
use crate::bnn::{Metrics, NOISE_FLOOR};
use crate::checkpoint::{join_usize, split_usize, Checkpoint};
use crate::distributions::normal_log_pdf;
use crate::env::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Share of rows held out for early stopping and the noise fit.
    pub validation_fraction: f64,
}

impl MlpConfig {
    pub fn new(hidden: Vec<usize>) -> Self {
        Self { hidden, batch_size: 250, epochs: 1000, adam: AdamConfig::with_lr(0.01), validation_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub weights: Vec<Tensor>,
    /// Output-noise variances in normalized target units.
    pub noise_var: Vec<f64>,
    pub stats: Option<NormStats>,
}

#[derive(Clone, Debug)]
pub struct MlpOutcome {
    pub model: MlpModel,
    /// Mean training MSE per epoch (normalized units).
    pub loss_trace: Vec<f64>,
    pub validation_trace: Vec<f64>,
    pub best_epoch: usize,
}

fn mse_node(g: &mut Graph, weights: &[NodeId], x: &Tensor, y: &Tensor) -> Result<NodeId> {
    let xn = g.constant(x.clone());
    let out = nn::forward(g, weights, xn)?;
    let yn = g.constant(y.clone());
    let d = g.sub(out, yn)?;
    let sq = g.square(d)?;
    let s = g.sum_all(sq)?;
    Ok(g.scale(s, 1.0 / y.len() as f64)?)
}

fn predict_raw(weights: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w: Vec<NodeId> = weights.iter().map(|t| g.constant(t.clone())).collect();
    let xn = g.constant(x.clone());
    let out = nn::forward(&mut g, &w, xn)?;
    Ok(g.value(out).clone())
}

/// Squared residuals averaged per output column.
fn column_mse(pred: &Tensor, y: &Tensor) -> Vec<f64> {
    let k = y.cols();
    let mut acc = vec![0.0; k];
    for (j, (p, t)) in pred.data().iter().zip(y.data()).enumerate() {
        acc[j % k] += (p - t) * (p - t);
    }
    let n = y.rows().max(1) as f64;
    acc.iter().map(|v| v / n).collect()
}

/// Fits the network by Adam on squared error, keeping the parameters of the
/// epoch with the lowest validation error, then sets each output's noise
/// variance to its mean squared validation residual.
pub fn train_mlp(data: &Dataset, config: &MlpConfig, normalize: bool, stream: &mut RngStream) -> Result<MlpOutcome> {
    let n = data.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("train_mlp: need at least 10 rows, got {n}")));
    }
    if !(config.validation_fraction > 0.0 && config.validation_fraction < 1.0) {
        return Err(Error::InvalidArgument("validation fraction must be in (0, 1)".into()));
    }
    if config.batch_size == 0 || config.hidden.contains(&0) {
        return Err(Error::InvalidArgument("batch size and layer widths must be positive".into()));
    }
    let (norm, stats) = if normalize {
        let (d, s) = data.normalize();
        (d, Some(s))
    } else {
        (data.clone(), None)
    };
    let perm = stream.derive(0).permutation(n);
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_rows, train_rows) = perm.split_at(n_val);
    let train = norm.select(train_rows);
    let val = norm.select(val_rows);

    let (d, k) = (data.feature_dim(), data.target_dim());
    let shapes = nn::layer_shapes(d, &config.hidden, k);
    let mut weights = nn::init_weights(&shapes, &mut stream.derive(1));
    let mut adam = Adam::new(config.adam, &weights.iter().collect::<Vec<_>>());
    let mut best = (column_mse(&predict_raw(&weights, &val.x)?, &val.y).iter().sum::<f64>(), weights.clone(), 0);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut validation_trace = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let order = stream.permutation(train.len());
        let mut sum = 0.0;
        let mut count = 0;
        for rows in order.chunks(config.batch_size) {
            let b = train.select(rows);
            let mut g = Graph::new();
            let w: Vec<NodeId> = weights.iter().map(|t| g.param(t.clone()).node).collect();
            let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
            let loss = mse_node(&mut g, &w, &b.x, &b.y).map_err(diverged)?;
            let grads = g.backward(loss).map_err(|e| diverged(e.into()))?.into_vec();
            let refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = weights.iter_mut().collect();
            adam.step(&mut params, &refs);
            sum += g.value(loss).item();
            count += 1;
            step += 1;
        }
        loss_trace.push(sum / count as f64);
        let v: f64 = column_mse(&predict_raw(&weights, &val.x)?, &val.y).iter().sum();
        validation_trace.push(v);
        if v < best.0 {
            best = (v, weights.clone(), epoch);
        }
    }
    let (_, weights, best_epoch) = best;
    let noise_var = column_mse(&predict_raw(&weights, &val.x)?, &val.y);
    Ok(MlpOutcome {
        model: MlpModel { input_dim: d, output_dim: k, hidden: config.hidden.clone(), weights, noise_var, stats },
        loss_trace,
        validation_trace,
        best_epoch,
    })
}

impl MlpModel {
    pub const KIND: &'static str = "mlp";

    /// Network outputs for raw inputs `[B, D]`, in original target units.
    pub fn predict_mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.cols() != self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "expected [B, {}] inputs, got {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        match &self.stats {
            Some(s) => Ok(s.denormalize_y(&predict_raw(&self.weights, &s.normalize_x(x))?)),
            None => predict_raw(&self.weights, x),
        }
    }

    /// Noise variances in original units, floored.
    pub fn noise_var_original(&self) -> Vec<f64> {
        match &self.stats {
            Some(s) => self.noise_var.iter().zip(&s.y_std).map(|(v, sd)| (v * sd * sd).max(NOISE_FLOOR)).collect(),
            None => self.noise_var.iter().map(|v| v.max(NOISE_FLOOR)).collect(),
        }
    }

    /// `s` draws from the Gaussian predictive at `x_star` (`[s, K]`).
    pub fn predictive_samples(&self, x_star: &[f64], s: usize, stream: &mut RngStream) -> Result<Tensor> {
        let mean = self.predict_mean(&Tensor::matrix(1, x_star.len(), x_star.to_vec())?)?;
        let var = self.noise_var_original();
        let k = self.output_dim;
        let eps = stream.standard_normal(&[s, k]);
        let data = eps.data().iter().enumerate().map(|(i, e)| mean.data()[i % k] + var[i % k].sqrt() * e).collect();
        Ok(Tensor::new(vec![s, k], data)?)
    }

    /// Gaussian test scores in original units.
    pub fn test_metrics(&self, data: &Dataset) -> Result<Metrics> {
        if data.feature_dim() != self.input_dim || data.target_dim() != self.output_dim {
            return Err(Error::InvalidArgument("test_metrics: dataset does not match the model".into()));
        }
        let pred = self.predict_mean(&data.x)?;
        let var = self.noise_var_original();
        let k = self.output_dim;
        let mut ll_dims = vec![0.0; k];
        for (i, (p, y)) in pred.data().iter().zip(data.y.data()).enumerate() {
            ll_dims[i % k] += normal_log_pdf(*y, *p, var[i % k]);
        }
        let nf = data.len() as f64;
        let ll_dims: Vec<f64> = ll_dims.iter().map(|v| v / nf).collect();
        let mse_dims = column_mse(&pred, &data.y);
        let mse = mse_dims.iter().sum::<f64>() / k as f64;
        Ok(Metrics { mse, rmse: mse.sqrt(), ll: ll_dims.iter().sum(), mse_dims, ll_dims })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(Self::KIND);
        c.set("input_dim", self.input_dim);
        c.set("output_dim", self.output_dim);
        c.set("hidden", join_usize(&self.hidden));
        put_stats(&mut c, &self.stats);
        for (l, w) in self.weights.iter().enumerate() {
            c.push(&format!("w.{l}"), w.clone());
        }
        c.push("noise_var", Tensor::vector(self.noise_var.clone()));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let input_dim: usize = c.parse("input_dim")?;
        let output_dim: usize = c.parse("output_dim")?;
        let hidden = split_usize(c.get("hidden")?)?;
        let shapes = nn::layer_shapes(input_dim, &hidden, output_dim);
        let weights = (0..shapes.len()).map(|l| c.block(&format!("w.{l}")).cloned()).collect::<Result<Vec<_>>>()?;
        nn::check_weight_shapes(&weights, &shapes).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        let noise_var = c.block("noise_var")?.data().to_vec();
        if noise_var.len() != output_dim || noise_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Format("checkpoint: bad noise_var block".into()));
        }
        Ok(Self { input_dim, output_dim, hidden, weights, noise_var, stats: get_stats(c)? })
    }
}

/// Stores the Adam settings of an MLP run alongside a checkpoint.
pub fn put_config(c: &mut Checkpoint, config: &MlpConfig) {
    c.set("batch_size", config.batch_size);
    c.set("epochs", config.epochs);
    c.set("validation_fraction", config.validation_fraction);
    put_adam(c, &config.adam);
}

pub fn get_config(c: &Checkpoint) -> Result<MlpConfig> {
    Ok(MlpConfig {
        hidden: split_usize(c.get("hidden")?)?,
        batch_size: c.parse("batch_size")?,
        epochs: c.parse("epochs")?,
        adam: get_adam(c)?,
        validation_fraction: c.parse("validation_fraction")?,
    })
}

use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::{join_usize, split_usize, Checkpoint};
use crate::env::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngStream;

use super::energy::{bind, energy_alpha, Batch, EnergyNoise};
use super::{BnnArchitecture, ModelHyperparams, NoiseModel, VariationalPosterior};

/// A trained network together with everything needed to predict in
/// original units.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub arch: BnnArchitecture,
    pub posterior: VariationalPosterior,
    /// Log observation-noise variances in normalized units, `[K_out]`.
    pub log_noise: Tensor,
    pub hyper: ModelHyperparams,
    pub stats: Option<NormStats>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FittedModel,
    /// Mean minibatch energy per epoch.
    pub loss_trace: Vec<f64>,
}

fn trainable<'a>(
    q: &'a mut VariationalPosterior,
    log_noise: &'a mut Tensor,
    learn_z: bool,
    learn_noise: bool,
) -> Vec<&'a mut Tensor> {
    let mut v: Vec<&mut Tensor> = q.w_mean.iter_mut().collect();
    v.extend(q.w_logvar.iter_mut());
    if learn_z {
        v.push(&mut q.z_mean);
        v.push(&mut q.z_logvar);
    }
    if learn_noise {
        v.push(log_noise);
    }
    v
}

/// Fits `q` by Adam on the alpha energy, resampling every draw per minibatch.
///
/// When `normalize` is set, features and targets are standardized first and
/// the statistics are kept on the model.
pub fn train(
    data: &Dataset,
    arch: &BnnArchitecture,
    hyper: &ModelHyperparams,
    normalize: bool,
    stream: &mut RngStream,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if data.feature_dim() != arch.input_dim || data.target_dim() != arch.output_dim {
        return Err(Error::InvalidArgument(format!(
            "dataset is {} -> {} but the architecture is {} -> {}",
            data.feature_dim(),
            data.target_dim(),
            arch.input_dim,
            arch.output_dim
        )));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let (train, stats) = if normalize {
        let (d, s) = data.normalize();
        (d, Some(s))
    } else {
        (data.clone(), None)
    };
    let mut q = VariationalPosterior::init(arch, n, hyper.gamma, &mut stream.derive(0));
    let mut log_noise = Tensor::full(&[arch.output_dim], hyper.noise.initial().ln());
    let learn_noise = hyper.noise.is_learned();
    let mut adam = {
        let refs = trainable(&mut q, &mut log_noise, hyper.learn_z, learn_noise);
        let shared: Vec<&Tensor> = refs.into_iter().map(|t| &*t).collect();
        Adam::new(hyper.adam, &shared)
    };

    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut step = 0usize;
    for _ in 0..hyper.epochs {
        let perm = stream.permutation(n);
        let mut sum = 0.0;
        let mut count = 0usize;
        for rows in perm.chunks(hyper.batch_size) {
            let sub = train.select(rows);
            let noise = EnergyNoise::draw(arch, hyper.samples, rows.len(), stream);
            let mut g = Graph::new();
            let bound = bind(&mut g, &q, &log_noise, hyper.learn_z, learn_noise);
            let batch = Batch { x: &sub.x, y: &sub.y, rows };
            let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
            let e = energy_alpha(&mut g, arch, &bound, batch, n, hyper, &noise).map_err(diverged)?;
            let grads = g.backward(e).map_err(|e| diverged(e.into()))?;
            let grads = grads.into_vec();
            if let Some(bad) = grads.iter().position(|t| !t.all_finite()) {
                return Err(Error::Diverged { step, detail: format!("non-finite gradient in parameter {bad}") });
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            let mut params = trainable(&mut q, &mut log_noise, hyper.learn_z, learn_noise);
            adam.step(&mut params, &refs);
            sum += g.value(e).item();
            count += 1;
            step += 1;
        }
        trace.push(sum / count as f64);
    }
    Ok(TrainOutcome {
        model: FittedModel { arch: arch.clone(), posterior: q, log_noise, hyper: hyper.clone(), stats },
        loss_trace: trace,
    })
}

fn flags(v: &[bool]) -> Tensor {
    Tensor::vector(v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

fn unflag(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v != 0.0).collect()
}

pub(crate) fn put_stats(c: &mut Checkpoint, stats: &Option<NormStats>) {
    c.set("normalized", stats.is_some());
    if let Some(s) = stats {
        c.push("norm.x_mean", Tensor::vector(s.x_mean.clone()));
        c.push("norm.x_std", Tensor::vector(s.x_std.clone()));
        c.push("norm.y_mean", Tensor::vector(s.y_mean.clone()));
        c.push("norm.y_std", Tensor::vector(s.y_std.clone()));
        c.push("norm.x_constant", flags(&s.x_constant));
        c.push("norm.y_constant", flags(&s.y_constant));
    }
}

pub(crate) fn get_stats(c: &Checkpoint) -> Result<Option<NormStats>> {
    if !c.parse::<bool>("normalized")? {
        return Ok(None);
    }
    let v = |name: &str| -> Result<Vec<f64>> { Ok(c.block(name)?.data().to_vec()) };
    Ok(Some(NormStats {
        x_mean: v("norm.x_mean")?,
        x_std: v("norm.x_std")?,
        y_mean: v("norm.y_mean")?,
        y_std: v("norm.y_std")?,
        x_constant: unflag(c.block("norm.x_constant")?),
        y_constant: unflag(c.block("norm.y_constant")?),
    }))
}

pub(crate) fn put_adam(c: &mut Checkpoint, a: &AdamConfig) {
    c.set("learning_rate", a.learning_rate);
    c.set("beta1", a.beta1);
    c.set("beta2", a.beta2);
    c.set("epsilon", a.epsilon);
}

pub(crate) fn get_adam(c: &Checkpoint) -> Result<AdamConfig> {
    Ok(AdamConfig {
        learning_rate: c.parse("learning_rate")?,
        beta1: c.parse("beta1")?,
        beta2: c.parse("beta2")?,
        epsilon: c.parse("epsilon")?,
    })
}

impl FittedModel {
    pub const KIND: &'static str = "bnn";

    pub fn noise_var(&self) -> Vec<f64> {
        self.log_noise.data().iter().map(|v| v.exp()).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(Self::KIND);
        c.set("input_dim", self.arch.input_dim);
        c.set("output_dim", self.arch.output_dim);
        c.set("hidden", join_usize(&self.arch.hidden));
        let h = &self.hyper;
        c.set("alpha", h.alpha);
        c.set("lambda", h.lambda);
        c.set("gamma", h.gamma);
        match h.noise {
            NoiseModel::Learned { init } => {
                c.set("noise", "learned");
                c.set("noise_value", init);
            }
            NoiseModel::Fixed(v) => {
                c.set("noise", "fixed");
                c.set("noise_value", v);
            }
        }
        c.set("samples", h.samples);
        c.set("batch_size", h.batch_size);
        c.set("epochs", h.epochs);
        put_adam(&mut c, &h.adam);
        c.set("learn_z", h.learn_z);
        put_stats(&mut c, &self.stats);
        for (l, t) in self.posterior.w_mean.iter().enumerate() {
            c.push(&format!("w_mean.{l}"), t.clone());
        }
        for (l, t) in self.posterior.w_logvar.iter().enumerate() {
            c.push(&format!("w_logvar.{l}"), t.clone());
        }
        c.push("z_mean", self.posterior.z_mean.clone());
        c.push("z_logvar", self.posterior.z_logvar.clone());
        c.push("log_noise", self.log_noise.clone());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let arch = BnnArchitecture::new(
            c.parse("input_dim")?,
            split_usize(c.get("hidden")?)?,
            c.parse("output_dim")?,
        )?;
        let noise_value: f64 = c.parse("noise_value")?;
        let noise = match c.get("noise")? {
            "learned" => NoiseModel::Learned { init: noise_value },
            "fixed" => NoiseModel::Fixed(noise_value),
            other => return Err(Error::Format(format!("checkpoint: unknown noise model {other:?}"))),
        };
        let hyper = ModelHyperparams {
            alpha: c.parse("alpha")?,
            lambda: c.parse("lambda")?,
            gamma: c.parse("gamma")?,
            noise,
            samples: c.parse("samples")?,
            batch_size: c.parse("batch_size")?,
            epochs: c.parse("epochs")?,
            adam: get_adam(c)?,
            learn_z: c.parse("learn_z")?,
        };
        let layers = arch.layer_shapes();
        let mut w_mean = Vec::new();
        let mut w_logvar = Vec::new();
        for (l, &(o, i)) in layers.iter().enumerate() {
            for (name, dst) in [("w_mean", &mut w_mean), ("w_logvar", &mut w_logvar)] {
                let t = c.block(&format!("{name}.{l}"))?;
                if t.shape() != [o, i] {
                    return Err(Error::Format(format!(
                        "checkpoint: {name}.{l} has shape {:?}, expected [{o}, {i}]",
                        t.shape()
                    )));
                }
                dst.push(t.clone());
            }
        }
        let posterior = VariationalPosterior {
            w_mean,
            w_logvar,
            z_mean: c.block("z_mean")?.clone(),
            z_logvar: c.block("z_logvar")?.clone(),
        };
        Ok(Self {
            arch,
            posterior,
            log_noise: c.block("log_noise")?.clone(),
            hyper,
            stats: get_stats(c)?,
        })
    }
}

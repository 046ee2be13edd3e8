//! Model-based policy search: a deterministic tanh-bounded policy network
//! optimized through Monte-Carlo roll-outs of a learned dynamics model.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::baselines::MlpModel;
use crate::bnn::FittedModel;
use crate::bnn::train::{get_adam, put_adam};
use crate::checkpoint::{join_usize, split_usize, Checkpoint};
use crate::env::{Action, NormStats, State, WetChicken};
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngStream;

/// Normalized roll-out states are saturated towards this magnitude.
pub const STATE_LIMIT: f64 = 10.0;
/// Below this magnitude the saturation is the identity.
pub const STATE_KNEE: f64 = 8.0;

/// A learned transition model `s' = s + f(s, a)` usable inside roll-outs.
///
/// Features are the state followed by the action; targets are state
/// differences, so the state dimension equals the target dimension.
pub trait Dynamics {
    fn feature_dim(&self) -> usize;
    fn target_dim(&self) -> usize;
    fn norm_stats(&self) -> Option<&NormStats>;
    /// Prior variance of the stochastic input, `None` for models without one.
    fn disturbance_var(&self) -> Option<f64>;
    /// Additive output-noise variances in normalized target units.
    fn noise_var(&self) -> Vec<f64>;
    /// Weights for one roll-out, each layer `[out, in + 1]`.
    fn sample_weights(&self, stream: &mut RngStream) -> Vec<Tensor>;

    fn state_dim(&self) -> usize {
        self.target_dim()
    }

    fn action_dim(&self) -> usize {
        self.feature_dim() - self.target_dim()
    }
}

impl Dynamics for FittedModel {
    fn feature_dim(&self) -> usize {
        self.arch.input_dim
    }
    fn target_dim(&self) -> usize {
        self.arch.output_dim
    }
    fn norm_stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }
    fn disturbance_var(&self) -> Option<f64> {
        Some(self.hyper.gamma)
    }
    fn noise_var(&self) -> Vec<f64> {
        FittedModel::noise_var(self)
    }
    fn sample_weights(&self, stream: &mut RngStream) -> Vec<Tensor> {
        self.posterior
            .draw_weights(1, stream)
            .into_iter()
            .map(|t| {
                let s = t.shape()[1..].to_vec();
                t.reshape(&s).expect("drop unit batch axis")
            })
            .collect()
    }
}

impl Dynamics for MlpModel {
    fn feature_dim(&self) -> usize {
        self.input_dim
    }
    fn target_dim(&self) -> usize {
        self.output_dim
    }
    fn norm_stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }
    fn disturbance_var(&self) -> Option<f64> {
        None
    }
    fn noise_var(&self) -> Vec<f64> {
        self.noise_var.clone()
    }
    fn sample_weights(&self, _stream: &mut RngStream) -> Vec<Tensor> {
        self.weights.clone()
    }
}

/// Per-step cost on states in original units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cost {
    /// `length - y`, the distance to the waterfall.
    WetChicken { length: f64 },
    Constant(f64),
}

impl Cost {
    pub fn eval(&self, s: &[f64]) -> f64 {
        match *self {
            Cost::WetChicken { length } => length - s[1],
            Cost::Constant(c) => c,
        }
    }

    /// Cost of `[K, B, S]` states as a `[K, B, 1]` node.
    fn node(&self, g: &mut Graph, s: NodeId) -> Result<NodeId> {
        let shape = g.shape(s).to_vec();
        Ok(match *self {
            Cost::WetChicken { length } => {
                let y = g.slice(s, 2, 1, 2)?;
                let n = g.neg(y)?;
                g.add_scalar(n, length)?
            }
            Cost::Constant(c) => g.constant(Tensor::full(&[shape[0], shape[1], 1], c)),
        })
    }
}

/// Feed-forward policy on normalized states with `bound * tanh` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub hidden: Vec<usize>,
    pub weights: Vec<Tensor>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub bound: f64,
}

impl Policy {
    pub const KIND: &'static str = "policy";

    pub fn init(
        state_mean: Vec<f64>,
        state_std: Vec<f64>,
        hidden: Vec<usize>,
        action_dim: usize,
        bound: f64,
        stream: &mut RngStream,
    ) -> Result<Self> {
        if state_mean.len() != state_std.len() || state_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("policy: bad state normalization".into()));
        }
        if !(bound > 0.0) || action_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("policy: bad architecture or bound".into()));
        }
        let shapes = nn::layer_shapes(state_mean.len(), &hidden, action_dim);
        let weights = nn::init_weights(&shapes, stream);
        Ok(Self { hidden, weights, state_mean, state_std, bound })
    }

    /// Policy for a dynamics model, normalizing states like the model does.
    pub fn for_model(model: &dyn Dynamics, hidden: Vec<usize>, bound: f64, stream: &mut RngStream) -> Result<Self> {
        let sd = model.state_dim();
        let (mean, std) = match model.norm_stats() {
            Some(s) => (s.x_mean[..sd].to_vec(), s.x_std[..sd].to_vec()),
            None => (vec![0.0; sd], vec![1.0; sd]),
        };
        Self::init(mean, std, hidden, model.action_dim(), bound, stream)
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.shape()[0])
    }

    /// Actions for `[.., S]` normalized states given the weight nodes.
    pub fn act_node(&self, g: &mut Graph, weights: &[NodeId], s_norm: NodeId) -> Result<NodeId> {
        let h = nn::forward(g, weights, s_norm)?;
        let t = g.tanh(h)?;
        Ok(if self.bound == 1.0 { t } else { g.scale(t, self.bound)? })
    }

    /// Action for one state in original units.
    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.state_dim() || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("policy: bad state {s:?}")));
        }
        let norm: Vec<f64> = s.iter().zip(&self.state_mean).zip(&self.state_std).map(|((v, m), sd)| (v - m) / sd).collect();
        let mut g = Graph::new();
        let w: Vec<NodeId> = self.weights.iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(Tensor::matrix(1, norm.len(), norm)?);
        let a = self.act_node(&mut g, &w, x)?;
        Ok(g.value(a).data().to_vec())
    }

    pub fn act_wet_chicken(&self, s: State) -> Result<Action> {
        let a = self.act(&[s.x, s.y])?;
        Ok(Action::new(a[0], a[1]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(Self::KIND);
        c.set("state_dim", self.state_dim());
        c.set("action_dim", self.action_dim());
        c.set("hidden", join_usize(&self.hidden));
        c.set("bound", self.bound);
        c.push("state_mean", Tensor::vector(self.state_mean.clone()));
        c.push("state_std", Tensor::vector(self.state_std.clone()));
        for (l, w) in self.weights.iter().enumerate() {
            c.push(&format!("w.{l}"), w.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let sd: usize = c.parse("state_dim")?;
        let ad: usize = c.parse("action_dim")?;
        let hidden = split_usize(c.get("hidden")?)?;
        let shapes = nn::layer_shapes(sd, &hidden, ad);
        let weights = (0..shapes.len()).map(|l| c.block(&format!("w.{l}")).cloned()).collect::<Result<Vec<_>>>()?;
        nn::check_weight_shapes(&weights, &shapes).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        let state_mean = c.block("state_mean")?.data().to_vec();
        let state_std = c.block("state_std")?.data().to_vec();
        if state_mean.len() != sd || state_std.len() != sd {
            return Err(Error::Format("checkpoint: state normalization has the wrong length".into()));
        }
        Ok(Self { hidden, weights, state_mean, state_std, bound: c.parse("bound")? })
    }
}

/// All random draws of one batch of roll-outs. Sample `k` is drawn from its
/// own child stream, so a subset of samples can be replayed alone.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutNoise {
    /// Per layer `[K, out, in + 1]`, fixed for the whole roll-out.
    pub weights: Vec<Tensor>,
    /// Per step `[K, B, 1]` disturbances, empty for models without one.
    pub z: Vec<Tensor>,
    /// Per step `[K, B, S]` output noise in normalized target units.
    pub eps: Vec<Tensor>,
}

fn stack(parts: &[Tensor]) -> Tensor {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("equal part shapes")
}

impl RolloutNoise {
    pub fn draw(model: &dyn Dynamics, k: usize, batch: usize, horizon: usize, stream: &RngStream) -> Self {
        let streams: Vec<RngStream> = (0..k as u64).map(|i| stream.derive(i)).collect();
        Self::draw_from(model, batch, horizon, streams)
    }

    /// One roll-out sample per stream.
    pub fn draw_from(model: &dyn Dynamics, batch: usize, horizon: usize, streams: Vec<RngStream>) -> Self {
        let sd = model.state_dim();
        let noise_sd: Vec<f64> = model.noise_var().iter().map(|v| v.sqrt()).collect();
        let gamma_sd = model.disturbance_var().map(f64::sqrt);
        let mut w_parts: Vec<Vec<Tensor>> = Vec::new();
        let mut z_parts: Vec<Vec<Tensor>> = vec![Vec::new(); horizon];
        let mut e_parts: Vec<Vec<Tensor>> = vec![Vec::new(); horizon];
        for mut s in streams {
            w_parts.push(model.sample_weights(&mut s));
            for t in 0..horizon {
                if let Some(gs) = gamma_sd {
                    z_parts[t].push(s.standard_normal(&[batch, 1]).map(|v| v * gs));
                }
                let mut e = s.standard_normal(&[batch, sd]);
                for (j, v) in e.data_mut().iter_mut().enumerate() {
                    *v *= noise_sd[j % sd];
                }
                e_parts[t].push(e);
            }
        }
        let layers = w_parts.first().map_or(0, |w| w.len());
        let weights = (0..layers)
            .map(|l| stack(&w_parts.iter().map(|w| w[l].clone()).collect::<Vec<_>>()))
            .collect();
        let z = if gamma_sd.is_some() { z_parts.iter().map(|p| stack(p)).collect() } else { Vec::new() };
        Self { weights, z, eps: e_parts.iter().map(|p| stack(p)).collect() }
    }

    pub fn samples(&self) -> usize {
        self.eps.first().map_or(0, |e| e.shape()[0])
    }

    /// The draws of sample `k` alone.
    pub fn select(&self, k: usize) -> Self {
        let pick = |t: &Tensor| {
            let per = t.len() / t.shape()[0];
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            Tensor::new(shape, t.data()[k * per..(k + 1) * per].to_vec()).expect("one slab")
        };
        Self {
            weights: self.weights.iter().map(pick).collect(),
            z: self.z.iter().map(pick).collect(),
            eps: self.eps.iter().map(pick).collect(),
        }
    }
}

/// The nodes of one unfolded batch of roll-outs.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Mean over samples and start states of the summed per-step costs.
    pub objective: NodeId,
    /// Normalized states `[K, B, S]`, `s_0` first.
    pub states: Vec<NodeId>,
    /// Per-step costs `[K, B, 1]` of `s_1 ..= s_T`.
    pub costs: Vec<NodeId>,
}

/// Simulates `T` steps from start states `s0` (`[B, S]`, original units)
/// through the model under the policy.
///
/// Weights are fixed per sample for the whole roll-out, disturbances and
/// output noise are fresh at every step. States are propagated in the
/// model's normalized space and soft-clipped; the cost sees original units.
pub fn unfold(
    g: &mut Graph,
    model: &dyn Dynamics,
    policy: &Policy,
    policy_weights: &[NodeId],
    s0: &Tensor,
    noise: &RolloutNoise,
    cost: Cost,
) -> Result<Rollout> {
    let sd = model.state_dim();
    let ad = model.action_dim();
    let horizon = noise.eps.len();
    let k = noise.samples();
    if horizon == 0 || k == 0 {
        return Err(Error::InvalidArgument("unfold: need T >= 1 and K >= 1".into()));
    }
    if s0.ndim() != 2 || s0.cols() != sd {
        return Err(Error::InvalidArgument(format!("unfold: start states {:?} are not [B, {sd}]", s0.shape())));
    }
    if policy.state_dim() != sd || policy.action_dim() != ad {
        return Err(Error::InvalidArgument("unfold: policy does not match the model".into()));
    }
    let b = s0.rows();
    if !s0.all_finite() {
        return Err(Error::Diverged { step: 0, detail: "non-finite start state".into() });
    }
    if noise.eps[0].shape() != [k, b, sd] || (model.disturbance_var().is_some() && noise.z.len() != horizon) {
        return Err(Error::InvalidArgument("unfold: noise does not match the batch".into()));
    }
    let identity;
    let stats = match model.norm_stats() {
        Some(s) => s,
        None => {
            identity = NormStats::identity(model.feature_dim(), sd);
            &identity
        }
    };
    let x_mean = &stats.x_mean;
    let x_std = &stats.x_std;
    // state and action normalization, target de-normalization, all as [S] or [A] constants
    let s_mean = g.constant(Tensor::vector(x_mean[..sd].to_vec()));
    let s_std = g.constant(Tensor::vector(x_std[..sd].to_vec()));
    let a_shift = g.constant(Tensor::vector(x_mean[sd..].iter().zip(&x_std[sd..]).map(|(m, s)| -m / s).collect()));
    let a_scale = g.constant(Tensor::vector(x_std[sd..].iter().map(|s| 1.0 / s).collect()));
    let d_scale = g.constant(Tensor::vector(stats.y_std.iter().zip(&x_std[..sd]).map(|(y, x)| y / x).collect()));
    let d_shift = g.constant(Tensor::vector(stats.y_mean.iter().zip(&x_std[..sd]).map(|(y, x)| y / x).collect()));

    let s0n = s0.data().chunks(sd).flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - x_mean[j]) / x_std[j]));
    let s0n = Tensor::new(vec![b, sd], s0n.collect())?;
    let s0n = g.constant(s0n);
    let mut s = g.broadcast_to(s0n, &[k, b, sd])?;
    let w: Vec<NodeId> = noise.weights.iter().map(|t| g.constant(t.clone())).collect();
    let mut states = vec![s];
    let mut costs = Vec::with_capacity(horizon);
    let mut total: Option<NodeId> = None;
    for t in 0..horizon {
        let step_err = |e: Error| Error::Diverged { step: t, detail: e.to_string() };
        let inner = |g: &mut Graph, s: NodeId| -> Result<(NodeId, NodeId)> {
            let a = policy.act_node(g, policy_weights, s)?;
            let a = g.mul(a, a_scale)?;
            let a = g.add(a, a_shift)?;
            let mut parts = vec![s, a];
            if !noise.z.is_empty() {
                parts.push(g.constant(noise.z[t].clone()));
            }
            let input = g.concat(&parts, 2)?;
            let d = nn::forward(g, &w, input)?;
            let e = g.constant(noise.eps[t].clone());
            let d = g.add(d, e)?;
            let d = g.mul(d, d_scale)?;
            let d = g.add(d, d_shift)?;
            let next = g.add(s, d)?;
            let next = g.soft_clip(next, STATE_KNEE, STATE_LIMIT)?;
            let orig = g.mul(next, s_std)?;
            let orig = g.add(orig, s_mean)?;
            let c = cost.node(g, orig)?;
            Ok((next, c))
        };
        let (next, c) = inner(g, s).map_err(step_err)?;
        s = next;
        states.push(s);
        costs.push(c);
        total = Some(match total {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
    }
    let sum = g.sum_all(total.expect("horizon >= 1"))?;
    let objective = g.scale(sum, 1.0 / (k * b) as f64)?;
    Ok(Rollout { objective, states, costs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { horizon: 5, samples: 20, batch_size: 10, epochs: 100, adam: AdamConfig::with_lr(1e-5), hidden: vec![20, 20] }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("roll-outs need T, K and batch size of at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn put(&self, c: &mut Checkpoint) {
        c.set("horizon", self.horizon);
        c.set("samples", self.samples);
        c.set("batch_size", self.batch_size);
        c.set("epochs", self.epochs);
        put_adam(c, &self.adam);
    }

    pub fn get(c: &Checkpoint) -> Result<Self> {
        Ok(Self {
            horizon: c.parse("horizon")?,
            samples: c.parse("samples")?,
            batch_size: c.parse("batch_size")?,
            epochs: c.parse("epochs")?,
            adam: get_adam(c)?,
            hidden: split_usize(c.get("hidden")?)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PolicyOutcome {
    pub policy: Policy,
    /// Mean roll-out objective per epoch.
    pub trace: Vec<f64>,
}

/// Adam descent on the roll-out cost. Every epoch visits the start states in
/// a fresh random order in minibatches; all roll-out draws are renewed at
/// every step.
pub fn train_policy(
    model: &dyn Dynamics,
    starts: &Tensor,
    config: &RolloutConfig,
    cost: Cost,
    stream: &mut RngStream,
) -> Result<PolicyOutcome> {
    config.validate()?;
    let sd = model.state_dim();
    if starts.ndim() != 2 || starts.cols() != sd || starts.rows() == 0 {
        return Err(Error::InvalidArgument(format!("train_policy: start states {:?} are not [N, {sd}]", starts.shape())));
    }
    let mut policy = Policy::for_model(model, config.hidden.clone(), 1.0, &mut stream.derive(0))?;
    let mut adam = Adam::new(config.adam, &policy.weights.iter().collect::<Vec<_>>());
    let noise_root = stream.derive(1);
    let n = starts.rows();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for _ in 0..config.epochs {
        let order = stream.permutation(n);
        let mut sum = 0.0;
        let mut count = 0;
        for rows in order.chunks(config.batch_size) {
            let s0 = Tensor::new(
                vec![rows.len(), sd],
                rows.iter().flat_map(|&r| starts.row(r).iter().copied()).collect(),
            )?;
            let noise = RolloutNoise::draw(model, config.samples, rows.len(), config.horizon, &noise_root.derive(step));
            let mut g = Graph::new();
            let w: Vec<NodeId> = policy.weights.iter().map(|t| g.param(t.clone()).node).collect();
            let r = unfold(&mut g, model, &policy, &w, &s0, &noise, cost)?;
            let value = g.value(r.objective).item();
            let grads = g.backward(r.objective).map_err(|e| Error::Diverged { step: step as usize, detail: e.to_string() })?;
            let grads = grads.into_vec();
            if !value.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::Diverged { step: step as usize, detail: format!("roll-out objective {value}") });
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = policy.weights.iter_mut().collect();
            adam.step(&mut params, &refs);
            sum += value;
            count += 1;
            step += 1;
        }
        trace.push(sum / count as f64);
    }
    Ok(PolicyOutcome { policy, trace })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    /// Average reward per step over all episodes.
    pub mean: f64,
    /// Standard error of the per-episode averages.
    pub stderr: f64,
    pub episode_means: Vec<f64>,
}

/// Average reward of `act` on the true dynamics, over `episodes` runs of
/// `steps` steps from `(0, 0)`. Episode `e` draws from `stream.derive(e)`.
pub fn evaluate_with(
    env: &WetChicken,
    episodes: usize,
    steps: usize,
    stream: &RngStream,
    mut act: impl FnMut(State, &mut RngStream) -> Result<Action>,
) -> Result<PolicyEvaluation> {
    if episodes == 0 || steps == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode and one step".into()));
    }
    let mut episode_means = Vec::with_capacity(episodes);
    for e in 0..episodes as u64 {
        let mut s_rng = stream.derive(e);
        let mut s = State::new(0.0, 0.0);
        let mut total = 0.0;
        for _ in 0..steps {
            let a = act(s, &mut s_rng)?;
            s = env.step_random(s, a, &mut s_rng)?;
            total += env.reward(s);
        }
        episode_means.push(total / steps as f64);
    }
    let m = episode_means.iter().sum::<f64>() / episodes as f64;
    let stderr = if episodes > 1 {
        let var = episode_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (episodes - 1) as f64;
        (var / episodes as f64).sqrt()
    } else {
        0.0
    };
    Ok(PolicyEvaluation { mean: m, stderr, episode_means })
}

pub fn evaluate_policy(
    policy: &Policy,
    env: &WetChicken,
    episodes: usize,
    steps: usize,
    stream: &RngStream,
) -> Result<PolicyEvaluation> {
    evaluate_with(env, episodes, steps, stream, |s, _| policy.act_wet_chicken(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_policy_outputs_zero_action() {
        let mut p = Policy::init(vec![0.0; 2], vec![1.0; 2], vec![20, 20], 2, 1.0, &mut RngStream::new(0, 0)).unwrap();
        for w in &mut p.weights {
            *w = Tensor::zeros(w.shape());
        }
        assert_eq!(p.act(&[3.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn policy_checkpoint_round_trip() {
        let p = Policy::init(vec![2.5, 2.0], vec![1.4, 1.3], vec![20, 20], 2, 1.0, &mut RngStream::new(1, 0)).unwrap();
        let back = Policy::from_checkpoint(&Checkpoint::from_bytes(&p.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn cost_definition() {
        let c = Cost::WetChicken { length: 5.0 };
        assert_eq!(c.eval(&[1.0, 5.0]), 0.0);
        assert_eq!(c.eval(&[1.0, 0.0]), 5.0);
    }
}

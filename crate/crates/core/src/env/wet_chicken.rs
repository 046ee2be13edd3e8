use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::dataset::{Dataset, DatasetMeta};

pub const WET_CHICKEN_COLUMNS: [&str; 6] = ["x", "y", "ax", "ay", "dx", "dy"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub ax: f64,
    pub ay: f64,
}

impl State {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl Action {
    pub fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }
}

/// Continuous two-dimensional river with a waterfall at `y = length`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WetChicken {
    pub width: f64,
    pub length: f64,
}

impl Default for WetChicken {
    fn default() -> Self {
        Self { width: 5.0, length: 5.0 }
    }
}

fn in_range(v: f64, lo: f64, hi: f64) -> bool {
    v.is_finite() && (lo..=hi).contains(&v)
}

impl WetChicken {
    pub fn new(width: f64, length: f64) -> Result<Self> {
        if !(width > 0.0 && length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "river dimensions must be positive, got {width} x {length}"
            )));
        }
        Ok(Self { width, length })
    }

    pub fn drift(&self, x: f64) -> f64 {
        3.0 * x / self.width
    }

    pub fn turbulence(&self, x: f64) -> f64 {
        3.5 - self.drift(x)
    }

    /// Pre-clamp position along the river.
    pub fn y_hat(&self, s: State, a: Action, tau: f64) -> f64 {
        s.y + (a.ay - 1.0) + self.drift(s.x) + self.turbulence(s.x) * tau
    }

    pub fn check_state(&self, s: State) -> Result<()> {
        if in_range(s.x, 0.0, self.width) && in_range(s.y, 0.0, self.length) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "state ({}, {}) outside [0, {}] x [0, {}]",
                s.x, s.y, self.width, self.length
            )))
        }
    }

    fn check_inputs(&self, s: State, a: Action, tau: f64) -> Result<()> {
        self.check_state(s)?;
        if !in_range(a.ax, -1.0, 1.0) || !in_range(a.ay, -1.0, 1.0) {
            return Err(Error::Domain(format!("action ({}, {}) outside [-1, 1]^2", a.ax, a.ay)));
        }
        if !in_range(tau, -1.0, 1.0) {
            return Err(Error::Domain(format!("tau {tau} outside [-1, 1]")));
        }
        Ok(())
    }

    /// One transition. `y_hat == length` is not a fall.
    pub fn step(&self, s: State, a: Action, tau: f64) -> Result<State> {
        self.check_inputs(s, a, tau)?;
        let y_hat = self.y_hat(s, a, tau);
        let xa = s.x + a.ax;
        let x = if xa < 0.0 || y_hat > self.length {
            0.0
        } else if xa > self.width {
            self.width
        } else {
            xa
        };
        let y = if y_hat < 0.0 || y_hat > self.length { 0.0 } else { y_hat };
        Ok(State { x, y })
    }

    pub fn step_random(&self, s: State, a: Action, stream: &mut RngStream) -> Result<State> {
        let tau = stream.uniform(-1.0, 1.0)?;
        self.step(s, a, tau)
    }

    pub fn reward(&self, s: State) -> f64 {
        -(self.length - s.y)
    }

    /// Probability that the next step goes over the waterfall.
    pub fn fall_probability(&self, s: State, a: Action) -> f64 {
        let base = self.y_hat(s, a, 0.0);
        let st = self.turbulence(s.x);
        if st <= 0.0 {
            return if base > self.length { 1.0 } else { 0.0 };
        }
        // y_hat > l  <=>  tau > (l - base) / st
        let t = (self.length - base) / st;
        ((1.0 - t) / 2.0).clamp(0.0, 1.0)
    }
}

/// Reward of the default river.
pub fn reward(s: State) -> f64 {
    WetChicken::default().reward(s)
}

/// `n` transitions from uniform states and actions, with state-change targets.
pub fn gen_wet_chicken_batch(env: &WetChicken, n: usize, stream: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut x = Vec::with_capacity(n * 4);
    let mut y = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let s = State::new(stream.uniform(0.0, env.width)?, stream.uniform(0.0, env.length)?);
        let a = Action::new(stream.uniform(-1.0, 1.0)?, stream.uniform(-1.0, 1.0)?);
        let next = env.step_random(s, a, stream)?;
        x.extend_from_slice(&[s.x, s.y, a.ax, a.ay]);
        y.extend_from_slice(&[next.x - s.x, next.y - s.y]);
    }
    Dataset::new(
        Tensor::new(vec![n, 4], x)?,
        Tensor::new(vec![n, 2], y)?,
        WET_CHICKEN_COLUMNS.iter().map(|c| c.to_string()).collect(),
        DatasetMeta::new("wet-chicken", stream.master_seed(), n),
    )
}

/// How transition batches are collected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Independent uniform states and actions.
    Uniform,
    /// One long episode from the origin under uniformly random actions.
    RandomWalk,
}

impl Sampling {
    pub fn name(self) -> &'static str {
        match self {
            Sampling::Uniform => "uniform",
            Sampling::RandomWalk => "random-walk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Sampling::Uniform),
            "random-walk" => Some(Sampling::RandomWalk),
            _ => None,
        }
    }
}

/// `n` transitions collected with the given protocol.
pub fn gen_wet_chicken(
    env: &WetChicken,
    n: usize,
    sampling: Sampling,
    stream: &mut RngStream,
) -> Result<Dataset> {
    match sampling {
        Sampling::Uniform => gen_wet_chicken_batch(env, n, stream),
        Sampling::RandomWalk => gen_wet_chicken_walk(env, n, stream),
    }
}

/// `n` consecutive transitions of a random-action episode started at the
/// origin. Falls reset the canoeist, so the walk never terminates.
pub fn gen_wet_chicken_walk(env: &WetChicken, n: usize, stream: &mut RngStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut x = Vec::with_capacity(n * 4);
    let mut y = Vec::with_capacity(n * 2);
    let mut s = State::new(0.0, 0.0);
    for _ in 0..n {
        let a = Action::new(stream.uniform(-1.0, 1.0)?, stream.uniform(-1.0, 1.0)?);
        let next = env.step_random(s, a, stream)?;
        x.extend_from_slice(&[s.x, s.y, a.ax, a.ay]);
        y.extend_from_slice(&[next.x - s.x, next.y - s.y]);
        s = next;
    }
    Dataset::new(
        Tensor::new(vec![n, 4], x)?,
        Tensor::new(vec![n, 2], y)?,
        WET_CHICKEN_COLUMNS.iter().map(|c| c.to_string()).collect(),
        DatasetMeta::new("wet-chicken-walk", stream.master_seed(), n),
    )
}

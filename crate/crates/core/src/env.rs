//! Environments, rollouts and the shared replay buffer.
//!
//! Built-in tasks:
//!
//! - `pointmass`: 2-D point mass that must park at the origin. Terminates
//!   (with a +10 bonus) once within 0.05 of the goal; horizon 100.
//! - `pendulum`: torque-limited swing-up; never terminates; horizon 200.
//! - `tabular-chain`: 3-state, 2-action deterministic ring with one-hot
//!   states, used by value-learning checks.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::policy::{policy_action, ActionSpec, PolicyRepresentation, SharedRepresentation};
use crate::{Error, Result};

/// The one RNG type used everywhere, so every stream is reproducible.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action: ActionSpec,
    pub horizon: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Genuine termination only; horizon cut-offs are handled by the caller.
    pub terminal: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    Pendulum,
    TabularChain,
}

impl EnvKind {
    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvKind::PointMass => Box::new(PointMass::new()),
            EnvKind::Pendulum => Box::new(Pendulum::new()),
            EnvKind::TabularChain => Box::new(TabularChain::new()),
        }
    }

    pub fn spec(self) -> EnvSpec {
        self.make().spec().clone()
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" => Ok(EnvKind::PointMass),
            "pendulum" => Ok(EnvKind::Pendulum),
            "tabular-chain" => Ok(EnvKind::TabularChain),
            other => Err(Error::Config(format!("unknown environment '{other}'"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::PointMass => "pointmass",
            EnvKind::Pendulum => "pendulum",
            EnvKind::TabularChain => "tabular-chain",
        })
    }
}

fn check_action(spec: &EnvSpec, action: &[f64]) -> Result<Vec<f64>> {
    if action.len() != spec.action.dim() {
        return Err(Error::shape("env action", spec.action.dim(), action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("environment action".into()));
    }
    let mut a = action.to_vec();
    if spec.action.clamp(&mut a) {
        log::debug!("action {action:?} clamped to {a:?}");
    }
    Ok(a)
}

pub const POINTMASS_GOAL_RADIUS: f64 = 0.05;
pub const POINTMASS_GOAL_BONUS: f64 = 10.0;

/// Point mass on `[-1, 1]²` driven by acceleration commands.
#[derive(Debug, Clone)]
pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    done: bool,
}

impl PointMass {
    pub fn new() -> Self {
        PointMass {
            spec: EnvSpec {
                state_dim: 4,
                action: ActionSpec::symmetric(2, 1.0),
                horizon: 100,
                gamma: 0.99,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            done: false,
        }
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.done = false;
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        let px = rng.random_range(-1.0..=1.0);
        let py = rng.random_range(-1.0..=1.0);
        self.set_state([px, py], [0.0, 0.0]);
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Env("pointmass stepped after termination".into()));
        }
        let a = check_action(&self.spec, action)?;
        for i in 0..2 {
            self.vel[i] = (self.vel[i] + 0.1 * a[i]).clamp(-1.0, 1.0);
            self.pos[i] = (self.pos[i] + 0.1 * self.vel[i]).clamp(-1.0, 1.0);
        }
        let dist = self.pos[0].hypot(self.pos[1]);
        let terminal = dist < POINTMASS_GOAL_RADIUS;
        let reward = if terminal {
            POINTMASS_GOAL_BONUS - dist
        } else {
            -dist
        };
        self.done = terminal;
        Ok(StepResult {
            next_state: self.observe(),
            reward,
            terminal,
        })
    }
}

/// Wrap an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Classic torque-limited pendulum; `θ = 0` is upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
}

impl Pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;

    pub fn new() -> Self {
        Pendulum {
            spec: EnvSpec {
                state_dim: 3,
                action: ActionSpec::symmetric(1, Self::MAX_TORQUE),
                horizon: 200,
                gamma: 0.99,
            },
            theta: PI,
            theta_dot: 0.0,
        }
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.theta = rng.random_range(-PI..=PI);
        self.theta_dot = rng.random_range(-1.0..=1.0);
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let u = check_action(&self.spec, action)?[0];
        let th = wrap_angle(self.theta);
        let cost = th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u;
        let (g, m, l) = (Self::GRAVITY, Self::MASS, Self::LENGTH);
        let acc = 3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 * u / (m * l * l);
        self.theta_dot = (self.theta_dot + acc * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * Self::DT;
        Ok(StepResult {
            next_state: self.observe(),
            reward: -cost,
            terminal: false,
        })
    }
}

/// Deterministic 3-state ring: action 0 steps forward, action 1 steps back.
/// Continuous action `a ∈ [-1, 1]` selects discrete action 1 when `a ≥ 0`,
/// else 0. Always starts in state 0.
///
/// The rewards are picked so that five of the eight deterministic policies
/// have clearly separated values from the start state.
#[derive(Debug, Clone)]
pub struct TabularChain {
    spec: EnvSpec,
    state: usize,
}

impl TabularChain {
    pub const STATES: usize = 3;
    pub const ACTIONS: usize = 2;
    /// `NEXT[s][a]`
    pub const NEXT: [[usize; 2]; 3] = [[1, 2], [2, 0], [0, 1]];
    /// `REWARD[s][a]`
    pub const REWARD: [[f64; 2]; 3] = [[0.2, 1.0], [0.3, 0.7], [0.2, 1.0]];

    pub fn new() -> Self {
        TabularChain {
            spec: EnvSpec {
                state_dim: Self::STATES,
                action: ActionSpec::symmetric(1, 1.0),
                horizon: 200,
                gamma: 0.8,
            },
            state: 0,
        }
    }

    pub fn one_hot(state: usize) -> Vec<f64> {
        let mut v = vec![0.0; Self::STATES];
        v[state] = 1.0;
        v
    }

    pub fn state_index(obs: &[f64]) -> Option<usize> {
        obs.iter().position(|&v| v == 1.0)
    }

    pub fn discrete_action(a: f64) -> usize {
        usize::from(a >= 0.0)
    }

    /// Continuous action that maps to discrete action `a`.
    pub fn continuous_action(a: usize) -> f64 {
        if a == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn set_state(&mut self, s: usize) {
        self.state = s;
    }
}

impl Default for TabularChain {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for TabularChain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.state = 0;
        Self::one_hot(0)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = Self::discrete_action(check_action(&self.spec, action)?[0]);
        let reward = Self::REWARD[self.state][a];
        self.state = Self::NEXT[self.state][a];
        Ok(StepResult {
            next_state: Self::one_hot(self.state),
            reward,
            terminal: false,
        })
    }
}

/// One `(s, a, r, s′, terminal)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Result of running one policy in one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
    pub steps: usize,
    pub terminated: bool,
    /// State after the last step (the reset state when no step was taken).
    pub final_state: Vec<f64>,
}

/// Reset `env` and run policy `(z, w)` for up to `max_steps` steps (never past
/// the environment horizon).
///
/// `noise_sigma` is relative: Gaussian noise with standard deviation
/// `noise_sigma · (high − low)/2` is added per dimension and the result is
/// clamped to the action box.
pub fn rollout(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    env: &mut dyn Environment,
    max_steps: usize,
    noise_sigma: f64,
    rng: &mut SimRng,
) -> Result<Rollout> {
    let state = env.reset(rng);
    continue_rollout(z, w, env, state, max_steps, noise_sigma, rng)
}

/// Like [`rollout`] but from a state the environment is already in.
pub fn continue_rollout(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    env: &mut dyn Environment,
    mut state: Vec<f64>,
    max_steps: usize,
    noise_sigma: f64,
    rng: &mut SimRng,
) -> Result<Rollout> {
    let spec = env.spec().clone();
    let limit = max_steps.min(spec.horizon);
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut transitions = Vec::with_capacity(limit);
    let mut total_reward = 0.0;
    let mut terminated = false;
    for _ in 0..limit {
        let mut action = policy_action(z, w, &spec.action, &state)?;
        if let Some(dist) = &noise {
            for (i, a) in action.iter_mut().enumerate() {
                *a += dist.sample(rng) * spec.action.half_range(i);
            }
            spec.action.clamp(&mut action);
        }
        let out = env.step(&action)?;
        if !out.reward.is_finite() {
            return Err(Error::NonFinite("environment reward".into()));
        }
        total_reward += out.reward;
        transitions.push(Transition {
            state: std::mem::take(&mut state),
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            terminal: out.terminal,
        });
        state = out.next_state;
        if out.terminal {
            terminated = true;
            break;
        }
    }
    Ok(Rollout {
        steps: transitions.len(),
        transitions,
        total_reward,
        terminated,
        final_state: state,
    })
}

/// A sampled minibatch in array form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn from_transitions<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let items: Vec<&Transition> = items.into_iter().collect();
        let first = items
            .first()
            .ok_or_else(|| Error::Buffer("cannot build an empty batch".into()))?;
        let (sd, ad) = (first.state.len(), first.action.len());
        let n = items.len();
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        let mut next = Vec::with_capacity(n * sd);
        let mut rewards = Vec::with_capacity(n);
        let mut terminals = Vec::with_capacity(n);
        for t in &items {
            if t.state.len() != sd || t.next_state.len() != sd || t.action.len() != ad {
                return Err(Error::shape(
                    "batch transition",
                    format!("({sd}, {ad})"),
                    format!("({}, {})", t.state.len(), t.action.len()),
                ));
            }
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            next.extend_from_slice(&t.next_state);
            rewards.push(t.reward);
            terminals.push(t.terminal);
        }
        let shaped = |v: Vec<f64>, w: usize| {
            Array2::from_shape_vec((n, w), v).map_err(|e| Error::shape("batch", w, e))
        };
        Ok(Batch {
            states: shaped(states, sd)?,
            actions: shaped(actions, ad)?,
            rewards: Array1::from(rewards),
            next_states: shaped(next, sd)?,
            terminals,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Bounded FIFO store of transitions shared by every agent.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config(
                "replay buffer capacity must be positive".into(),
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            data: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn extend<I: IntoIterator<Item = Transition>>(&mut self, items: I) {
        for t in items {
            self.push(t);
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
        if self.data.is_empty() {
            return Err(Error::Buffer("sampling from an empty buffer".into()));
        }
        if batch == 0 || batch > self.data.len() {
            return Err(Error::Buffer(format!(
                "batch of {batch} requested from {} transitions",
                self.data.len()
            )));
        }
        Ok((0..batch)
            .map(|_| rng.random_range(0..self.data.len()))
            .collect())
    }

    pub fn sample(&self, batch: usize, rng: &mut SimRng) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        Batch::from_transitions(idx.iter().map(|&i| &self.data[i]))
    }
}

//! Gradient-based learning: TD regression for the critic and the PeVFA,
//! the actor update over `W_rl`, the shared-encoder update, and target
//! network upkeep.
//!
//! Every update touches exactly one parameter group. The loss functions are
//! exposed separately from the optimizer steps so gradients can be checked.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{Batch, ReplayBuffer, SimRng};
use crate::nn::{soft_update, Adam, AdamConfig, MlpGrad};
use crate::policy::{
    act, act_backward, policy_forward, policy_gradient, ActionSpec, PolicyRepresentation,
    SharedRepresentation,
};
use crate::value::{
    ActionValue, Critic, HeadsGrad, PeVfa, PeVfaShape, PolicyActionValue, QMode, RegressionGroup,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlMode {
    /// Twin heads, target smoothing, delayed actor.
    Td3,
    /// Single heads, no smoothing, actor every step.
    Ddpg,
}

impl RlMode {
    pub fn twin(self) -> bool {
        self == RlMode::Td3
    }
}

impl FromStr for RlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "td3" => Ok(RlMode::Td3),
            "ddpg" => Ok(RlMode::Ddpg),
            other => Err(Error::Config(format!("unknown RL mode '{other}'"))),
        }
    }
}

impl fmt::Display for RlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RlMode::Td3 => "td3",
            RlMode::Ddpg => "ddpg",
        })
    }
}

/// How PeVFA minibatches are paired with population members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicySampling {
    /// One member for the whole minibatch.
    PerBatch,
    /// An independent member for every transition.
    PerTransition,
}

impl FromStr for PolicySampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(PolicySampling::PerBatch),
            "transition" => Ok(PolicySampling::PerTransition),
            other => Err(Error::Config(format!("unknown PeVFA sampling '{other}'"))),
        }
    }
}

impl fmt::Display for PolicySampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicySampling::PerBatch => "batch",
            PolicySampling::PerTransition => "transition",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateConfig {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    /// Population members whose PeVFA values drive the encoder update.
    pub sharedrep_policies: usize,
    /// Include the critic's value of `π_rl` in the encoder loss.
    pub sharedrep_critic: bool,
    /// Scale the PeVFA terms of the encoder loss by `1/K`.
    pub sharedrep_normalize: bool,
    pub mode: RlMode,
    /// Smoothing noise, relative to the action half-range.
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub policy_delay: usize,
    pub pevfa_sampling: PolicySampling,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            gamma: 0.99,
            tau: 0.005,
            batch_size: 64,
            sharedrep_policies: 1,
            sharedrep_critic: true,
            sharedrep_normalize: false,
            mode: RlMode::Td3,
            target_noise: 0.2,
            target_noise_clip: 0.4,
            policy_delay: 2,
            pevfa_sampling: PolicySampling::PerBatch,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.policy_delay == 0 {
            return Err(Error::Config("policy delay must be at least 1".into()));
        }
        if self.target_noise < 0.0 || self.target_noise_clip < 0.0 {
            return Err(Error::Config(
                "target noise settings must be non-negative".into(),
            ));
        }
        if !self.sharedrep_critic && self.sharedrep_policies == 0 {
            return Err(Error::Config(
                "the encoder loss needs the critic term or at least one PeVFA term".into(),
            ));
        }
        Ok(())
    }

    /// Critic updates per actor/target update.
    pub fn effective_delay(&self) -> usize {
        match self.mode {
            RlMode::Td3 => self.policy_delay,
            RlMode::Ddpg => 1,
        }
    }
}

/// The RL agent's policy matrix and its target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct RlAgent {
    pub w: PolicyRepresentation,
    pub w_target: PolicyRepresentation,
    pub explore_sigma: f64,
}

impl RlAgent {
    pub fn new(w: PolicyRepresentation, explore_sigma: f64) -> Self {
        RlAgent {
            w_target: w.clone(),
            w,
            explore_sigma,
        }
    }
}

fn bootstrap_targets(
    rewards: &Array1<f64>,
    terminals: &[bool],
    next_q: &Array1<f64>,
    gamma: f64,
) -> Array1<f64> {
    Array1::from_iter(
        rewards
            .iter()
            .zip(terminals)
            .zip(next_q)
            .map(|((&r, &done), &q)| if done { r } else { r + gamma * q }),
    )
}

/// Target actions `π′(s′)` from the target encoder and target matrix, with
/// clipped smoothing noise in TD3 mode.
pub fn target_actions(
    z_target: &SharedRepresentation,
    w_target: &PolicyRepresentation,
    spec: &ActionSpec,
    next_states: ArrayView2<f64>,
    cfg: &UpdateConfig,
    rng: &mut SimRng,
) -> Result<Array2<f64>> {
    let mut a = policy_forward(z_target, w_target, spec, next_states)?;
    if cfg.mode == RlMode::Td3 && cfg.target_noise > 0.0 {
        for mut row in a.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let h = spec.half_range(j);
                let noise: f64 = rng.sample(StandardNormal);
                let eps = (noise * cfg.target_noise * h)
                    .clamp(-cfg.target_noise_clip * h, cfg.target_noise_clip * h);
                *v = (*v + eps).clamp(spec.low()[j], spec.high()[j]);
            }
        }
    }
    Ok(a)
}

/// `y = r + γ·min Q_ψ′(s′, π′(s′))`, masked on termination.
pub fn critic_targets(
    critic_target: &Critic,
    z_target: &SharedRepresentation,
    w_target: &PolicyRepresentation,
    spec: &ActionSpec,
    batch: &Batch,
    cfg: &UpdateConfig,
    rng: &mut SimRng,
) -> Result<Array1<f64>> {
    let next_a = target_actions(z_target, w_target, spec, batch.next_states.view(), cfg, rng)?;
    let next_q = critic_target.eval(batch.next_states.view(), next_a.view(), QMode::Min)?;
    Ok(bootstrap_targets(
        &batch.rewards,
        &batch.terminals,
        &next_q,
        cfg.gamma,
    ))
}

/// `y = r + γ·min Q_θ′(s′, π_i(s′), W_i)` for rows paired with policy `w`.
#[allow(clippy::too_many_arguments)]
pub fn pevfa_targets(
    pevfa_target: &PeVfa,
    z_target: &SharedRepresentation,
    w: &PolicyRepresentation,
    spec: &ActionSpec,
    next_states: ArrayView2<f64>,
    rewards: &Array1<f64>,
    terminals: &[bool],
    gamma: f64,
) -> Result<Array1<f64>> {
    let next_a = policy_forward(z_target, w, spec, next_states)?;
    let next_q = pevfa_target.eval(next_states, next_a.view(), w, QMode::Min)?;
    Ok(bootstrap_targets(rewards, terminals, &next_q, gamma))
}

/// Rows of `batch` grouped by the population member they are paired with.
#[derive(Debug, Clone)]
pub struct PolicyGroup {
    pub member: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub targets: Array1<f64>,
}

fn select_rows(a: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    a.select(Axis(0), rows)
}

/// Build PeVFA regression groups with their TD targets.
#[allow(clippy::too_many_arguments)]
pub fn pevfa_groups(
    pevfa_target: &PeVfa,
    z_target: &SharedRepresentation,
    population: &[PolicyRepresentation],
    spec: &ActionSpec,
    batch: &Batch,
    cfg: &UpdateConfig,
    rng: &mut SimRng,
) -> Result<Vec<PolicyGroup>> {
    if population.is_empty() {
        return Err(Error::Config(
            "PeVFA update needs a non-empty population".into(),
        ));
    }
    let assignment: Vec<usize> = match cfg.pevfa_sampling {
        PolicySampling::PerBatch => vec![rng.random_range(0..population.len()); batch.len()],
        PolicySampling::PerTransition => (0..batch.len())
            .map(|_| rng.random_range(0..population.len()))
            .collect(),
    };
    let mut groups = Vec::new();
    for member in 0..population.len() {
        let rows: Vec<usize> = (0..batch.len())
            .filter(|&i| assignment[i] == member)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let next = select_rows(&batch.next_states, &rows);
        let rewards = batch.rewards.select(Axis(0), &rows);
        let terminals: Vec<bool> = rows.iter().map(|&i| batch.terminals[i]).collect();
        let targets = pevfa_targets(
            pevfa_target,
            z_target,
            &population[member],
            spec,
            next.view(),
            &rewards,
            &terminals,
            cfg.gamma,
        )?;
        groups.push(PolicyGroup {
            member,
            states: select_rows(&batch.states, &rows),
            actions: select_rows(&batch.actions, &rows),
            targets,
        });
    }
    Ok(groups)
}

pub fn pevfa_loss_and_grad(
    pevfa: &PeVfa,
    population: &[PolicyRepresentation],
    groups: &[PolicyGroup],
) -> Result<(f64, HeadsGrad)> {
    let regs: Vec<RegressionGroup<'_>> = groups
        .iter()
        .map(|g| RegressionGroup {
            policy: &population[g.member],
            states: g.states.view(),
            actions: g.actions.view(),
            targets: &g.targets,
        })
        .collect();
    pevfa.regression(&regs)
}

/// `−mean Q₁(s, π_rl(s))` and its gradient with respect to `W_rl` only.
pub fn actor_loss_and_grad(
    w: &PolicyRepresentation,
    z: &SharedRepresentation,
    critic: &dyn ActionValue,
    spec: &ActionSpec,
    states: ArrayView2<f64>,
) -> Result<(f64, PolicyRepresentation)> {
    let features = z.encode(states)?;
    let actions = act(&features, w, spec)?;
    let (q, dq_da) = critic.value_and_action_grad(states, actions.view())?;
    let b = states.nrows() as f64;
    let loss = -q.sum() / b;
    let grad_a = dq_da.mapv(|g| -g / b);
    let (grad_w, _) = act_backward(&features, w, spec, grad_a.view())?;
    Ok((loss, policy_gradient(grad_w)))
}

/// Encoder loss `−mean[Q_ψ(s, π_rl(s)) + Σ_j c·Q_θ(s, π_j(s), W_j)]` and its
/// gradient with respect to the encoder only. `c` is `1/K` when
/// `normalize` is set, else 1.
#[allow(clippy::too_many_arguments)]
pub fn shared_rep_loss_and_grad(
    z: &SharedRepresentation,
    critic: Option<&dyn ActionValue>,
    w_rl: &PolicyRepresentation,
    pevfa: &dyn PolicyActionValue,
    policies: &[&PolicyRepresentation],
    normalize: bool,
    spec: &ActionSpec,
    states: ArrayView2<f64>,
) -> Result<(f64, MlpGrad)> {
    if critic.is_none() && policies.is_empty() {
        return Err(Error::Config("encoder loss has no terms".into()));
    }
    let (features, cache) = z.encode_with_cache(states)?;
    let b = states.nrows() as f64;
    let mut loss = 0.0;
    let mut grad_z = Array2::<f64>::zeros((states.nrows(), z.feature_dim()));
    if let Some(critic) = critic {
        let a = act(&features, w_rl, spec)?;
        let (q, dq_da) = critic.value_and_action_grad(states, a.view())?;
        loss -= q.sum() / b;
        let (_, gz) = act_backward(&features, w_rl, spec, dq_da.mapv(|g| -g / b).view())?;
        grad_z += &gz;
    }
    let weight = if normalize && !policies.is_empty() {
        1.0 / policies.len() as f64
    } else {
        1.0
    };
    for w in policies {
        let a = act(&features, w, spec)?;
        let (q, dq_da) = pevfa.value_and_action_grad(states, a.view(), w)?;
        loss -= weight * q.sum() / b;
        let (_, gz) = act_backward(&features, w, spec, dq_da.mapv(|g| -weight * g / b).view())?;
        grad_z += &gz;
    }
    let grad = z.backward(&cache, grad_z.view())?;
    Ok((loss, grad))
}

/// Scalar losses of one update step; `None` when that update did not run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub critic: Option<f64>,
    pub pevfa: Option<f64>,
    pub actor: Option<f64>,
    pub shared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerConfig {
    pub update: UpdateConfig,
    pub lr_critic: f64,
    pub lr_pevfa: f64,
    pub lr_actor: f64,
    pub lr_shared: f64,
    pub explore_sigma: f64,
    pub encoder_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub pevfa_hidden: Vec<usize>,
    pub pevfa_encoder: Vec<usize>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            update: UpdateConfig::default(),
            lr_critic: 1e-3,
            lr_pevfa: 1e-3,
            lr_actor: 1e-3,
            lr_shared: 1e-3,
            explore_sigma: 0.1,
            encoder_hidden: vec![64, 32],
            critic_hidden: vec![64, 64],
            pevfa_hidden: vec![64, 64],
            pevfa_encoder: vec![64, 64, 64],
        }
    }
}

/// Everything the gradient-based side owns: encoder, critic, PeVFA, the RL
/// agent, their targets and optimizers.
#[derive(Debug, Clone)]
pub struct Learner {
    pub cfg: LearnerConfig,
    pub spec: ActionSpec,
    pub z: SharedRepresentation,
    pub z_target: SharedRepresentation,
    pub critic: Critic,
    pub critic_target: Critic,
    pub pevfa: PeVfa,
    pub pevfa_target: PeVfa,
    pub agent: RlAgent,
    opt_z: Adam,
    opt_critic: Adam,
    opt_pevfa: Adam,
    opt_actor: Adam,
    critic_steps: u64,
    pevfa_steps: u64,
}

impl Learner {
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        spec: ActionSpec,
        cfg: LearnerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.update.validate()?;
        let z = SharedRepresentation::init(state_dim, &cfg.encoder_hidden, rng)?;
        let d = z.feature_dim();
        let twin = cfg.update.mode.twin();
        let critic = Critic::init(state_dim, spec.dim(), &cfg.critic_hidden, twin, rng);
        let pevfa = PeVfa::init(
            &PeVfaShape {
                state_dim,
                action_dim: spec.dim(),
                feature_dim: d,
                encoder_widths: cfg.pevfa_encoder.clone(),
                head_hidden: cfg.pevfa_hidden.clone(),
                twin,
            },
            rng,
        )?;
        let agent = RlAgent::new(
            PolicyRepresentation::init(d, spec.dim(), rng),
            cfg.explore_sigma,
        );
        Ok(Self::from_parts(cfg, spec, z, critic, pevfa, agent))
    }

    /// Assemble a learner; targets start as exact copies.
    pub fn from_parts(
        cfg: LearnerConfig,
        spec: ActionSpec,
        z: SharedRepresentation,
        critic: Critic,
        pevfa: PeVfa,
        agent: RlAgent,
    ) -> Self {
        let opt_z = Adam::new(&z, AdamConfig::with_learning_rate(cfg.lr_shared));
        let opt_critic = Adam::new(&critic, AdamConfig::with_learning_rate(cfg.lr_critic));
        let opt_pevfa = Adam::new(&pevfa, AdamConfig::with_learning_rate(cfg.lr_pevfa));
        let opt_actor = Adam::new(&agent.w, AdamConfig::with_learning_rate(cfg.lr_actor));
        Learner {
            cfg,
            spec,
            z_target: z.clone(),
            z,
            critic_target: critic.clone(),
            critic,
            pevfa_target: pevfa.clone(),
            pevfa,
            agent,
            opt_z,
            opt_critic,
            opt_pevfa,
            opt_actor,
            critic_steps: 0,
            pevfa_steps: 0,
        }
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    pub fn update_critic(&mut self, batch: &Batch, rng: &mut SimRng) -> Result<f64> {
        let y = critic_targets(
            &self.critic_target,
            &self.z_target,
            &self.agent.w_target,
            &self.spec,
            batch,
            &self.cfg.update,
            rng,
        )?;
        let (loss, grad) = self
            .critic
            .regression(batch.states.view(), batch.actions.view(), &y)?;
        check_loss("critic", loss)?;
        self.opt_critic.step(&mut self.critic, &grad)?;
        self.critic_steps += 1;
        Ok(loss)
    }

    pub fn update_pevfa(
        &mut self,
        batch: &Batch,
        population: &[PolicyRepresentation],
        rng: &mut SimRng,
    ) -> Result<f64> {
        let groups = pevfa_groups(
            &self.pevfa_target,
            &self.z_target,
            population,
            &self.spec,
            batch,
            &self.cfg.update,
            rng,
        )?;
        let (loss, grad) = pevfa_loss_and_grad(&self.pevfa, population, &groups)?;
        check_loss("PeVFA", loss)?;
        self.opt_pevfa.step(&mut self.pevfa, &grad)?;
        Ok(loss)
    }

    pub fn update_actor(&mut self, states: ArrayView2<f64>) -> Result<f64> {
        let (loss, grad) =
            actor_loss_and_grad(&self.agent.w, &self.z, &self.critic, &self.spec, states)?;
        check_loss("actor", loss)?;
        self.opt_actor.step(&mut self.agent.w, &grad)?;
        Ok(loss)
    }

    /// Sample `K` members without replacement and take one encoder step.
    pub fn update_shared(
        &mut self,
        states: ArrayView2<f64>,
        population: &[PolicyRepresentation],
        rng: &mut SimRng,
    ) -> Result<f64> {
        let u = &self.cfg.update;
        let k = u.sharedrep_policies.min(population.len());
        if u.sharedrep_policies > population.len() && !population.is_empty() {
            return Err(Error::Config(format!(
                "encoder loss wants {} policies from a population of {}",
                u.sharedrep_policies,
                population.len()
            )));
        }
        let chosen: Vec<&PolicyRepresentation> = index::sample(rng, population.len(), k)
            .iter()
            .map(|i| &population[i])
            .collect();
        let critic: Option<&dyn ActionValue> = if u.sharedrep_critic || chosen.is_empty() {
            Some(&self.critic)
        } else {
            None
        };
        let (loss, grad) = shared_rep_loss_and_grad(
            &self.z,
            critic,
            &self.agent.w,
            &self.pevfa,
            &chosen,
            u.sharedrep_normalize,
            &self.spec,
            states,
        )?;
        check_loss("shared representation", loss)?;
        self.opt_z.step(&mut self.z, &grad)?;
        Ok(loss)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        let tau = self.cfg.update.tau;
        soft_update(&mut self.critic_target, &self.critic, tau)?;
        soft_update(&mut self.pevfa_target, &self.pevfa, tau)?;
        soft_update(&mut self.agent.w_target, &self.agent.w, tau)?;
        soft_update(&mut self.z_target, &self.z, tau)?;
        Ok(())
    }

    /// One full update step on a fresh minibatch: PeVFA (if there is a
    /// population), critic, then on the delay cadence actor and targets,
    /// then the shared encoder.
    pub fn update(
        &mut self,
        buffer: &ReplayBuffer,
        population: &[PolicyRepresentation],
        rng: &mut SimRng,
    ) -> Result<StepLosses> {
        let batch = buffer.sample(self.cfg.update.batch_size.min(buffer.len()), rng)?;
        let pevfa = if population.is_empty() {
            None
        } else {
            Some(self.update_pevfa(&batch, population, rng)?)
        };
        let critic = Some(self.update_critic(&batch, rng)?);
        let actor = if self
            .critic_steps
            .is_multiple_of(self.cfg.update.effective_delay() as u64)
        {
            let loss = self.update_actor(batch.states.view())?;
            self.update_targets()?;
            Some(loss)
        } else {
            None
        };
        let shared = self.update_shared(batch.states.view(), population, rng)?;
        Ok(StepLosses {
            critic,
            pevfa,
            actor,
            shared,
        })
    }

    /// Update step without an RL agent: PeVFA, targets on the delay cadence,
    /// then the encoder from PeVFA terms alone.
    pub fn update_population_only(
        &mut self,
        buffer: &ReplayBuffer,
        population: &[PolicyRepresentation],
        rng: &mut SimRng,
    ) -> Result<StepLosses> {
        if self.cfg.update.sharedrep_critic {
            return Err(Error::Config("the critic term needs an RL agent".into()));
        }
        let batch = buffer.sample(self.cfg.update.batch_size.min(buffer.len()), rng)?;
        let pevfa = Some(self.update_pevfa(&batch, population, rng)?);
        self.pevfa_steps += 1;
        if self
            .pevfa_steps
            .is_multiple_of(self.cfg.update.effective_delay() as u64)
        {
            self.update_targets()?;
        }
        let shared = self.update_shared(batch.states.view(), population, rng)?;
        Ok(StepLosses {
            critic: None,
            pevfa,
            actor: None,
            shared,
        })
    }
}

fn check_loss(name: &str, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} loss")))
    }
}

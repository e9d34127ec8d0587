//! Run configuration: a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. A `preset` key applies a named bundle first, and every other key
//! in the file overrides it. [`RunConfig::to_text`] writes the fully resolved
//! configuration, which parses back to an identical value.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::env::EnvKind;
use crate::evolution::{CemConfig, EvolutionConfig, MutationConfig, OperatorLevel};
use crate::reinforcement::{LearnerConfig, PolicySampling, RlMode, UpdateConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvolutionMode {
    Ga,
    Cem,
    None,
}

impl FromStr for EvolutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ga" => Ok(EvolutionMode::Ga),
            "cem" => Ok(EvolutionMode::Cem),
            "none" => Ok(EvolutionMode::None),
            other => Err(Error::Config(format!("unknown evolution mode '{other}'"))),
        }
    }
}

impl fmt::Display for EvolutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvolutionMode::Ga => "ga",
            EvolutionMode::Cem => "cem",
            EvolutionMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub mode: RlMode,
    pub evolution: EvolutionMode,
    /// Train and roll out the RL agent. Off gives evolution over the shared
    /// encoder alone.
    pub rl_agent: bool,
    pub pop_size: usize,
    pub elites: usize,
    /// Probability of full-episode fitness in an iteration.
    pub mc_probability: f64,
    pub surrogate_horizon: usize,
    pub sharedrep_policies: usize,
    pub sharedrep_critic: bool,
    pub sharedrep_normalize: bool,
    pub mutation_alpha: f64,
    pub mutation_beta: f64,
    pub crossover_op: OperatorLevel,
    pub mutation_op: OperatorLevel,
    pub param_crossover_points: usize,
    pub param_mutation_sigma: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub buffer_capacity: usize,
    pub lr_critic: f64,
    pub lr_pevfa: f64,
    pub lr_actor: f64,
    pub lr_shared: f64,
    pub explore_sigma: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub policy_delay: usize,
    pub encoder_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub pevfa_hidden: Vec<usize>,
    pub pevfa_encoder: Vec<usize>,
    pub pevfa_sampling: PolicySampling,
    pub total_steps: usize,
    /// Generations between injections of the RL agent; 0 disables.
    pub injection_period: usize,
    pub fitness_episodes: usize,
    pub cem_sigma_init: f64,
    pub cem_top: usize,
    pub cem_floor: f64,
    pub cem_elitism: bool,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Stop once the champion's evaluation return reaches this value.
    pub target_return: Option<f64>,
    pub parallel_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::PointMass,
            mode: RlMode::Td3,
            evolution: EvolutionMode::Ga,
            rl_agent: true,
            pop_size: 5,
            elites: 1,
            mc_probability: 0.8,
            surrogate_horizon: 50,
            sharedrep_policies: 1,
            sharedrep_critic: true,
            sharedrep_normalize: false,
            mutation_alpha: 1.0,
            mutation_beta: 0.2,
            crossover_op: OperatorLevel::Behavior,
            mutation_op: OperatorLevel::Behavior,
            param_crossover_points: 1,
            param_mutation_sigma: 0.1,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 64,
            warmup_steps: 1000,
            buffer_capacity: 100_000,
            lr_critic: 1e-3,
            lr_pevfa: 1e-3,
            lr_actor: 1e-3,
            lr_shared: 1e-3,
            explore_sigma: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.4,
            policy_delay: 2,
            encoder_hidden: vec![64, 32],
            critic_hidden: vec![64, 64],
            pevfa_hidden: vec![64, 64],
            pevfa_encoder: vec![64, 64, 64],
            pevfa_sampling: PolicySampling::PerBatch,
            total_steps: 100_000,
            injection_period: 1,
            fitness_episodes: 1,
            cem_sigma_init: 1e-2,
            cem_top: 2,
            cem_floor: 1e-6,
            cem_elitism: true,
            eval_episodes: 5,
            eval_seed: 12_345,
            seed: 0,
            out_dir: PathBuf::from("runs/erl2"),
            target_return: None,
            parallel_eval: false,
        }
    }
}

/// Named `(mode, p, β, H, K, γ)` bundles for the large benchmark tasks.
pub const PRESETS: &[(&str, RlMode, f64, f64, usize, usize, f64)] = &[
    ("td3-halfcheetah", RlMode::Td3, 0.3, 1.0, 200, 1, 0.99),
    ("td3-walker", RlMode::Td3, 0.8, 0.2, 50, 1, 0.99),
    ("td3-swimmer", RlMode::Td3, 0.3, 1.0, 200, 3, 0.999),
    ("td3-hopper", RlMode::Td3, 0.8, 0.2, 50, 3, 0.99),
    ("td3-ant", RlMode::Td3, 0.5, 0.7, 200, 1, 0.99),
    ("td3-humanoid", RlMode::Td3, 0.5, 0.5, 200, 1, 0.99),
    ("ddpg-halfcheetah", RlMode::Ddpg, 0.5, 1.0, 200, 1, 0.99),
    ("ddpg-walker", RlMode::Ddpg, 0.8, 0.2, 50, 1, 0.99),
    ("ddpg-swimmer", RlMode::Ddpg, 0.3, 0.5, 200, 3, 0.999),
    ("ddpg-hopper", RlMode::Ddpg, 0.8, 0.7, 50, 3, 0.99),
    ("ddpg-ant", RlMode::Ddpg, 0.7, 0.5, 200, 1, 0.99),
    ("ddpg-humanoid", RlMode::Ddpg, 0.7, 0.5, 200, 1, 0.99),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} = '{value}': expected true or false"
        ))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn widths(v: &[usize]) -> String {
    v.iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let &(_, mode, p, beta, h, k, gamma) = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
        self.mode = mode;
        self.mc_probability = p;
        self.mutation_beta = beta;
        self.surrogate_horizon = h;
        self.sharedrep_policies = k;
        self.gamma = gamma;
        Ok(())
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "env" => self.env = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "evolution" => self.evolution = parse(key, v)?,
            "rl_agent" => self.rl_agent = parse_bool(key, v)?,
            "pop_size" => self.pop_size = parse(key, v)?,
            "elites" => self.elites = parse(key, v)?,
            "mc_probability" => self.mc_probability = parse(key, v)?,
            "surrogate_horizon" => self.surrogate_horizon = parse(key, v)?,
            "sharedrep_policies" => self.sharedrep_policies = parse(key, v)?,
            "sharedrep_critic" => self.sharedrep_critic = parse_bool(key, v)?,
            "sharedrep_normalize" => self.sharedrep_normalize = parse_bool(key, v)?,
            "mutation_alpha" => self.mutation_alpha = parse(key, v)?,
            "mutation_beta" => self.mutation_beta = parse(key, v)?,
            "crossover_op" => self.crossover_op = parse(key, v)?,
            "mutation_op" => self.mutation_op = parse(key, v)?,
            "param_crossover_points" => self.param_crossover_points = parse(key, v)?,
            "param_mutation_sigma" => self.param_mutation_sigma = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, v)?,
            "lr_critic" => self.lr_critic = parse(key, v)?,
            "lr_pevfa" => self.lr_pevfa = parse(key, v)?,
            "lr_actor" => self.lr_actor = parse(key, v)?,
            "lr_shared" => self.lr_shared = parse(key, v)?,
            "explore_sigma" => self.explore_sigma = parse(key, v)?,
            "target_noise" => self.target_noise = parse(key, v)?,
            "target_noise_clip" => self.target_noise_clip = parse(key, v)?,
            "policy_delay" => self.policy_delay = parse(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_widths(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_widths(key, v)?,
            "pevfa_hidden" => self.pevfa_hidden = parse_widths(key, v)?,
            "pevfa_encoder" => self.pevfa_encoder = parse_widths(key, v)?,
            "pevfa_sampling" => self.pevfa_sampling = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "injection_period" => self.injection_period = parse(key, v)?,
            "fitness_episodes" => self.fitness_episodes = parse(key, v)?,
            "cem_sigma_init" => self.cem_sigma_init = parse(key, v)?,
            "cem_top" => self.cem_top = parse(key, v)?,
            "cem_floor" => self.cem_floor = parse(key, v)?,
            "cem_elitism" => self.cem_elitism = parse_bool(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "target_return" => {
                self.target_return = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "parallel_eval" => self.parallel_eval = parse_bool(key, v)?,
            "preset" => self.apply_preset(v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("env", self.env.to_string()),
            ("mode", self.mode.to_string()),
            ("evolution", self.evolution.to_string()),
            ("rl_agent", self.rl_agent.to_string()),
            ("pop_size", self.pop_size.to_string()),
            ("elites", self.elites.to_string()),
            ("mc_probability", self.mc_probability.to_string()),
            ("surrogate_horizon", self.surrogate_horizon.to_string()),
            ("sharedrep_policies", self.sharedrep_policies.to_string()),
            ("sharedrep_critic", self.sharedrep_critic.to_string()),
            ("sharedrep_normalize", self.sharedrep_normalize.to_string()),
            ("mutation_alpha", self.mutation_alpha.to_string()),
            ("mutation_beta", self.mutation_beta.to_string()),
            ("crossover_op", self.crossover_op.to_string()),
            ("mutation_op", self.mutation_op.to_string()),
            (
                "param_crossover_points",
                self.param_crossover_points.to_string(),
            ),
            (
                "param_mutation_sigma",
                self.param_mutation_sigma.to_string(),
            ),
            ("gamma", self.gamma.to_string()),
            ("tau", self.tau.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("lr_critic", self.lr_critic.to_string()),
            ("lr_pevfa", self.lr_pevfa.to_string()),
            ("lr_actor", self.lr_actor.to_string()),
            ("lr_shared", self.lr_shared.to_string()),
            ("explore_sigma", self.explore_sigma.to_string()),
            ("target_noise", self.target_noise.to_string()),
            ("target_noise_clip", self.target_noise_clip.to_string()),
            ("policy_delay", self.policy_delay.to_string()),
            ("encoder_hidden", widths(&self.encoder_hidden)),
            ("critic_hidden", widths(&self.critic_hidden)),
            ("pevfa_hidden", widths(&self.pevfa_hidden)),
            ("pevfa_encoder", widths(&self.pevfa_encoder)),
            ("pevfa_sampling", self.pevfa_sampling.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("injection_period", self.injection_period.to_string()),
            ("fitness_episodes", self.fitness_episodes.to_string()),
            ("cem_sigma_init", self.cem_sigma_init.to_string()),
            ("cem_top", self.cem_top.to_string()),
            ("cem_floor", self.cem_floor.to_string()),
            ("cem_elitism", self.cem_elitism.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            (
                "target_return",
                self.target_return
                    .map_or_else(|| "none".to_string(), |v| v.to_string()),
            ),
            ("parallel_eval", self.parallel_eval.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parse and validate a configuration file's contents.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut order = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: key '{k}' repeated", n + 1)));
            }
            order.push(k);
        }
        let mut cfg = RunConfig::default();
        if let Some(p) = pairs.get("preset") {
            cfg.apply_preset(p)?;
        }
        for k in order.iter().filter(|k| *k != "preset") {
            cfg.set(k, &pairs[k])?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("mc_probability", self.mc_probability),
            ("mutation_alpha", self.mutation_alpha),
            ("mutation_beta", self.mutation_beta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} = {v} outside [0, 1]"));
            }
        }
        let has_pop = self.evolution != EvolutionMode::None;
        if has_pop {
            if self.pop_size < 3 {
                return fail(format!("pop_size {} below 3", self.pop_size));
            }
            if self.evolution == EvolutionMode::Ga
                && (self.elites == 0 || self.elites >= self.pop_size)
            {
                return fail(format!(
                    "elites {} must be in 1..{}",
                    self.elites, self.pop_size
                ));
            }
            if self.sharedrep_policies > self.pop_size {
                return fail(format!(
                    "sharedrep_policies {} exceeds pop_size {}",
                    self.sharedrep_policies, self.pop_size
                ));
            }
            if self.evolution == EvolutionMode::Cem
                && (self.cem_top == 0 || self.cem_top > self.pop_size)
            {
                return fail(format!(
                    "cem_top {} must be in 1..={}",
                    self.cem_top, self.pop_size
                ));
            }
        } else if !self.rl_agent {
            return fail("evolution = none needs rl_agent = true".into());
        }
        if !self.rl_agent && self.sharedrep_policies == 0 {
            return fail("without the RL agent the encoder needs sharedrep_policies ≥ 1".into());
        }
        if self.rl_agent && !self.sharedrep_critic && (self.sharedrep_policies == 0 || !has_pop) {
            return fail("the encoder loss needs the critic term or PeVFA terms".into());
        }
        if self.batch_size > self.buffer_capacity {
            return fail("batch_size exceeds buffer_capacity".into());
        }
        if self.total_steps == 0 || self.eval_episodes == 0 || self.fitness_episodes == 0 {
            return fail("total_steps, eval_episodes and fitness_episodes must be positive".into());
        }
        if self.encoder_hidden.is_empty()
            || self.critic_hidden.is_empty()
            || self.pevfa_encoder.is_empty()
        {
            return fail("network width lists must not be empty".into());
        }
        if [
            &self.encoder_hidden,
            &self.critic_hidden,
            &self.pevfa_hidden,
            &self.pevfa_encoder,
        ]
        .iter()
        .any(|w| w.contains(&0))
        {
            return fail("network widths must be positive".into());
        }
        if self.explore_sigma < 0.0 || self.param_mutation_sigma < 0.0 {
            return fail("noise scales must be non-negative".into());
        }
        self.update_config().validate()?;
        self.mutation_config().validate()
    }

    pub fn mutation_config(&self) -> MutationConfig {
        MutationConfig {
            alpha: self.mutation_alpha,
            beta: self.mutation_beta,
            ..MutationConfig::default()
        }
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            elites: self.elites,
            mutation: self.mutation_config(),
            crossover_op: self.crossover_op,
            mutation_op: self.mutation_op,
            param_crossover_points: self.param_crossover_points,
            param_mutation_sigma: self.param_mutation_sigma,
            ..EvolutionConfig::default()
        }
    }

    pub fn cem_config(&self) -> CemConfig {
        CemConfig {
            sigma_init: self.cem_sigma_init,
            top: self.cem_top,
            floor: self.cem_floor,
            elitism: self.cem_elitism,
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            gamma: self.gamma,
            tau: self.tau,
            batch_size: self.batch_size,
            sharedrep_policies: self.sharedrep_policies,
            sharedrep_critic: self.sharedrep_critic && self.rl_agent,
            sharedrep_normalize: self.sharedrep_normalize,
            mode: self.mode,
            target_noise: self.target_noise,
            target_noise_clip: self.target_noise_clip,
            policy_delay: self.policy_delay,
            pevfa_sampling: self.pevfa_sampling,
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            update: self.update_config(),
            lr_critic: self.lr_critic,
            lr_pevfa: self.lr_pevfa,
            lr_actor: self.lr_actor,
            lr_shared: self.lr_shared,
            explore_sigma: self.explore_sigma,
            encoder_hidden: self.encoder_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            pevfa_hidden: self.pevfa_hidden.clone(),
            pevfa_encoder: self.pevfa_encoder.clone(),
        }
    }
}

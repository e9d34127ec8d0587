//! Population search over policy matrices: fitness estimation, selection,
//! behavior-level and parameter-level variation, and a cross-entropy mode.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::env::{continue_rollout, rollout, Environment, SimRng, Transition};
use crate::nn::Parameters;
use crate::policy::{policy_action, PolicyRepresentation, SharedRepresentation};
use crate::value::BootstrapValue;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessKind {
    MonteCarlo,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitnessEstimate {
    pub value: f64,
    pub kind: FitnessKind,
    pub episodes_used: usize,
    pub steps_used: usize,
}

/// A fitness estimate plus the experience gathered while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub estimate: FitnessEstimate,
    pub transitions: Vec<Transition>,
}

/// Mean undiscounted return over `episodes` noiseless episodes.
pub fn evaluate_fitness_mc(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    env: &mut dyn Environment,
    episodes: usize,
    rng: &mut SimRng,
) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::Config("fitness needs at least one episode".into()));
    }
    let horizon = env.spec().horizon;
    let mut transitions = Vec::new();
    let mut total = 0.0;
    for _ in 0..episodes {
        let r = rollout(z, w, env, horizon, 0.0, rng)?;
        total += r.total_reward;
        transitions.extend(r.transitions);
    }
    Ok(Evaluation {
        estimate: FitnessEstimate {
            value: total / episodes as f64,
            kind: FitnessKind::MonteCarlo,
            episodes_used: episodes,
            steps_used: transitions.len(),
        },
        transitions,
    })
}

/// `H`-step discounted prefix from a fresh reset, bootstrapped with
/// `Q(s_H, π(s_H), W)` unless the episode ended first.
///
/// No bootstrap is added when the prefix reaches the environment horizon,
/// so with `H ≥ horizon` and `γ = 1` this is exactly the episode return.
pub fn evaluate_fitness_surrogate(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    env: &mut dyn Environment,
    value: &dyn BootstrapValue,
    horizon_steps: usize,
    gamma: f64,
    rng: &mut SimRng,
) -> Result<Evaluation> {
    let spec = env.spec().clone();
    let start = env.reset(rng);
    let run = continue_rollout(z, w, env, start, horizon_steps, 0.0, rng)?;
    let mut value_sum = 0.0;
    let mut discount = 1.0;
    for t in &run.transitions {
        value_sum += discount * t.reward;
        discount *= gamma;
    }
    if !run.terminated && run.steps < spec.horizon {
        let action = policy_action(z, w, &spec.action, &run.final_state)?;
        let q = value.bootstrap(&run.final_state, &action, w)?;
        value_sum += discount * q;
    }
    if !value_sum.is_finite() {
        return Err(Error::NonFinite("surrogate fitness".into()));
    }
    Ok(Evaluation {
        estimate: FitnessEstimate {
            value: value_sum,
            kind: FitnessKind::Surrogate,
            episodes_used: 1,
            steps_used: run.steps,
        },
        transitions: run.transitions,
    })
}

/// The population's policy matrices and their latest fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub members: Vec<PolicyRepresentation>,
    /// `NaN` until first evaluated.
    pub fitness: Vec<f64>,
    pub generation: usize,
}

impl Population {
    pub fn new(members: Vec<PolicyRepresentation>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("population must not be empty".into()))?;
        if let Some(m) = members.iter().find(|m| !m.same_shape(first)) {
            return Err(Error::shape(
                "population member",
                format!("{:?}", first.matrix().dim()),
                format!("{:?}", m.matrix().dim()),
            ));
        }
        let n = members.len();
        Ok(Population {
            members,
            fitness: vec![f64::NAN; n],
            generation: 0,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        n: usize,
        feature_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            (0..n)
                .map(|_| PolicyRepresentation::init(feature_dim, action_dim, rng))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Index of the highest fitness (ties to the lower index).
    pub fn best(&self) -> Option<usize> {
        rank_by_fitness(&self.fitness).first().copied()
    }
}

/// Indices sorted by descending fitness, ties broken by lower index.
pub fn rank_by_fitness(fitness: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fitness.len()).collect();
    idx.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionOutcome {
    pub elites: Vec<usize>,
    pub winners: Vec<usize>,
    pub discarders: Vec<usize>,
    /// Contestants of every tournament, in the order they were drawn.
    pub tournaments: Vec<Vec<usize>>,
}

/// Tournament winner: highest fitness, ties to the lower index.
pub fn tournament_winner(fitness: &[f64], contestants: &[usize]) -> usize {
    let mut best = contestants[0];
    for &c in &contestants[1..] {
        if fitness[c] > fitness[best] || (fitness[c] == fitness[best] && c < best) {
            best = c;
        }
    }
    best
}

/// Rebuild a selection from its elite set and recorded tournaments.
pub fn replay_selection(
    fitness: &[f64],
    elites: &[usize],
    tournaments: &[Vec<usize>],
) -> SelectionOutcome {
    let mut winners: Vec<usize> = tournaments
        .iter()
        .map(|t| tournament_winner(fitness, t))
        .collect();
    winners.sort_unstable();
    winners.dedup();
    let mut elites = elites.to_vec();
    elites.sort_unstable();
    let discarders = (0..fitness.len())
        .filter(|i| !elites.contains(i) && !winners.contains(i))
        .collect();
    SelectionOutcome {
        elites,
        winners,
        discarders,
        tournaments: tournaments.to_vec(),
    }
}

/// Elites are the top `elite_count` members. The rest compete in
/// `n − elite_count` size-3 tournaments; distinct winners become parents and
/// everyone else is discarded.
pub fn select<R: Rng + ?Sized>(
    fitness: &[f64],
    elite_count: usize,
    rng: &mut R,
) -> Result<SelectionOutcome> {
    let n = fitness.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "population of {n} is too small for selection (need 3)"
        )));
    }
    if elite_count == 0 || elite_count >= n {
        return Err(Error::Config(format!(
            "elite count {elite_count} must be in 1..{n}"
        )));
    }
    if fitness.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("population fitness".into()));
    }
    let ranked = rank_by_fitness(fitness);
    let elites = &ranked[..elite_count];
    let mut pool: Vec<usize> = ranked[elite_count..].to_vec();
    pool.sort_unstable();
    let size = pool.len().min(3);
    let tournaments: Vec<Vec<usize>> = (0..n - elite_count)
        .map(|_| {
            index::sample(rng, pool.len(), size)
                .iter()
                .map(|i| pool[i])
                .collect()
        })
        .collect();
    Ok(replay_selection(fitness, elites, &tournaments))
}

/// Which way one action dimension moves during behavior-level crossover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossoverTag {
    /// Child 1 receives parent 2's column; child 2 keeps its own.
    ToFirst,
    /// Child 2 receives parent 1's column; child 1 keeps its own.
    ToSecond,
}

pub fn sample_assignment<R: Rng + ?Sized>(action_dim: usize, rng: &mut R) -> Vec<CrossoverTag> {
    (0..action_dim)
        .map(|_| {
            if rng.random_bool(0.5) {
                CrossoverTag::ToFirst
            } else {
                CrossoverTag::ToSecond
            }
        })
        .collect()
}

/// Swap whole action-dimension columns between copies of two parents.
pub fn b_crossover(
    p1: &PolicyRepresentation,
    p2: &PolicyRepresentation,
    assignment: &[CrossoverTag],
) -> Result<(PolicyRepresentation, PolicyRepresentation)> {
    if !p1.same_shape(p2) {
        return Err(Error::shape(
            "crossover parents",
            format!("{:?}", p1.matrix().dim()),
            format!("{:?}", p2.matrix().dim()),
        ));
    }
    if assignment.len() != p1.action_dim() {
        return Err(Error::shape(
            "crossover assignment",
            p1.action_dim(),
            assignment.len(),
        ));
    }
    let (mut c1, mut c2) = (p1.clone(), p2.clone());
    for (j, tag) in assignment.iter().enumerate() {
        match tag {
            CrossoverTag::ToFirst => c1.set_column(j, p2.column(j)),
            CrossoverTag::ToSecond => c2.set_column(j, p1.column(j)),
        }
    }
    Ok((c1, c2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    Small,
    Large,
    Reset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationConfig {
    /// Per-dimension selection probability.
    pub alpha: f64,
    /// Fraction of a selected column's entries that get perturbed.
    pub beta: f64,
    pub small_scale: f64,
    pub large_sigma: f64,
    pub small_prob: f64,
    pub large_prob: f64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            alpha: 1.0,
            beta: 0.2,
            small_scale: 0.05,
            large_sigma: 0.5,
            small_prob: 0.9,
            large_prob: 0.05,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "mutation {name} = {v} outside [0, 1]"
                )));
            }
        }
        if self.small_prob < 0.0 || self.large_prob < 0.0 || self.small_prob + self.large_prob > 1.0
        {
            return Err(Error::Config(
                "mutation branch probabilities must form a distribution".into(),
            ));
        }
        Ok(())
    }

    fn draw_kind<R: Rng + ?Sized>(&self, rng: &mut R) -> Perturbation {
        let u: f64 = rng.random();
        if u < self.small_prob {
            Perturbation::Small
        } else if u < self.small_prob + self.large_prob {
            Perturbation::Large
        } else {
            Perturbation::Reset
        }
    }
}

/// Perturb `⌈β·(d+1)⌉` uniformly chosen entries of column `j` in place.
pub fn mutate_column<R: Rng + ?Sized>(
    w: &mut PolicyRepresentation,
    j: usize,
    kind: Perturbation,
    cfg: &MutationConfig,
    rng: &mut R,
) {
    let rows = w.feature_dim() + 1;
    let count = ((cfg.beta * rows as f64).ceil() as usize).min(rows);
    let bound = w.init_bound();
    let chosen = index::sample(rng, rows, count).into_vec();
    let m = w.matrix_mut();
    for i in chosen {
        let v = &mut m[[i, j]];
        *v = match kind {
            Perturbation::Small => {
                let noise: f64 = rng.sample(StandardNormal);
                *v + noise * cfg.small_scale * (1.0 + v.abs())
            }
            Perturbation::Large => {
                let noise: f64 = rng.sample(StandardNormal);
                *v + noise * cfg.large_sigma
            }
            Perturbation::Reset => rng.random_range(-bound..=bound),
        };
    }
}

/// Behavior-level mutation restricted to the `selected` action dimensions.
pub fn b_mutation_masked<R: Rng + ?Sized>(
    w: &PolicyRepresentation,
    selected: &[bool],
    cfg: &MutationConfig,
    rng: &mut R,
) -> Result<PolicyRepresentation> {
    if selected.len() != w.action_dim() {
        return Err(Error::shape(
            "mutation mask",
            w.action_dim(),
            selected.len(),
        ));
    }
    let mut out = w.clone();
    for (j, _) in selected.iter().enumerate().filter(|(_, s)| **s) {
        let kind = cfg.draw_kind(rng);
        mutate_column(&mut out, j, kind, cfg, rng);
    }
    Ok(out)
}

/// Behavior-level mutation: each action dimension is selected with
/// probability `α` and its column perturbed.
pub fn b_mutation<R: Rng + ?Sized>(
    w: &PolicyRepresentation,
    cfg: &MutationConfig,
    rng: &mut R,
) -> Result<PolicyRepresentation> {
    let selected: Vec<bool> = (0..w.action_dim())
        .map(|_| rng.random_bool(cfg.alpha))
        .collect();
    b_mutation_masked(w, &selected, cfg, rng)
}

/// `k` distinct cut positions in `1..len`, sorted.
pub fn sample_cut_points<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if len < 2 {
        return Vec::new();
    }
    let k = k.min(len - 1);
    let mut cuts: Vec<usize> = index::sample(rng, len - 1, k)
        .iter()
        .map(|i| i + 1)
        .collect();
    cuts.sort_unstable();
    cuts
}

/// Segment exchange on flattened parameters. Segments between consecutive
/// cuts alternate: the first stays, the second swaps, and so on.
pub fn param_crossover<P: Parameters + Clone>(a: &P, b: &P, cuts: &[usize]) -> Result<(P, P)> {
    let (fa, fb) = (a.flatten(), b.flatten());
    if fa.len() != fb.len() {
        return Err(Error::shape("parameter crossover", fa.len(), fb.len()));
    }
    if cuts.windows(2).any(|w| w[0] >= w[1]) || cuts.last().is_some_and(|&c| c >= fa.len()) {
        return Err(Error::Config(format!("invalid cut points {cuts:?}")));
    }
    let (mut ca, mut cb) = (fa.clone(), fb.clone());
    let mut swap = false;
    let mut start = 0;
    for &end in cuts.iter().chain(std::iter::once(&fa.len())) {
        if swap {
            ca[start..end].copy_from_slice(&fb[start..end]);
            cb[start..end].copy_from_slice(&fa[start..end]);
        }
        swap = !swap;
        start = end;
    }
    let (mut oa, mut ob) = (a.clone(), b.clone());
    oa.assign_flat(&ca)?;
    ob.assign_flat(&cb)?;
    Ok((oa, ob))
}

/// Add `N(0, σ²)` to every parameter.
pub fn param_mutation<P: Parameters + Clone, R: Rng + ?Sized>(
    net: &P,
    sigma: f64,
    rng: &mut R,
) -> Result<P> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "mutation sigma {sigma} must be a non-negative number"
        )));
    }
    let mut out = net.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for t in out.tensors_mut() {
        for v in t.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *v += sigma * noise;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorLevel {
    Behavior,
    Parameter,
}

impl FromStr for OperatorLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "behavior" => Ok(OperatorLevel::Behavior),
            "parameter" => Ok(OperatorLevel::Parameter),
            other => Err(Error::Config(format!("unknown operator level '{other}'"))),
        }
    }
}

impl fmt::Display for OperatorLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OperatorLevel::Behavior => "behavior",
            OperatorLevel::Parameter => "parameter",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionConfig {
    pub elites: usize,
    pub mutation: MutationConfig,
    /// Probability that a non-elite is mutated at all.
    pub mutation_gate: f64,
    pub crossover_op: OperatorLevel,
    pub mutation_op: OperatorLevel,
    pub param_crossover_points: usize,
    pub param_mutation_sigma: f64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            elites: 1,
            mutation: MutationConfig::default(),
            mutation_gate: 0.9,
            crossover_op: OperatorLevel::Behavior,
            mutation_op: OperatorLevel::Behavior,
            param_crossover_points: 1,
            param_mutation_sigma: 0.1,
        }
    }
}

fn crossover<R: Rng + ?Sized>(
    a: &PolicyRepresentation,
    b: &PolicyRepresentation,
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Result<(PolicyRepresentation, PolicyRepresentation)> {
    match cfg.crossover_op {
        OperatorLevel::Behavior => b_crossover(a, b, &sample_assignment(a.action_dim(), rng)),
        OperatorLevel::Parameter => {
            let cuts = sample_cut_points(a.num_parameters(), cfg.param_crossover_points, rng);
            param_crossover(a, b, &cuts)
        }
    }
}

fn mutate<R: Rng + ?Sized>(
    w: &PolicyRepresentation,
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Result<PolicyRepresentation> {
    match cfg.mutation_op {
        OperatorLevel::Behavior => b_mutation(w, &cfg.mutation, rng),
        OperatorLevel::Parameter => param_mutation(w, cfg.param_mutation_sigma, rng),
    }
}

/// Produce the next generation's members. Discarders are refilled pairwise
/// with offspring of a random elite and a random winner, then every
/// non-elite is mutated with probability `mutation_gate`. Elites are copied
/// through untouched.
pub fn evolve_generation<R: Rng + ?Sized>(
    members: &[PolicyRepresentation],
    outcome: &SelectionOutcome,
    cfg: &EvolutionConfig,
    rng: &mut R,
) -> Result<Vec<PolicyRepresentation>> {
    let n = members.len();
    let all: Vec<usize> = outcome
        .elites
        .iter()
        .chain(&outcome.winners)
        .chain(&outcome.discarders)
        .copied()
        .collect();
    let mut seen = vec![false; n];
    for &i in &all {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(
                "selection outcome does not partition the population".into(),
            ));
        }
    }
    if seen.iter().any(|s| !s) || outcome.elites.is_empty() {
        return Err(Error::Config(
            "selection outcome does not partition the population".into(),
        ));
    }
    let mut next = members.to_vec();
    if !outcome.discarders.is_empty() && outcome.winners.is_empty() {
        return Err(Error::Config(
            "discarders present but no winners to breed from".into(),
        ));
    }
    for slots in outcome.discarders.chunks(2) {
        let e = *outcome.elites.choose(rng).expect("non-empty");
        let w = *outcome.winners.choose(rng).expect("non-empty");
        let (c1, c2) = crossover(&members[e], &members[w], cfg, rng)?;
        next[slots[0]] = c1;
        if let Some(&s) = slots.get(1) {
            next[s] = c2;
        }
    }
    for i in 0..n {
        if outcome.elites.contains(&i) {
            continue;
        }
        if rng.random_bool(cfg.mutation_gate) {
            next[i] = mutate(&next[i], cfg, rng)?;
        }
    }
    Ok(next)
}

/// Replace the worst non-elite (ties to the higher index) with a copy of
/// `w_rl`. Returns the replaced index.
pub fn rl_inject(
    members: &mut [PolicyRepresentation],
    fitness: &[f64],
    elites: &[usize],
    w_rl: &PolicyRepresentation,
) -> Result<usize> {
    if fitness.len() != members.len() {
        return Err(Error::shape("fitness", members.len(), fitness.len()));
    }
    let target = (0..members.len())
        .filter(|i| !elites.contains(i))
        .min_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(b.cmp(&a)))
        .ok_or_else(|| Error::Config("no non-elite member to replace".into()))?;
    members[target] = w_rl.clone();
    Ok(target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemConfig {
    /// Initial per-entry variance.
    pub sigma_init: f64,
    pub top: usize,
    pub floor: f64,
    /// Carry the previous generation's best member into the next sample.
    pub elitism: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            sigma_init: 1e-2,
            top: 2,
            floor: 1e-6,
            elitism: true,
        }
    }
}

/// Diagonal Gaussian over policy matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CemState {
    pub mean: PolicyRepresentation,
    pub variance: Array2<f64>,
    pub top: usize,
    pub floor: f64,
}

impl CemState {
    pub fn new(mean: PolicyRepresentation, cfg: &CemConfig) -> Result<Self> {
        if cfg.top == 0 || cfg.floor <= 0.0 || cfg.sigma_init <= 0.0 {
            return Err(Error::Config(
                "CEM needs top ≥ 1, floor > 0 and sigma_init > 0".into(),
            ));
        }
        let variance = Array2::from_elem(mean.matrix().raw_dim(), cfg.sigma_init);
        Ok(CemState {
            mean,
            variance,
            top: cfg.top,
            floor: cfg.floor,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<PolicyRepresentation> {
        (0..n)
            .map(|_| {
                let mut w = self.mean.clone();
                for (v, var) in w.matrix_mut().iter_mut().zip(&self.variance) {
                    let noise: f64 = rng.sample(StandardNormal);
                    *v += var.sqrt() * noise;
                }
                w
            })
            .collect()
    }

    /// Refit the mean and variance to the top members by fitness.
    pub fn update(&mut self, members: &[PolicyRepresentation], fitness: &[f64]) -> Result<()> {
        if members.len() != fitness.len() {
            return Err(Error::shape("CEM fitness", members.len(), fitness.len()));
        }
        if self.top > members.len() {
            return Err(Error::Config(format!(
                "CEM top {} exceeds population {}",
                self.top,
                members.len()
            )));
        }
        if fitness.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("CEM fitness".into()));
        }
        let ranked = rank_by_fitness(fitness);
        let elite: Vec<&Array2<f64>> = ranked[..self.top]
            .iter()
            .map(|&i| members[i].matrix())
            .collect();
        let t = self.top as f64;
        let mut mean = Array2::zeros(self.variance.raw_dim());
        for m in &elite {
            mean += *m;
        }
        mean /= t;
        let mut var = Array2::zeros(self.variance.raw_dim());
        for m in &elite {
            let diff = *m - &mean;
            var += &(&diff * &diff);
        }
        var /= t;
        var += self.floor;
        self.mean = PolicyRepresentation::new(mean)?;
        self.variance = var;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvSpec, PointMass, StepResult};
    use crate::policy::{policy_forward, ActionSpec};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    fn encoder(state_dim: usize, seed: u64) -> SharedRepresentation {
        SharedRepresentation::init(state_dim, &[16, 8], &mut rng(seed)).unwrap()
    }

    fn random_states(n: usize, width: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((n, width), |_| r.random_range(-1.0..1.0))
    }

    /// Deterministic chain of fixed length with constant rewards.
    struct Chain {
        spec: EnvSpec,
        rewards: Vec<f64>,
        t: usize,
        terminate_at: Option<usize>,
    }

    impl Chain {
        fn new(rewards: Vec<f64>, horizon: usize, terminate_at: Option<usize>) -> Self {
            Chain {
                spec: EnvSpec {
                    state_dim: 1,
                    action: ActionSpec::symmetric(1, 1.0),
                    horizon,
                    gamma: 0.99,
                },
                rewards,
                t: 0,
                terminate_at,
            }
        }
    }

    impl Environment for Chain {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }

        fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
            self.t = 0;
            vec![0.0]
        }

        fn step(&mut self, _action: &[f64]) -> Result<StepResult> {
            let r = self.rewards[self.t.min(self.rewards.len() - 1)];
            self.t += 1;
            Ok(StepResult {
                next_state: vec![self.t as f64],
                reward: r,
                terminal: self.terminate_at == Some(self.t),
            })
        }
    }

    /// Returns the same value everywhere.
    struct ConstValue(f64);

    impl BootstrapValue for ConstValue {
        fn bootstrap(&self, _s: &[f64], _a: &[f64], _w: &PolicyRepresentation) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// Returns `value` at state `s_2` only.
    struct AtState(f64, f64);

    impl BootstrapValue for AtState {
        fn bootstrap(&self, s: &[f64], _a: &[f64], _w: &PolicyRepresentation) -> Result<f64> {
            Ok(if s[0] == self.0 { self.1 } else { f64::NAN })
        }
    }

    #[test]
    fn mc_fitness_of_constant_reward() {
        let z = encoder(1, 0);
        let w = PolicyRepresentation::zeros(8, 1);
        let mut env = Chain::new(vec![1.0], 100, None);
        let ev = evaluate_fitness_mc(&z, &w, &mut env, 2, &mut rng(1)).unwrap();
        assert_eq!(ev.estimate.value, 100.0);
        assert_eq!(ev.estimate.steps_used, 200);
        assert_eq!(ev.transitions.len(), 200);
    }

    #[test]
    fn mc_fitness_replays_bitwise() {
        let z = encoder(4, 0);
        let w = PolicyRepresentation::init(8, 2, &mut rng(1));
        let mut env = PointMass::new();
        let a = evaluate_fitness_mc(&z, &w, &mut env, 1, &mut rng(5)).unwrap();
        let b = evaluate_fitness_mc(&z, &w, &mut env, 1, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let re = rollout(&z, &w, &mut env, 100, 0.0, &mut rng(5)).unwrap();
        assert_eq!(a.estimate.value, re.total_reward);
    }

    #[test]
    fn surrogate_hand_computation() {
        let z = encoder(1, 0);
        let w = PolicyRepresentation::zeros(8, 1);
        let mut env = Chain::new(vec![1.0], 3, None);
        let ev =
            evaluate_fitness_surrogate(&z, &w, &mut env, &AtState(2.0, 4.0), 2, 0.5, &mut rng(0))
                .unwrap();
        assert_eq!(ev.estimate.value, 2.5);
        assert_eq!(ev.estimate.steps_used, 2);
        assert_eq!(ev.estimate.kind, FitnessKind::Surrogate);
    }

    #[test]
    fn surrogate_masks_bootstrap_after_termination() {
        let z = encoder(1, 0);
        let w = PolicyRepresentation::zeros(8, 1);
        let mut env = Chain::new(vec![1.0, 2.0, 3.0, 4.0], 100, Some(3));
        let ev =
            evaluate_fitness_surrogate(&z, &w, &mut env, &ConstValue(1e6), 10, 0.9, &mut rng(0))
                .unwrap();
        assert_eq!(ev.estimate.value, 1.0 + 0.9 * 2.0 + 0.81 * 3.0);
        assert_eq!(ev.estimate.steps_used, 3);
    }

    #[test]
    fn zero_step_surrogate_is_the_bootstrap() {
        let z = encoder(1, 0);
        let w = PolicyRepresentation::zeros(8, 1);
        let mut env = Chain::new(vec![1.0], 100, None);
        let ev =
            evaluate_fitness_surrogate(&z, &w, &mut env, &ConstValue(7.25), 0, 0.99, &mut rng(0))
                .unwrap();
        assert_eq!(ev.estimate.value, 7.25);
        assert!(ev.transitions.is_empty());
    }

    #[test]
    fn selection_examples() {
        let out = select(&[5.0, 4.0, 3.0, 2.0, 1.0], 1, &mut rng(0)).unwrap();
        assert_eq!(out.elites, vec![0]);
        let out = select(&[1.0; 5], 1, &mut rng(0)).unwrap();
        assert_eq!(out.elites, vec![0]);
        let mut all: Vec<usize> = out
            .elites
            .iter()
            .chain(&out.winners)
            .chain(&out.discarders)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(out.tournaments.len(), 4);
        assert!(out
            .tournaments
            .iter()
            .all(|t| t.len() == 3 && !t.contains(&0)));
        assert!(select(&[1.0, 2.0], 1, &mut rng(0)).is_err());
        assert!(select(&[1.0, f64::NAN, 2.0], 1, &mut rng(0)).is_err());
    }

    #[test]
    fn selection_replays_from_transcript() {
        let fitness = [0.3, -1.0, 2.0, 0.5, 0.5, -3.0, 1.5];
        let a = select(&fitness, 2, &mut rng(11)).unwrap();
        let b = select(&fitness, 2, &mut rng(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.elites, vec![2, 6]);
        assert_eq!(replay_selection(&fitness, &a.elites, &a.tournaments), a);
    }

    fn parents(seed: u64) -> (PolicyRepresentation, PolicyRepresentation) {
        let mut r = rng(seed);
        (
            PolicyRepresentation::init(8, 3, &mut r),
            PolicyRepresentation::init(8, 3, &mut r),
        )
    }

    #[test]
    fn crossover_full_swaps() {
        let (p1, p2) = parents(0);
        let (c1, c2) = b_crossover(&p1, &p2, &[CrossoverTag::ToFirst; 3]).unwrap();
        assert_eq!((c1.clone(), c2.clone()), (p2.clone(), p2.clone()));
        let (c1, c2) = b_crossover(&p1, &p2, &[CrossoverTag::ToSecond; 3]).unwrap();
        assert_eq!((c1, c2), (p1.clone(), p1));
    }

    #[test]
    fn crossover_keeps_untouched_behavior() {
        let (p1, p2) = parents(1);
        let z = encoder(4, 2);
        let spec = ActionSpec::symmetric(3, 1.0);
        let states = random_states(256, 4, 3);
        let tags = [
            CrossoverTag::ToFirst,
            CrossoverTag::ToSecond,
            CrossoverTag::ToSecond,
        ];
        let (c1, c2) = b_crossover(&p1, &p2, &tags).unwrap();
        let a_p1 = policy_forward(&z, &p1, &spec, states.view()).unwrap();
        let a_p2 = policy_forward(&z, &p2, &spec, states.view()).unwrap();
        let a_c1 = policy_forward(&z, &c1, &spec, states.view()).unwrap();
        let a_c2 = policy_forward(&z, &c2, &spec, states.view()).unwrap();
        assert_eq!(a_c1.column(0), a_p2.column(0));
        assert_eq!(a_c1.column(1), a_p1.column(1));
        assert_eq!(a_c1.column(2), a_p1.column(2));
        assert_eq!(a_c2.column(0), a_p2.column(0));
        assert_eq!(a_c2.column(1), a_p1.column(1));
    }

    #[test]
    fn mutation_identity_and_locality() {
        let (p, _) = parents(4);
        let cfg = MutationConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(b_mutation(&p, &cfg, &mut rng(0)).unwrap(), p);

        let cfg = MutationConfig::default();
        let m = b_mutation_masked(&p, &[false, true, false], &cfg, &mut rng(1)).unwrap();
        assert_ne!(m.column(1), p.column(1));
        assert_eq!(m.column(0), p.column(0));
        assert_eq!(m.column(2), p.column(2));
    }

    #[test]
    fn reset_branch_lands_in_init_range() {
        let mut w = PolicyRepresentation::zeros(8, 2);
        w.matrix_mut().fill(5.0);
        let cfg = MutationConfig {
            beta: 1.0,
            ..Default::default()
        };
        mutate_column(&mut w, 1, Perturbation::Reset, &cfg, &mut rng(0));
        let bound = w.init_bound();
        assert!(w.column(1).iter().all(|v| v.abs() <= bound));
        assert!(w.column(0).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn mutated_entry_count_follows_beta() {
        let mut w = PolicyRepresentation::zeros(9, 1);
        let cfg = MutationConfig {
            beta: 0.25,
            ..Default::default()
        };
        mutate_column(&mut w, 0, Perturbation::Large, &cfg, &mut rng(3));
        // ⌈0.25 · 10⌉ = 3
        assert_eq!(w.column(0).iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn parameter_operator_bookkeeping() {
        let a = PolicyRepresentation::new(Array2::from_elem((3, 2), 1.0)).unwrap();
        let b = PolicyRepresentation::new(Array2::from_elem((3, 2), 2.0)).unwrap();
        let (x, y) = param_crossover(&a, &b, &[]).unwrap();
        assert_eq!((x, y), (a.clone(), b.clone()));
        let (x, y) = param_crossover(&a, &b, &[4]).unwrap();
        assert_eq!(x.flatten(), vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(y.flatten(), vec![2.0, 2.0, 2.0, 2.0, 1.0, 1.0]);
        let (x, _) = param_crossover(&a, &b, &[1, 3]).unwrap();
        assert_eq!(x.flatten(), vec![1.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
        assert!(param_crossover(&a, &b, &[3, 1]).is_err());
        assert_eq!(param_mutation(&a, 0.0, &mut rng(0)).unwrap(), a);
        let cuts = sample_cut_points(6, 2, &mut rng(0));
        assert_eq!(cuts.len(), 2);
        assert!(cuts[0] < cuts[1] && cuts[0] >= 1 && cuts[1] <= 5);
    }

    fn population(n: usize, seed: u64) -> Vec<PolicyRepresentation> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| PolicyRepresentation::init(8, 3, &mut r))
            .collect()
    }

    #[test]
    fn generation_preserves_elites_and_is_reproducible() {
        let members = population(5, 0);
        let fitness = [1.0, 3.0, 2.0, -1.0, 0.0];
        let out = select(&fitness, 1, &mut rng(1)).unwrap();
        let cfg = EvolutionConfig::default();
        let a = evolve_generation(&members, &out, &cfg, &mut rng(2)).unwrap();
        let b = evolve_generation(&members, &out, &cfg, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a[1], members[1]);
        assert!(a.iter().all(|m| m.same_shape(&members[0])));
    }

    #[test]
    fn generation_without_discarders_only_mutates() {
        let members = population(4, 0);
        let outcome = SelectionOutcome {
            elites: vec![0],
            winners: vec![1, 2, 3],
            discarders: vec![],
            tournaments: vec![],
        };
        let cfg = EvolutionConfig {
            mutation_gate: 0.0,
            ..Default::default()
        };
        assert_eq!(
            evolve_generation(&members, &outcome, &cfg, &mut rng(0)).unwrap(),
            members
        );
        let bad = SelectionOutcome {
            discarders: vec![1],
            ..outcome
        };
        assert!(evolve_generation(&members, &bad, &cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn injection_replaces_worst_non_elite() {
        let mut members = population(3, 0);
        let w_rl = PolicyRepresentation::init(8, 3, &mut rng(9));
        let idx = rl_inject(&mut members, &[3.0, 2.0, 1.0], &[0], &w_rl).unwrap();
        assert_eq!(idx, 2);
        assert_eq!(members[2], w_rl);
        members[2].matrix_mut()[[0, 0]] += 1.0;
        assert_ne!(members[2], w_rl);
        // ties go to the higher index
        let idx = rl_inject(&mut members, &[3.0, 1.0, 1.0], &[0], &w_rl).unwrap();
        assert_eq!(idx, 2);
    }

    #[test]
    fn cem_concentrates_at_floor() {
        let mean = PolicyRepresentation::init(4, 2, &mut rng(0));
        let cfg = CemConfig {
            sigma_init: 1e-3,
            floor: 1e-6,
            ..Default::default()
        };
        let mut state = CemState::new(mean.clone(), &cfg).unwrap();
        state.variance.fill(cfg.floor);
        for s in state.sample(50, &mut rng(1)) {
            for (a, b) in s.matrix().iter().zip(mean.matrix()) {
                assert!((a - b).abs() <= 5.0 * cfg.floor.sqrt());
            }
        }
    }

    #[test]
    fn cem_update_identical_members() {
        let w = PolicyRepresentation::init(4, 2, &mut rng(0));
        let other = PolicyRepresentation::zeros(4, 2);
        let mut state = CemState::new(other.clone(), &CemConfig::default()).unwrap();
        state
            .update(&[w.clone(), other.clone(), w.clone()], &[1.0, -5.0, 2.0])
            .unwrap();
        assert_eq!(state.mean, w);
        assert!(state.variance.iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn cem_update_symmetric_pair() {
        let mu = array![[0.5, -0.25], [1.0, 0.0]];
        let delta = 0.125;
        let plus = PolicyRepresentation::new(&mu + delta).unwrap();
        let minus = PolicyRepresentation::new(&mu - delta).unwrap();
        let junk = PolicyRepresentation::new(Array2::from_elem((2, 2), 9.0)).unwrap();
        let mut state = CemState::new(junk.clone(), &CemConfig::default()).unwrap();
        state
            .update(&[junk, plus, minus], &[-1.0, 3.0, 2.0])
            .unwrap();
        assert_eq!(state.mean.matrix(), &mu);
        for &v in &state.variance {
            assert!((v - (delta * delta + 1e-6)).abs() <= 1e-15);
        }
        assert!(state.update(&[], &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn selection_partitions_the_population(
            fitness in prop::collection::vec(-10.0f64..10.0, 3..12),
            elites in 1usize..3,
            seed in 0u64..1000,
        ) {
            let out = select(&fitness, elites, &mut rng(seed)).unwrap();
            prop_assert_eq!(out.elites.len(), elites);
            let mut all: Vec<usize> = out
                .elites
                .iter()
                .chain(&out.winners)
                .chain(&out.discarders)
                .copied()
                .collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..fitness.len()).collect::<Vec<_>>());
        }

        #[test]
        fn generations_keep_elites_size_and_shapes(
            fitness in prop::collection::vec(-10.0f64..10.0, 3..10),
            seed in 0u64..1000,
        ) {
            let members = population(fitness.len(), seed);
            let out = select(&fitness, 1, &mut rng(seed + 1)).unwrap();
            let next = evolve_generation(&members, &out, &EvolutionConfig::default(), &mut rng(seed + 2)).unwrap();
            prop_assert_eq!(next.len(), members.len());
            prop_assert!(next.iter().all(|m| m.same_shape(&members[0])));
            for &e in &out.elites {
                prop_assert_eq!(&next[e], &members[e]);
            }
        }

        #[test]
        fn behavior_operators_leave_other_dimensions_alone(
            seed in 0u64..1000,
            mask in prop::collection::vec(any::<bool>(), 3),
        ) {
            let z = encoder(2, seed);
            let spec = ActionSpec::symmetric(3, 1.0);
            let s = Array2::from_shape_fn((32, 2), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin());
            let parents = population(2, seed);
            let tags: Vec<CrossoverTag> = mask
                .iter()
                .map(|&m| if m { CrossoverTag::ToFirst } else { CrossoverTag::ToSecond })
                .collect();
            let (c1, c2) = b_crossover(&parents[0], &parents[1], &tags).unwrap();
            let act = |w: &PolicyRepresentation| policy_forward(&z, w, &spec, s.view()).unwrap();
            let (a1, a2) = (act(&parents[0]), act(&parents[1]));
            let (k1, k2) = (act(&c1), act(&c2));
            for (j, tag) in tags.iter().enumerate() {
                match tag {
                    CrossoverTag::ToFirst => prop_assert_eq!(k2.column(j), a2.column(j)),
                    CrossoverTag::ToSecond => prop_assert_eq!(k1.column(j), a1.column(j)),
                }
            }
            let mutated = b_mutation_masked(&parents[0], &mask, &MutationConfig::default(), &mut rng(seed)).unwrap();
            let m = act(&mutated);
            for j in (0..3).filter(|&j| !mask[j]) {
                prop_assert_eq!(m.column(j), a1.column(j));
            }
        }
    }
}

//! The training loop, evaluation, and ablation sweeps.
//!
//! Each iteration evaluates the population (full episodes with probability
//! `mc_probability`, otherwise `H`-step surrogate prefixes), runs one noisy
//! RL episode, performs one update step per environment step collected,
//! evolves the population and injects the RL agent.
//!
//! A run directory holds:
//!
//! - `config.txt`: the resolved configuration
//! - `metrics.csv`: one row per iteration
//! - `losses.csv`: one row per update step
//! - `generations.jsonl`: one record per generation
//! - `summary.json`, written at the end (including wall-clock time)
//! - `checkpoint.erl2`, also written when a run aborts

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::RunCheckpoint;
use crate::config::{EvolutionMode, RunConfig};
use crate::env::{rollout, EnvKind, ReplayBuffer, SimRng};
use crate::evolution::{
    evaluate_fitness_mc, evaluate_fitness_surrogate, evolve_generation, rank_by_fitness, rl_inject,
    select, CemState, Evaluation, FitnessKind,
};
use crate::policy::{PolicyRepresentation, SharedRepresentation};
use crate::reinforcement::{Learner, StepLosses};
use crate::value::PeVfa;
use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "step,episodes,fitness_best,fitness_mean,rl_eval_return,surrogate_used,elite_eval_return,champion_eval_return";
pub const LOSSES_HEADER: &str = "step,loss_critic,loss_pevfa,loss_actor,loss_sharedrep";

/// Returns of a noiseless policy over seeded episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Run `episodes` noiseless episodes; start states come from one RNG seeded
/// with `seed`, so the same seed always sees the same starts.
pub fn evaluate_policy(
    z: &SharedRepresentation,
    w: &PolicyRepresentation,
    env: EnvKind,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let mut rng = SimRng::seed_from_u64(seed);
    let mut e = env.make();
    let horizon = e.spec().horizon;
    let returns = (0..episodes)
        .map(|_| rollout(z, w, e.as_mut(), horizon, 0.0, &mut rng).map(|r| r.total_reward))
        .collect::<Result<Vec<f64>>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { mean, std, returns })
}

/// Evaluate the champion stored in a checkpoint.
pub fn evaluate_checkpoint(path: &Path, episodes: usize, seed: u64) -> Result<EvalReport> {
    let cp = RunCheckpoint::read(path)?;
    let cfg = RunConfig::parse_text(&cp.config)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    evaluate_policy(&cp.encoder, &cp.champion, cfg.env, episodes, seed)
}

/// One row of `metrics.csv`, plus the step split used for accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub step: usize,
    pub episodes: usize,
    pub fitness_best: f64,
    pub fitness_mean: f64,
    pub rl_eval_return: f64,
    pub surrogate_used: bool,
    pub elite_eval_return: f64,
    pub champion_eval_return: f64,
    pub population_steps: usize,
    pub rl_steps: usize,
    pub updates: usize,
}

#[derive(Debug, Clone, Serialize)]
struct GenerationRecord<'a> {
    generation: usize,
    step: usize,
    fitness: &'a [f64],
    kind: Vec<FitnessKind>,
    elite: Option<usize>,
    population_steps: usize,
    rl_steps: usize,
    injected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub generations: usize,
    pub total_steps: usize,
    pub population_steps: usize,
    pub rl_steps: usize,
    pub updates: usize,
    pub best_fitness: f64,
    pub final_rl_eval_return: f64,
    pub final_elite_eval_return: f64,
    pub final_champion_eval_return: f64,
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub reached_target: bool,
    pub aborted: Option<String>,
    pub wallclock_s: f64,
    #[serde(skip)]
    pub history: Vec<IterationRecord>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

struct RunFiles {
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
    generations: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        let mut files = RunFiles {
            metrics: open("metrics.csv")?,
            losses: open("losses.csv")?,
            generations: open("generations.jsonl")?,
        };
        writeln!(files.metrics, "{METRICS_HEADER}")?;
        writeln!(files.losses, "{LOSSES_HEADER}")?;
        Ok(files)
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.losses.flush()?;
        self.generations.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn thread_cap() -> usize {
    std::env::var("ERL2_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Training state that lives across iterations.
struct Run<'a> {
    cfg: &'a RunConfig,
    rng: SimRng,
    learner: Learner,
    members: Vec<PolicyRepresentation>,
    cem: Option<CemState>,
    buffer: ReplayBuffer,
    champion: PolicyRepresentation,
    steps: usize,
    episodes: usize,
    generation: usize,
    population_steps: usize,
    rl_steps: usize,
    updates: usize,
    best_fitness: f64,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SimRng::seed_from_u64(cfg.seed);
        let spec = cfg.env.spec();
        let learner = Learner::init(
            spec.state_dim,
            spec.action.clone(),
            cfg.learner_config(),
            &mut rng,
        )?;
        let d = learner.z.feature_dim();
        let a = spec.action.dim();
        let (members, cem) = match cfg.evolution {
            EvolutionMode::None => (Vec::new(), None),
            EvolutionMode::Ga => (
                (0..cfg.pop_size)
                    .map(|_| PolicyRepresentation::init(d, a, &mut rng))
                    .collect(),
                None,
            ),
            EvolutionMode::Cem => {
                let state = CemState::new(
                    PolicyRepresentation::init(d, a, &mut rng),
                    &cfg.cem_config(),
                )?;
                (state.sample(cfg.pop_size, &mut rng), Some(state))
            }
        };
        let pool = if cfg.parallel_eval {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(thread_cap())
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Run {
            champion: learner.agent.w.clone(),
            cfg,
            rng,
            learner,
            members,
            cem,
            buffer: ReplayBuffer::new(cfg.buffer_capacity)?,
            steps: 0,
            episodes: 0,
            generation: 0,
            population_steps: 0,
            rl_steps: 0,
            updates: 0,
            best_fitness: f64::NAN,
            pool,
        })
    }

    fn evaluate_population(&mut self, surrogate: bool) -> Result<Vec<Evaluation>> {
        let seeds: Vec<u64> = (0..self.members.len()).map(|_| self.rng.random()).collect();
        let cfg = self.cfg;
        let z = &self.learner.z;
        let pevfa: &PeVfa = &self.learner.pevfa;
        let eval_one = |(w, seed): (&PolicyRepresentation, u64)| -> Result<Evaluation> {
            let mut rng = SimRng::seed_from_u64(seed);
            let mut env = cfg.env.make();
            if surrogate {
                evaluate_fitness_surrogate(
                    z,
                    w,
                    env.as_mut(),
                    pevfa,
                    cfg.surrogate_horizon,
                    cfg.gamma,
                    &mut rng,
                )
            } else {
                evaluate_fitness_mc(z, w, env.as_mut(), cfg.fitness_episodes, &mut rng)
            }
        };
        let jobs: Vec<(&PolicyRepresentation, u64)> = self.members.iter().zip(seeds).collect();
        match &self.pool {
            Some(pool) => pool.install(|| jobs.into_par_iter().map(eval_one).collect()),
            None => jobs.into_iter().map(eval_one).collect(),
        }
    }

    fn write_losses(&self, files: &mut RunFiles, l: &StepLosses) -> Result<()> {
        writeln!(
            files.losses,
            "{},{},{},{},{}",
            self.steps,
            opt(l.critic),
            opt(l.pevfa),
            opt(l.actor),
            l.shared
        )?;
        Ok(())
    }

    /// One iteration; returns the metrics row.
    fn iterate(&mut self, files: &mut RunFiles) -> Result<IterationRecord> {
        let cfg = self.cfg;
        let has_pop = !self.members.is_empty();
        self.generation += 1;

        // fitness
        let surrogate_used = has_pop && self.rng.random::<f64>() >= cfg.mc_probability;
        let evals = if has_pop {
            self.evaluate_population(surrogate_used)?
        } else {
            Vec::new()
        };
        let mut pop_steps = 0;
        let mut fitness = Vec::with_capacity(evals.len());
        let mut kinds = Vec::with_capacity(evals.len());
        for ev in evals {
            if !ev.estimate.value.is_finite() {
                return Err(Error::NonFinite("fitness".into()));
            }
            pop_steps += ev.estimate.steps_used;
            self.episodes += ev.estimate.episodes_used;
            fitness.push(ev.estimate.value);
            kinds.push(ev.estimate.kind);
            self.buffer.extend(ev.transitions);
        }

        // RL episode
        let mut rl_steps = 0;
        if cfg.rl_agent {
            let mut env = cfg.env.make();
            let horizon = env.spec().horizon;
            let r = rollout(
                &self.learner.z,
                &self.learner.agent.w,
                env.as_mut(),
                horizon,
                self.learner.agent.explore_sigma,
                &mut self.rng,
            )?;
            rl_steps = r.steps;
            self.episodes += 1;
            self.buffer.extend(r.transitions);
        }
        self.steps += pop_steps + rl_steps;
        self.population_steps += pop_steps;
        self.rl_steps += rl_steps;

        // one update per collected step
        let mut updates = 0;
        if self.steps >= cfg.warmup_steps {
            for _ in 0..pop_steps + rl_steps {
                let losses = if cfg.rl_agent {
                    self.learner
                        .update(&self.buffer, &self.members, &mut self.rng)?
                } else {
                    self.learner.update_population_only(
                        &self.buffer,
                        &self.members,
                        &mut self.rng,
                    )?
                };
                self.write_losses(files, &losses)?;
                updates += 1;
            }
        }
        self.updates += updates;

        // evolution
        let ranked = rank_by_fitness(&fitness);
        let elite = ranked.first().copied();
        let elite_policy = elite.map(|i| self.members[i].clone());
        let mut injected = None;
        match cfg.evolution {
            EvolutionMode::None => {}
            EvolutionMode::Ga => {
                let outcome = select(&fitness, cfg.elites, &mut self.rng)?;
                let mut next = evolve_generation(
                    &self.members,
                    &outcome,
                    &cfg.evolution_config(),
                    &mut self.rng,
                )?;
                if cfg.rl_agent
                    && cfg.injection_period > 0
                    && self.generation.is_multiple_of(cfg.injection_period)
                {
                    injected = Some(rl_inject(
                        &mut next,
                        &fitness,
                        &outcome.elites,
                        &self.learner.agent.w,
                    )?);
                }
                self.members = next;
            }
            EvolutionMode::Cem => {
                let state = self.cem.as_mut().expect("CEM state");
                state.update(&self.members, &fitness)?;
                let mut next = state.sample(cfg.pop_size, &mut self.rng);
                if cfg.cem_elitism {
                    next[0] = elite_policy.clone().expect("non-empty population");
                }
                self.members = next;
            }
        }

        let fitness_best = elite.map_or(f64::NAN, |i| fitness[i]);
        let fitness_mean = if fitness.is_empty() {
            f64::NAN
        } else {
            fitness.iter().sum::<f64>() / fitness.len() as f64
        };
        if !fitness_best.is_nan() && !(self.best_fitness >= fitness_best) {
            self.best_fitness = fitness_best;
        }

        let gen = GenerationRecord {
            generation: self.generation,
            step: self.steps,
            fitness: &fitness,
            kind: kinds,
            elite,
            population_steps: pop_steps,
            rl_steps,
            injected,
        };
        serde_json::to_writer(&mut files.generations, &gen).map_err(|e| Error::Io(e.into()))?;
        writeln!(files.generations)?;

        // evaluation on fixed seeds; does not count towards the step budget
        let z = &self.learner.z;
        let rl_eval = if cfg.rl_agent {
            evaluate_policy(
                z,
                &self.learner.agent.w,
                cfg.env,
                cfg.eval_episodes,
                cfg.eval_seed,
            )?
            .mean
        } else {
            f64::NAN
        };
        let elite_eval = match &elite_policy {
            Some(w) => evaluate_policy(z, w, cfg.env, cfg.eval_episodes, cfg.eval_seed)?.mean,
            None => f64::NAN,
        };
        let champion_eval = if elite_eval > rl_eval || rl_eval.is_nan() {
            self.champion = elite_policy.expect("elite present");
            elite_eval
        } else {
            self.champion = self.learner.agent.w.clone();
            rl_eval
        };

        let rec = IterationRecord {
            step: self.steps,
            episodes: self.episodes,
            fitness_best,
            fitness_mean,
            rl_eval_return: rl_eval,
            surrogate_used,
            elite_eval_return: elite_eval,
            champion_eval_return: champion_eval,
            population_steps: pop_steps,
            rl_steps,
            updates,
        };
        writeln!(
            files.metrics,
            "{},{},{},{},{},{},{},{}",
            rec.step,
            rec.episodes,
            rec.fitness_best,
            rec.fitness_mean,
            rec.rl_eval_return,
            u8::from(rec.surrogate_used),
            rec.elite_eval_return,
            rec.champion_eval_return
        )?;
        files.flush()?;
        Ok(rec)
    }

    fn checkpoint(&self) -> RunCheckpoint {
        RunCheckpoint {
            config: self.cfg.to_text(),
            encoder: self.learner.z.clone(),
            rl_policy: self.learner.agent.w.clone(),
            population: self.members.clone(),
            champion: self.champion.clone(),
            critic: self.learner.critic.clone(),
            pevfa: self.learner.pevfa.clone(),
        }
    }
}

/// Train with `cfg`, writing everything under `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    let start = Instant::now();
    let mut run = Run::new(cfg)?;
    let dir = cfg.out_dir.clone();
    let mut files = RunFiles::create(&dir, cfg)?;
    let mut history = Vec::new();
    let mut reached_target = false;
    let mut aborted = None;
    while run.steps < cfg.total_steps {
        match run.iterate(&mut files) {
            Ok(rec) => {
                log::info!(
                    "gen {} step {} fitness {:.3} champion {:.3}",
                    run.generation,
                    rec.step,
                    rec.fitness_best,
                    rec.champion_eval_return
                );
                let hit = cfg
                    .target_return
                    .is_some_and(|t| rec.champion_eval_return >= t);
                history.push(rec);
                if hit {
                    reached_target = true;
                    break;
                }
            }
            Err(e) => {
                log::error!("run aborted at step {}: {e}", run.steps);
                aborted = Some(e);
                break;
            }
        }
    }
    files.flush()?;
    run.checkpoint().write(&dir.join("checkpoint.erl2"))?;
    let last = history.last();
    let summary = RunSummary {
        generations: run.generation,
        total_steps: run.steps,
        population_steps: run.population_steps,
        rl_steps: run.rl_steps,
        updates: run.updates,
        best_fitness: run.best_fitness,
        final_rl_eval_return: last.map_or(f64::NAN, |r| r.rl_eval_return),
        final_elite_eval_return: last.map_or(f64::NAN, |r| r.elite_eval_return),
        final_champion_eval_return: last.map_or(f64::NAN, |r| r.champion_eval_return),
        eval_seed: cfg.eval_seed,
        eval_episodes: cfg.eval_episodes,
        reached_target,
        aborted: aborted.as_ref().map(|e| e.to_string()),
        wallclock_s: start.elapsed().as_secs_f64(),
        history,
        out_dir: dir.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    match aborted {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

pub const ABLATION_AXES: &[&str] = &[
    "operators",
    "surrogate",
    "sharedrep",
    "k",
    "alpha",
    "p",
    "h",
    "beta",
    "popsize",
    "ea-only",
];

/// The cells of one ablation axis: a name and the configuration for it.
/// Every cell keeps the base seed and writes under `out_dir/<axis>/<cell>`.
pub fn ablation_cells(base: &RunConfig, axis: &str) -> Result<Vec<(String, RunConfig)>> {
    let cell = |name: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        edit(&mut c);
        c.out_dir = base.out_dir.join(axis).join(&name);
        (name, c)
    };
    use crate::evolution::OperatorLevel::{Behavior, Parameter};
    let cells = match axis {
        "operators" => [
            (Behavior, Behavior),
            (Behavior, Parameter),
            (Parameter, Behavior),
            (Parameter, Parameter),
        ]
        .into_iter()
        .map(|(x, m)| {
            cell(format!("crossover-{x}_mutation-{m}"), &|c| {
                c.crossover_op = x;
                c.mutation_op = m;
            })
        })
        .collect(),
        "surrogate" => vec![
            cell("on".into(), &|_| {}),
            cell("off".into(), &|c| c.mc_probability = 1.0),
        ],
        "sharedrep" => {
            let k = base.sharedrep_policies.max(1);
            vec![
                cell("critic-only".into(), &|c| {
                    c.sharedrep_policies = 0;
                    c.sharedrep_critic = true;
                }),
                cell("pevfa-only".into(), &|c| {
                    c.sharedrep_policies = k;
                    c.sharedrep_critic = false;
                }),
                cell("both".into(), &|c| {
                    c.sharedrep_policies = k;
                    c.sharedrep_critic = true;
                }),
            ]
        }
        "k" => (1..=base.pop_size.min(3))
            .map(|k| cell(format!("k{k}"), &|c| c.sharedrep_policies = k))
            .collect(),
        "alpha" => [0.25, 0.5, 1.0]
            .into_iter()
            .map(|a| cell(format!("alpha{a}"), &|c| c.mutation_alpha = a))
            .collect(),
        "p" => [0.0, 0.2, 0.5, 0.8, 1.0]
            .into_iter()
            .map(|p| cell(format!("p{p}"), &|c| c.mc_probability = p))
            .collect(),
        "h" => [10, 25, 50, 100]
            .into_iter()
            .map(|h| cell(format!("h{h}"), &|c| c.surrogate_horizon = h))
            .collect(),
        "beta" => [0.1, 0.2, 0.5]
            .into_iter()
            .map(|b| cell(format!("beta{b}"), &|c| c.mutation_beta = b))
            .collect(),
        "popsize" => [3, 5, 10]
            .into_iter()
            .map(|n| {
                cell(format!("n{n}"), &|c| {
                    c.pop_size = n;
                    c.sharedrep_policies = c.sharedrep_policies.min(n);
                    c.cem_top = c.cem_top.min(n);
                })
            })
            .collect(),
        "ea-only" => vec![
            cell("erl".into(), &|c| c.rl_agent = true),
            cell("ea-only".into(), &|c| {
                c.rl_agent = false;
                c.evolution = if c.evolution == EvolutionMode::None {
                    EvolutionMode::Ga
                } else {
                    c.evolution
                };
                c.sharedrep_critic = false;
                c.sharedrep_policies = c.sharedrep_policies.max(1);
            }),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown ablation axis '{other}' (expected one of {})",
                ABLATION_AXES.join(", ")
            )))
        }
    };
    for (_, c) in &cells {
        c.validate()?;
    }
    Ok(cells)
}

/// Run every cell of `axis` in turn and write `ablation.csv`.
pub fn ablate(base: &RunConfig, axis: &str) -> Result<Vec<(String, RunSummary)>> {
    let cells = ablation_cells(base, axis)?;
    let dir = base.out_dir.join(axis);
    fs::create_dir_all(&dir)?;
    let mut out = Vec::with_capacity(cells.len());
    let mut table =
        String::from("cell,total_steps,population_steps,best_fitness,final_champion_eval_return\n");
    for (name, cfg) in cells {
        log::info!("ablation {axis}: cell {name}");
        let s = train(&cfg)?;
        table.push_str(&format!(
            "{name},{},{},{},{}\n",
            s.total_steps, s.population_steps, s.best_fitness, s.final_champion_eval_return
        ));
        out.push((name, s));
    }
    fs::write(dir.join("ablation.csv"), table)?;
    Ok(out)
}

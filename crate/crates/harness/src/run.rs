//! Training and evaluation loops.

use std::path::PathBuf;

use bro_core::agent::{ActionMode, AgentState, DiagnosticRow};
use bro_core::envsim::Environment;
use bro_core::replay::{ReplayBuffer, Transition, DEFAULT_CAPACITY};
use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{mean_diagnostics, MetricLine, MetricRecord, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Runs `episodes` episodes of the deterministic pessimistic policy. The
/// agent is only read; `rng` drives env resets.
pub fn evaluate(
    agent: &AgentState<f32>,
    env: &mut dyn Environment,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        loop {
            let action = agent.select_action(&to_f32(&obs), ActionMode::Evaluate, rng)?;
            let action: Vec<f64> = action.iter().map(|&a| a as f64).collect();
            let step = env.step(&action)?;
            total += step.reward;
            obs = step.obs;
            if step.terminated || step.truncated {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// What happened during one env step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    pub reset: bool,
    pub episode_return: Option<f64>,
    pub updates: usize,
}

/// A single seeded run, advanced one env step at a time.
pub struct Trainer {
    config: RunConfig,
    agent: AgentState<f32>,
    buffer: ReplayBuffer<f32>,
    env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    episode_return: f64,
    pending: Vec<DiagnosticRow>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut env = config.env.build()?;
        let eval_env = config.env.build()?;
        let spec = env.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let agent = AgentState::new(config.hyper.clone(), spec.obs_dim, spec.act_dim, &mut rng)?;
        let capacity = DEFAULT_CAPACITY.min(config.total_env_steps.max(1) as usize);
        let buffer = ReplayBuffer::new(capacity, spec.obs_dim, spec.act_dim)?;
        let obs = env.reset(&mut rng);
        Ok(Trainer {
            config,
            agent,
            buffer,
            env,
            eval_env,
            rng,
            obs,
            episode_return: 0.0,
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn agent(&self) -> &AgentState<f32> {
        &self.agent
    }

    pub fn buffer(&self) -> &ReplayBuffer<f32> {
        &self.buffer
    }

    pub fn env_step(&self) -> u64 {
        self.agent.env_step()
    }

    pub fn pending_rows(&self) -> &[DiagnosticRow] {
        &self.pending
    }

    /// Act, store the transition, apply a scheduled reset, then run
    /// `replay_ratio` updates once past the exploratory phase.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let obs = to_f32(&self.obs);
        let action = self.agent.select_action(&obs, ActionMode::Explore, &mut self.rng)?;
        let env_action: Vec<f64> = action.iter().map(|&a| a as f64).collect();
        let result = self.env.step(&env_action)?;
        self.episode_return += result.reward;
        self.buffer.add(Transition {
            obs,
            action,
            reward: result.reward as f32,
            next_obs: to_f32(&result.obs),
            terminated: result.terminated,
            truncated: result.truncated,
        })?;
        let mut outcome = StepOutcome::default();
        if result.terminated || result.truncated {
            outcome.episode_return = Some(self.episode_return);
            self.episode_return = 0.0;
            self.obs = self.env.reset(&mut self.rng);
        } else {
            self.obs = result.obs;
        }
        self.agent.advance_env_step();
        outcome.reset = self.agent.maybe_reset(&mut self.rng)?;
        if outcome.reset {
            info!("seed {}: parameters reset at env step {}", self.config.seed, self.env_step());
        }
        if self.env_step() >= self.config.hyper.exploratory_steps {
            let step = self.agent.train_step(&self.buffer, &mut self.rng).map_err(|e| match e {
                bro_core::Error::Diverged(message) => HarnessError::Diverged {
                    env_step: self.agent.env_step(),
                    message,
                },
                other => other.into(),
            })?;
            outcome.updates = step.rows.len();
            self.pending.extend(step.rows);
        }
        Ok(outcome)
    }

    /// Evaluation returns at the current step. Each eval point uses its own
    /// rng stream, so evaluating never perturbs training.
    pub fn evaluate(&mut self) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + self.env_step());
        evaluate(&self.agent, self.eval_env.as_mut(), self.config.eval_episodes, &mut rng)
    }

    /// Evaluates and folds the diagnostics gathered since the last record.
    pub fn record(&mut self) -> Result<MetricRecord> {
        let episode_returns = self.evaluate()?;
        let eval_return = episode_returns.iter().sum::<f64>() / episode_returns.len() as f64;
        let record = MetricRecord {
            env_step: self.env_step(),
            gradient_step: self.agent.gradient_step(),
            eval_return,
            episode_returns,
            updates: self.pending.len() as u64,
            diagnostics: mean_diagnostics(&self.pending),
        };
        self.pending.clear();
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            agent: self.agent.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub records: Vec<MetricRecord>,
    pub reset_steps: Vec<u64>,
}

impl RunSummary {
    pub fn final_return(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_return)
    }
}

/// Full run writing `config.toml`, `metrics.jsonl`, periodic
/// `step-<n>.ckpt` and `final.ckpt` into `config.out_dir`. On divergence the
/// metrics file ends with a `failed` line and the error is returned.
pub fn run_training(config: &RunConfig) -> Result<RunSummary> {
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(HarnessError::io(&out))?;
    let mut trainer = Trainer::new(config.clone())?;
    std::fs::write(out.join(CONFIG_FILE), config.to_toml_string()).map_err(HarnessError::io(out.join(CONFIG_FILE)))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut records = Vec::new();
    let mut reset_steps = Vec::new();
    while trainer.env_step() < config.total_env_steps {
        let outcome = match trainer.step() {
            Ok(o) => o,
            Err(e @ HarnessError::Diverged { .. }) => {
                warn!("seed {}: {e}", config.seed);
                metrics.write(&MetricLine::Failed {
                    env_step: trainer.env_step(),
                    message: e.to_string(),
                })?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = trainer.env_step();
        if outcome.reset {
            reset_steps.push(step);
            metrics.write(&MetricLine::Reset { env_step: step })?;
        }
        if step % config.eval_every == 0 {
            let record = trainer.record()?;
            info!("seed {} step {step}: eval return {:.2}", config.seed, record.eval_return);
            metrics.write(&MetricLine::Eval(record.clone()))?;
            records.push(record);
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.total_env_steps {
            trainer.checkpoint().save(&out.join(format!("step-{step}.ckpt")))?;
        }
    }
    let checkpoint_path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint_path)?;
    Ok(RunSummary {
        metrics_path,
        checkpoint_path,
        records,
        reset_steps,
    })
}

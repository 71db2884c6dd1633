//! Run configuration and its flat TOML form.
//!
//! A config file is a single table of `key = value` pairs. Run-level keys
//! (`env`, `seed`, `total_env_steps`, ...) sit next to environment parameters
//! and every [`BroHyperparams`] field; unknown keys are rejected. An optional
//! `preset` key picks the hyperparameter base that the remaining keys
//! override.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bro_core::agent::BroHyperparams;
use bro_core::envsim::{Environment, GaussianBandit, Lqr, Pendulum};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Bro,
    BroFast,
}

impl Preset {
    pub fn hyperparams(self) -> BroHyperparams {
        match self {
            Preset::Bro => BroHyperparams::bro(),
            Preset::BroFast => BroHyperparams::bro_fast(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Bro => "bro",
            Preset::BroFast => "bro-fast",
        }
    }
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bro" => Ok(Preset::Bro),
            "bro-fast" => Ok(Preset::BroFast),
            _ => Err(HarnessError::Config(format!("unknown preset `{s}` (expected bro or bro-fast)"))),
        }
    }
}

/// Environment and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvConfig {
    Pendulum {
        horizon: usize,
    },
    /// Scalar LQR `x' = a x + b u`, cost `q x² + r u²`.
    Lqr {
        a: f64,
        b: f64,
        q: f64,
        r: f64,
        action_scale: f64,
        noise_std: f64,
        horizon: usize,
    },
    Bandit {
        act_dim: usize,
        offset: f64,
        curvature: f64,
        sigma_r: f64,
    },
}

const ENV_NAMES: [&str; 3] = ["pendulum", "lqr", "bandit"];

impl EnvConfig {
    pub fn default_for(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(EnvConfig::Pendulum { horizon: 200 }),
            "lqr" => Ok(EnvConfig::Lqr {
                a: 1.0,
                b: 1.0,
                q: 1.0,
                r: 1.0,
                action_scale: 2.0,
                noise_std: 0.0,
                horizon: 50,
            }),
            "bandit" => Ok(EnvConfig::Bandit {
                act_dim: 1,
                offset: 1.0,
                curvature: 1.0,
                sigma_r: 0.5,
            }),
            _ => Err(HarnessError::Config(format!(
                "unknown env `{name}` (expected one of {})",
                ENV_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Pendulum { .. } => "pendulum",
            EnvConfig::Lqr { .. } => "lqr",
            EnvConfig::Bandit { .. } => "bandit",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match *self {
            EnvConfig::Pendulum { horizon } => Box::new(Pendulum::with_horizon(horizon)),
            EnvConfig::Lqr {
                a,
                b,
                q,
                r,
                action_scale,
                noise_std,
                horizon,
            } => {
                let m = |v| nalgebra::DMatrix::from_element(1, 1, v);
                Box::new(Lqr::new(m(a), m(b), m(q), m(r), action_scale, noise_std, horizon)?)
            }
            EnvConfig::Bandit {
                act_dim,
                offset,
                curvature,
                sigma_r,
            } => Box::new(GaussianBandit::new(act_dim, offset, curvature, sigma_r)?),
        })
    }

    /// Flat key/value pairs, as written in config files.
    fn to_pairs(&self) -> Vec<(&'static str, Value)> {
        let f = Value::Float;
        let i = |v: usize| Value::Integer(v as i64);
        match *self {
            EnvConfig::Pendulum { horizon } => vec![("horizon", i(horizon))],
            EnvConfig::Lqr {
                a,
                b,
                q,
                r,
                action_scale,
                noise_std,
                horizon,
            } => vec![
                ("lqr_a", f(a)),
                ("lqr_b", f(b)),
                ("lqr_q", f(q)),
                ("lqr_r", f(r)),
                ("action_scale", f(action_scale)),
                ("noise_std", f(noise_std)),
                ("horizon", i(horizon)),
            ],
            EnvConfig::Bandit {
                act_dim,
                offset,
                curvature,
                sigma_r,
            } => vec![
                ("bandit_act_dim", i(act_dim)),
                ("bandit_offset", f(offset)),
                ("bandit_curvature", f(curvature)),
                ("bandit_sigma", f(sigma_r)),
            ],
        }
    }

    /// Takes this env's keys out of `table`, leaving everything else.
    fn take_overrides(&mut self, table: &mut Table) -> Result<()> {
        let mut take_f = |key: &str, slot: &mut f64| -> Result<()> {
            if let Some(v) = table.remove(key) {
                *slot = as_float(key, &v)?;
            }
            Ok(())
        };
        match self {
            EnvConfig::Pendulum { .. } => {}
            EnvConfig::Lqr {
                a,
                b,
                q,
                r,
                action_scale,
                noise_std,
                ..
            } => {
                take_f("lqr_a", a)?;
                take_f("lqr_b", b)?;
                take_f("lqr_q", q)?;
                take_f("lqr_r", r)?;
                take_f("action_scale", action_scale)?;
                take_f("noise_std", noise_std)?;
            }
            EnvConfig::Bandit {
                offset,
                curvature,
                sigma_r,
                ..
            } => {
                take_f("bandit_offset", offset)?;
                take_f("bandit_curvature", curvature)?;
                take_f("bandit_sigma", sigma_r)?;
            }
        }
        match self {
            EnvConfig::Pendulum { horizon } | EnvConfig::Lqr { horizon, .. } => {
                if let Some(v) = table.remove("horizon") {
                    *horizon = as_count("horizon", &v)?;
                }
            }
            EnvConfig::Bandit { act_dim, .. } => {
                if let Some(v) = table.remove("bandit_act_dim") {
                    *act_dim = as_count("bandit_act_dim", &v)?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for EnvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn as_float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(n) => Ok(*n as f64),
        _ => Err(HarnessError::Config(format!("`{key}` must be a number"))),
    }
}

fn as_count(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(n) if *n >= 0 => Ok(*n as usize),
        _ => Err(HarnessError::Config(format!("`{key}` must be a non-negative integer"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    as_count(key, v).map(|n| n as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub hyper: BroHyperparams,
    pub seed: u64,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Checkpoint period in env steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

const RUN_KEYS: [&str; 8] = [
    "preset",
    "env",
    "seed",
    "total_env_steps",
    "eval_every",
    "eval_episodes",
    "checkpoint_every",
    "out_dir",
];

impl RunConfig {
    pub fn new(env: EnvConfig, preset: Preset) -> Self {
        RunConfig {
            env,
            hyper: preset.hyperparams(),
            seed: 0,
            total_env_steps: 30_000,
            eval_every: 1_000,
            eval_episodes: 10,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.total_env_steps < self.eval_every {
            return Err(HarnessError::Config(format!(
                "need total_env_steps >= eval_every >= 1, got {} and {}",
                self.total_env_steps, self.eval_every
            )));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::Config("eval_episodes must be at least 1".into()));
        }
        self.hyper.validate()?;
        self.env.build()?;
        Ok(())
    }

    /// Parses a flat TOML document. `preset_override` replaces the file's
    /// `preset` key.
    pub fn from_toml_str(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        Self::from_table(table, preset_override)
    }

    pub fn from_file(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_toml_str(&text, preset_override)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_table(mut table: Table, preset_override: Option<Preset>) -> Result<Self> {
        let preset = match (preset_override, table.remove("preset")) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(HarnessError::Config("`preset` must be a string".into())),
            (None, None) => Preset::Bro,
        };
        let env_name = match table.remove("env") {
            Some(Value::String(s)) => s,
            Some(_) => return Err(HarnessError::Config("`env` must be a string".into())),
            None => "pendulum".to_string(),
        };
        let mut config = RunConfig::new(EnvConfig::default_for(&env_name)?, preset);
        config.env.take_overrides(&mut table)?;
        if let Some(v) = table.remove("seed") {
            config.seed = as_u64("seed", &v)?;
        }
        if let Some(v) = table.remove("total_env_steps") {
            config.total_env_steps = as_u64("total_env_steps", &v)?;
        }
        if let Some(v) = table.remove("eval_every") {
            config.eval_every = as_u64("eval_every", &v)?;
        }
        if let Some(v) = table.remove("eval_episodes") {
            config.eval_episodes = as_count("eval_episodes", &v)?;
        }
        if let Some(v) = table.remove("checkpoint_every") {
            config.checkpoint_every = as_u64("checkpoint_every", &v)?;
        }
        match table.remove("out_dir") {
            Some(Value::String(s)) => config.out_dir = PathBuf::from(s),
            Some(_) => return Err(HarnessError::Config("`out_dir` must be a string".into())),
            None => {}
        }
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(HarnessError::Config(format!("`{key}`: nested tables are not allowed")));
        }
        // Whatever is left must be a hyperparameter; the preset supplies the rest.
        let mut hyper = Table::try_from(&config.hyper).map_err(|e| HarnessError::Config(e.to_string()))?;
        hyper.extend(table);
        config.hyper = hyper
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Flat table with every field explicit (no preset key).
    pub fn to_table(&self) -> Table {
        let mut table = Table::new();
        table.insert("env".into(), Value::String(self.env.name().into()));
        table.insert("seed".into(), Value::Integer(self.seed as i64));
        table.insert("total_env_steps".into(), Value::Integer(self.total_env_steps as i64));
        table.insert("eval_every".into(), Value::Integer(self.eval_every as i64));
        table.insert("eval_episodes".into(), Value::Integer(self.eval_episodes as i64));
        table.insert("checkpoint_every".into(), Value::Integer(self.checkpoint_every as i64));
        table.insert("out_dir".into(), Value::String(self.out_dir.to_string_lossy().into_owned()));
        for (k, v) in self.env.to_pairs() {
            table.insert(k.into(), v);
        }
        let hyper = Table::try_from(&self.hyper).expect("hyperparameters serialize to a table");
        table.extend(hyper);
        table
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_table()).expect("flat table serializes")
    }

    /// Keys whose values differ between two configs.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let (a, b) = (self.to_table(), other.to_table());
        let mut keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
        keys.sort();
        keys.dedup();
        keys.into_iter().filter(|k| a.get(k) != b.get(k)).collect()
    }
}

/// Keys accepted at the top level besides hyperparameters and env parameters.
pub fn run_keys() -> &'static [&'static str] {
    &RUN_KEYS
}

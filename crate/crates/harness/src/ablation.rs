//! Single-component ablations of a base configuration.

use std::fmt;
use std::str::FromStr;

use bro_core::networks::ModelSize;
use log::info;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::report::BASE_GROUP;
use crate::run::{run_training, RunSummary};

/// Size used by `-Scale`: the smallest published critic, comparable to a
/// conventional SAC critic.
pub const STANDARD_CRITIC: ModelSize = ModelSize::new(1, 128);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Toggle {
    NoScale,
    Cdq,
    Rr1,
    NoDualActor,
    NoQuantile,
    NoWeightDecay,
    NoReset,
    NoTargetNet,
}

impl Toggle {
    pub const ALL: [Toggle; 8] = [
        Toggle::NoScale,
        Toggle::Cdq,
        Toggle::Rr1,
        Toggle::NoDualActor,
        Toggle::NoQuantile,
        Toggle::NoWeightDecay,
        Toggle::NoReset,
        Toggle::NoTargetNet,
    ];

    /// Label as used on plots.
    pub fn label(self) -> &'static str {
        match self {
            Toggle::NoScale => "-Scale",
            Toggle::Cdq => "+CDQ",
            Toggle::Rr1 => "+RR=1",
            Toggle::NoDualActor => "-Dual π",
            Toggle::NoQuantile => "-Quantile",
            Toggle::NoWeightDecay => "-WD",
            Toggle::NoReset => "-Reset",
            Toggle::NoTargetNet => "-TargetNet",
        }
    }

    /// Name accepted on the command line and used for run directories.
    pub fn slug(self) -> &'static str {
        match self {
            Toggle::NoScale => "no-scale",
            Toggle::Cdq => "cdq",
            Toggle::Rr1 => "rr1",
            Toggle::NoDualActor => "no-dual",
            Toggle::NoQuantile => "no-quantile",
            Toggle::NoWeightDecay => "no-wd",
            Toggle::NoReset => "no-reset",
            Toggle::NoTargetNet => "no-target-net",
        }
    }

    /// Applies the toggle. Fails if it would leave the config unchanged.
    pub fn apply(self, config: &mut RunConfig) -> Result<()> {
        let h = &mut config.hyper;
        let changed = match self {
            Toggle::NoScale => {
                let smaller = if h.critic_size == STANDARD_CRITIC || h.critic_size.hidden_size < STANDARD_CRITIC.hidden_size {
                    ModelSize::new(h.critic_size.num_blocks, (h.critic_size.hidden_size / 2).max(1))
                } else {
                    STANDARD_CRITIC
                };
                std::mem::replace(&mut h.critic_size, smaller) != smaller
            }
            Toggle::Cdq => !std::mem::replace(&mut h.use_cdq, true),
            Toggle::Rr1 => std::mem::replace(&mut h.replay_ratio, 1) != 1,
            Toggle::NoDualActor => std::mem::replace(&mut h.use_dual_actor, false),
            Toggle::NoQuantile => std::mem::replace(&mut h.use_quantiles, false),
            Toggle::NoWeightDecay => std::mem::replace(&mut h.use_weight_decay, false),
            Toggle::NoReset => std::mem::replace(&mut h.use_resets, false),
            Toggle::NoTargetNet => std::mem::replace(&mut h.use_target_network, false),
        };
        if changed {
            Ok(())
        } else {
            Err(HarnessError::Config(format!("toggle {} does not change the base config", self.label())))
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Toggle {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Toggle::ALL
            .into_iter()
            .find(|t| t.slug() == s || t.label() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Toggle::ALL.iter().map(|t| t.slug()).collect();
                HarnessError::Config(format!("unknown toggle `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// One variant per toggle, each differing from `base` in a single field.
/// Output directories become `<base out_dir>/<toggle slug>`.
pub fn ablation_suite(base: &RunConfig) -> Result<Vec<(Toggle, RunConfig)>> {
    base.validate()?;
    Toggle::ALL
        .into_iter()
        .map(|toggle| {
            let mut variant = base.clone();
            toggle.apply(&mut variant)?;
            variant.out_dir = base.out_dir.join(toggle.slug());
            Ok((toggle, variant))
        })
        .collect()
}

/// Outcome of one run in a suite.
#[derive(Debug)]
pub struct SuiteRun {
    pub group: String,
    pub seed: u64,
    pub result: Result<RunSummary>,
}

/// Runs the base config and every ablation for each seed, writing to
/// `<out_dir>/<group>/seed-<n>/`. A diverged run is recorded and the suite
/// carries on.
pub fn run_suite(base: &RunConfig, seeds: &[u64]) -> Result<Vec<SuiteRun>> {
    let mut configs = vec![(BASE_GROUP.to_string(), base.clone())];
    for (toggle, mut variant) in ablation_suite(base)? {
        variant.out_dir = base.out_dir.clone();
        configs.push((toggle.slug().to_string(), variant));
    }
    let mut runs = Vec::new();
    for (group, config) in &configs {
        for &seed in seeds {
            let mut c = config.clone();
            c.seed = seed;
            c.out_dir = base.out_dir.join(group).join(format!("seed-{seed}"));
            info!("ablation {group} seed {seed}");
            let result = match run_training(&c) {
                Err(e) if !matches!(e, HarnessError::Diverged { .. }) => return Err(e),
                other => other,
            };
            runs.push(SuiteRun {
                group: group.clone(),
                seed,
                result,
            });
        }
    }
    Ok(runs)
}

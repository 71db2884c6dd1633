use std::path::PathBuf;
use std::process::ExitCode;

use bro_harness::ablation::{run_suite, Toggle};
use bro_harness::checkpoint::Checkpoint;
use bro_harness::config::{EnvConfig, Preset, RunConfig};
use bro_harness::report::{discover, emit_plots};
use bro_harness::run::{evaluate, run_training};
use bro_harness::{HarnessError, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Train, evaluate and ablate BRO agents on small control tasks.
#[derive(Parser)]
#[command(name = "bro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write metrics, config and checkpoints.
    Train {
        /// Flat TOML run config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// pendulum, lqr or bandit (with that env's default parameters).
        #[arg(long)]
        env: Option<String>,
        /// bro or bro-fast.
        #[arg(long)]
        preset: Option<String>,
        /// Ablation toggle to apply; repeatable.
        #[arg(long = "toggle")]
        toggles: Vec<String>,
        /// Total env steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with the deterministic pessimistic policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the base config and every single-toggle ablation over several seeds.
    Ablate {
        #[arg(long)]
        base_config: PathBuf,
        /// Number of seeds, counting up from the config's seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Render the report into `<out_dir>/report` afterwards.
        #[arg(long, default_value_t = true)]
        report: bool,
    },
    /// Render learning curves and ablation bars from a directory of runs.
    Report {
        #[arg(long)]
        runs_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn train_config(
    config: Option<PathBuf>,
    seed: Option<u64>,
    env: Option<String>,
    preset: Option<String>,
    toggles: &[String],
    steps: Option<u64>,
    out: Option<PathBuf>,
) -> Result<RunConfig> {
    let preset = preset.map(|p| p.parse::<Preset>()).transpose()?;
    let mut c = match &config {
        Some(path) => RunConfig::from_file(path, preset)?,
        None => RunConfig::new(EnvConfig::default_for("pendulum")?, preset.unwrap_or(Preset::Bro)),
    };
    if let Some(env) = env {
        if env != c.env.name() {
            c.env = EnvConfig::default_for(&env)?;
        }
    }
    if let Some(seed) = seed {
        c.seed = seed;
    }
    if let Some(steps) = steps {
        c.total_env_steps = steps;
        c.eval_every = c.eval_every.min(steps.max(1));
    }
    if let Some(out) = out {
        c.out_dir = out;
    }
    for t in toggles {
        t.parse::<Toggle>()?.apply(&mut c)?;
    }
    c.validate()?;
    Ok(c)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            seed,
            env,
            preset,
            toggles,
            steps,
            out,
        } => {
            let c = train_config(config, seed, env, preset, &toggles, steps, out)?;
            let summary = run_training(&c)?;
            println!(
                "final eval return {:.3} after {} env steps; metrics in {}",
                summary.final_return().unwrap_or(f64::NAN),
                c.total_env_steps,
                summary.metrics_path.display()
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let episodes = episodes.unwrap_or(ckpt.config.eval_episodes);
            if episodes == 0 {
                return Err(HarnessError::Config("--episodes must be at least 1".into()));
            }
            let mut env = ckpt.config.env.build()?;
            let returns = evaluate(&ckpt.agent, env.as_mut(), episodes, &mut ChaCha8Rng::seed_from_u64(seed))?;
            for r in &returns {
                println!("{r}");
            }
            println!("mean {}", returns.iter().sum::<f64>() / returns.len() as f64);
        }
        Command::Ablate {
            base_config,
            seeds,
            report,
        } => {
            let base = RunConfig::from_file(&base_config, None)?;
            if seeds == 0 {
                return Err(HarnessError::Config("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (base.seed..base.seed + seeds).collect();
            let runs = run_suite(&base, &seed_list)?;
            let mut diverged = None;
            for run in &runs {
                match &run.result {
                    Ok(s) => println!("{} seed {}: final {:.3}", run.group, run.seed, s.final_return().unwrap_or(f64::NAN)),
                    Err(e) => {
                        println!("{} seed {}: {e}", run.group, run.seed);
                        diverged = Some(e.to_string());
                    }
                }
            }
            if report {
                let files = emit_plots(&discover(&base.out_dir)?, &base.out_dir.join("report"))?;
                println!("report in {}", files.curves_svg.parent().unwrap_or(&base.out_dir).display());
            }
            if let Some(message) = diverged {
                return Err(HarnessError::Diverged { env_step: 0, message });
            }
        }
        Command::Report { runs_dir, out_dir } => {
            let files = emit_plots(&discover(&runs_dir)?, &out_dir)?;
            println!("{}", files.curves_svg.display());
            if let Some((svg, _)) = files.ablation {
                println!("{}", svg.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

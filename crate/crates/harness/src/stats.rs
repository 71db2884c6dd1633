//! Aggregate statistics over runs: interquartile mean and stratified
//! bootstrap intervals, plus per-env score normalization.

use rand::Rng;

use crate::error::{HarnessError, Result};

pub const DEFAULT_N_BOOT: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Mean after dropping the `⌊n/4⌋` smallest and `⌊n/4⌋` largest values.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    if scores.len() < 4 {
        return Err(HarnessError::Config(format!("iqm needs at least 4 scores, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(HarnessError::Config("iqm needs finite scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted.len() / 4;
    let middle = &sorted[cut..sorted.len() - cut];
    Ok(middle.iter().sum::<f64>() / middle.len() as f64)
}

/// Scores laid out `[run][task]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    runs: usize,
    tasks: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let runs = rows.len();
        let tasks = rows.first().map_or(0, Vec::len);
        if runs == 0 || tasks == 0 || rows.iter().any(|r| r.len() != tasks) {
            return Err(HarnessError::Config("score matrix must be a non-empty rectangle".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|s| !s.is_finite()) {
            return Err(HarnessError::Config("score matrix must be finite".into()));
        }
        Ok(ScoreMatrix { runs, tasks, data })
    }

    pub fn runs(&self) -> usize {
        self.runs
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn run(&self, i: usize) -> &[f64] {
        &self.data[i * self.tasks..(i + 1) * self.tasks]
    }

    pub fn iqm(&self) -> Result<f64> {
        iqm(&self.data)
    }
}

/// Percentile interval of the IQM under resampling runs with replacement
/// independently within each task.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    matrix: &ScoreMatrix,
    n_boot: usize,
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if matrix.runs < 2 {
        return Err(HarnessError::Config("bootstrap needs at least 2 runs".into()));
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(HarnessError::Config("bootstrap needs n_boot >= 1 and level in (0, 1)".into()));
    }
    if matrix.data.len() < 4 {
        return Err(HarnessError::Config("bootstrap needs at least 4 scores".into()));
    }
    let mut sample = vec![0.0; matrix.data.len()];
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        for task in 0..matrix.tasks {
            for run in 0..matrix.runs {
                let pick = rng.random_range(0..matrix.runs);
                sample[run * matrix.tasks + task] = matrix.data[pick * matrix.tasks + task];
            }
        }
        stats.push(iqm(&sample)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((percentile(&stats, tail), percentile(&stats, 1.0 - tail)))
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(random, best)` returns used to map an env's returns onto [0, 1].
pub fn score_bounds(env: &str) -> Option<(f64, f64)> {
    match env {
        "pendulum" => Some((-1200.0, -140.0)),
        _ => None,
    }
}

/// `(ret - random) / (best - random)`; unknown envs pass through unchanged.
pub fn normalize_score(env: &str, ret: f64) -> f64 {
    match score_bounds(env) {
        Some((random, best)) => (ret - random) / (best - random),
        None => ret,
    }
}

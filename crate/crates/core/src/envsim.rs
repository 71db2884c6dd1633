//! Small continuous-control environments with closed-form references.
//!
//! Adapter contract: agents always act in `[-1, 1]^act_dim`. An environment
//! clips the incoming action to that box and maps it affinely onto
//! `[action_low, action_high]` before applying it, so wrapping an external
//! simulator only requires `spec`, `reset` and `step`.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.max_episode_steps == 0 {
            return Err(Error::Config("env dimensions and horizon must be positive".into()));
        }
        if self.action_low.len() != self.act_dim || self.action_high.len() != self.act_dim {
            return Err(Error::shape("action bounds", self.act_dim, self.action_low.len()));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action_low must be below action_high".into()));
        }
        Ok(())
    }

    /// Clips a normalized action to `[-1, 1]` and maps it into the native box.
    pub fn rescale_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.act_dim {
            return Err(Error::shape("action", self.act_dim, action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Domain("non-finite action".into()));
        }
        Ok(action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| lo + (a.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

fn angle_normalize(x: f64) -> f64 {
    (x + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Torque-limited swing-up: observation `(cos θ, sin θ, θ̇)`, θ = 0 upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    steps: usize,
}

impl Pendulum {
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const DT: f64 = 0.05;
    pub const G: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;

    pub fn new() -> Self {
        Self::with_horizon(200)
    }

    pub fn with_horizon(max_episode_steps: usize) -> Self {
        Pendulum {
            spec: EnvSpec {
                obs_dim: 3,
                act_dim: 1,
                action_low: vec![-Self::MAX_TORQUE],
                action_high: vec![Self::MAX_TORQUE],
                max_episode_steps,
            },
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
        }
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
    }

    pub fn observe(&self) -> Vec<f64> {
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

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let u = self.spec.rescale_action(action)?[0];
        let (th, thdot) = (self.theta, self.theta_dot);
        let cost = angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
        let accel = 3.0 * Self::G / (2.0 * Self::LENGTH) * th.sin() + 3.0 / (Self::MASS * Self::LENGTH.powi(2)) * u;
        let new_thdot = (thdot + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta = th + new_thdot * Self::DT;
        self.theta_dot = new_thdot;
        self.steps += 1;
        Ok(StepResult {
            obs: self.observe(),
            reward: -cost,
            terminated: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }
}

/// Linear system `x' = Ax + Bu + w`, `w ~ N(0, noise_std² I)`, with reward
/// `-(xᵀQx + uᵀRu)`. Resets draw `x₀ ~ U[-init_bound, init_bound]^d`.
#[derive(Clone, Debug)]
pub struct Lqr {
    spec: EnvSpec,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    noise_std: f64,
    init_bound: f64,
    x: DMatrix<f64>,
    noise: ChaCha8Rng,
    steps: usize,
}

impl Lqr {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        action_scale: f64,
        noise_std: f64,
        max_episode_steps: usize,
    ) -> Result<Self> {
        let d = a.nrows();
        let m = b.ncols();
        if a.ncols() != d || b.nrows() != d || q.shape() != (d, d) || r.shape() != (m, m) {
            return Err(Error::Config("inconsistent LQR matrix shapes".into()));
        }
        if !(action_scale > 0.0) || !(noise_std >= 0.0) {
            return Err(Error::Config("LQR action scale must be positive and noise non-negative".into()));
        }
        let spec = EnvSpec {
            obs_dim: d,
            act_dim: m,
            action_low: vec![-action_scale; m],
            action_high: vec![action_scale; m],
            max_episode_steps,
        };
        spec.validate()?;
        Ok(Lqr {
            spec,
            a,
            b,
            q,
            r,
            noise_std,
            init_bound: 1.0,
            x: DMatrix::zeros(d, 1),
            noise: ChaCha8Rng::seed_from_u64(0),
            steps: 0,
        })
    }

    /// Scalar system with A = B = Q = R = 1.
    pub fn scalar(action_scale: f64, noise_std: f64, max_episode_steps: usize) -> Result<Self> {
        let one = || DMatrix::from_element(1, 1, 1.0);
        Self::new(one(), one(), one(), one(), action_scale, noise_std, max_episode_steps)
    }

    pub fn matrices(&self) -> (&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>) {
        (&self.a, &self.b, &self.q, &self.r)
    }

    pub fn init_bound(&self) -> f64 {
        self.init_bound
    }

    pub fn state(&self) -> Vec<f64> {
        self.x.iter().copied().collect()
    }

    pub fn set_state(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.obs_dim {
            return Err(Error::shape("LQR state", self.spec.obs_dim, x.len()));
        }
        self.x = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(())
    }

    /// Undiscounted cost of `u = -Kx` from `x0` over the horizon, through the
    /// environment's own clipping and noise-free dynamics.
    pub fn linear_policy_cost(&self, gain: &DMatrix<f64>, x0: &[f64]) -> Result<f64> {
        let mut env = self.clone();
        env.noise_std = 0.0;
        env.set_state(x0)?;
        env.steps = 0;
        let scale = self.spec.action_high[0];
        let mut cost = 0.0;
        loop {
            let u = -(gain * &env.x);
            let normalized: Vec<f64> = u.iter().map(|v| v / scale).collect();
            let step = env.step(&normalized)?;
            cost -= step.reward;
            if step.truncated || step.terminated {
                return Ok(cost);
            }
        }
    }
}

impl Environment for Lqr {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let d = self.spec.obs_dim;
        self.x = DMatrix::from_fn(d, 1, |_, _| rng.random_range(-self.init_bound..=self.init_bound));
        self.noise = ChaCha8Rng::seed_from_u64(rng.next_u64());
        self.steps = 0;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let u = DMatrix::from_vec(self.spec.act_dim, 1, self.spec.rescale_action(action)?);
        let cost = (self.x.transpose() * &self.q * &self.x)[(0, 0)] + (u.transpose() * &self.r * &u)[(0, 0)];
        let mut next = &self.a * &self.x + &self.b * &u;
        if self.noise_std > 0.0 {
            for v in next.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut self.noise);
                *v += self.noise_std * w;
            }
        }
        self.x = next;
        self.steps += 1;
        Ok(StepResult {
            obs: self.state(),
            reward: -cost,
            terminated: false,
            truncated: self.steps >= self.spec.max_episode_steps,
        })
    }
}

/// One-step bandit with reward `N(offset - curvature·‖a‖², sigma_r²)` on a
/// native action box `[-1, 1]`. The observation is a constant `[1.0]`.
#[derive(Clone, Debug)]
pub struct GaussianBandit {
    spec: EnvSpec,
    pub offset: f64,
    pub curvature: f64,
    pub sigma_r: f64,
    noise: ChaCha8Rng,
}

impl GaussianBandit {
    pub fn new(act_dim: usize, offset: f64, curvature: f64, sigma_r: f64) -> Result<Self> {
        if !(sigma_r >= 0.0) || !offset.is_finite() || !curvature.is_finite() {
            return Err(Error::Config("bandit needs finite mean parameters and sigma_r >= 0".into()));
        }
        let spec = EnvSpec {
            obs_dim: 1,
            act_dim,
            action_low: vec![-1.0; act_dim],
            action_high: vec![1.0; act_dim],
            max_episode_steps: 1,
        };
        spec.validate()?;
        Ok(GaussianBandit {
            spec,
            offset,
            curvature,
            sigma_r,
            noise: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn mean_reward(&self, action: &[f64]) -> f64 {
        self.offset - self.curvature * action.iter().map(|a| a.clamp(-1.0, 1.0).powi(2)).sum::<f64>()
    }

    pub const OBS: [f64; 1] = [1.0];
}

impl Environment for GaussianBandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.noise = ChaCha8Rng::seed_from_u64(rng.next_u64());
        Self::OBS.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = self.spec.rescale_action(action)?;
        let z: f64 = StandardNormal.sample(&mut self.noise);
        Ok(StepResult {
            obs: Self::OBS.to_vec(),
            reward: self.mean_reward(&a) + self.sigma_r * z,
            terminated: true,
            truncated: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    pub gain: DMatrix<f64>,
    pub cost: DMatrix<f64>,
    pub iterations: usize,
}

/// One Riccati recursion `P ← Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA`.
pub fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (_, k) = riccati_gain(a, b, r, p)?;
    let at_p = a.transpose() * p;
    Ok(q + &at_p * a - at_p * b * k)
}

fn riccati_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Domain("singular R + BᵀPB".into()))?;
    let k = &s_inv * &bt_p * a;
    Ok((s, k))
}

/// Infinite-horizon discrete LQR by fixed-point iteration from `P = Q`,
/// stopping when successive iterates differ by less than 1e-10.
pub fn lqr_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    const TOL: f64 = 1e-10;
    const MAX_ITERS: usize = 1_000_000;
    let d = a.nrows();
    if a.ncols() != d || b.nrows() != d || q.shape() != (d, d) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Config("inconsistent LQR matrix shapes".into()));
    }
    let mut p = q.clone();
    for iteration in 1..=MAX_ITERS {
        let next = riccati_step(a, b, q, r, &p)?;
        if !next.iter().all(|v| v.is_finite() && v.abs() < 1e12) {
            return Err(Error::Divergent { iterations: iteration });
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta < TOL {
            let (_, gain) = riccati_gain(a, b, r, &p)?;
            return Ok(LqrSolution { gain, cost: p, iterations: iteration });
        }
    }
    Err(Error::Divergent { iterations: MAX_ITERS })
}

/// `μ + σ_r Φ⁻¹(level)` for each level.
pub fn gaussian_bandit_quantiles(mu: f64, sigma_r: f64, levels: &[f64]) -> Result<Vec<f64>> {
    if !(sigma_r >= 0.0) {
        return Err(Error::Domain("sigma_r must be non-negative".into()));
    }
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::Domain("quantile levels must lie in (0, 1)".into()));
    }
    if sigma_r == 0.0 {
        return Ok(vec![mu; levels.len()]);
    }
    let normal = Normal::new(mu, sigma_r).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(levels.iter().map(|&l| normal.inverse_cdf(l)).collect())
}

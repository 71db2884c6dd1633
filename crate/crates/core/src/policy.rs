//! Tanh-squashed diagonal Gaussian policies.
//!
//! An actor network emits `2|A|` numbers per state: the pre-squash mean
//! followed by the raw log standard deviation, which is clamped to
//! `[LOG_STD_MIN, LOG_STD_MAX]`. Actions are `tanh(mean + std * noise)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Real, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Guard inside `ln(1 - tanh(u)^2 + SQUASH_EPS)`.
pub const SQUASH_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn clamp_log_std<F: Real>(v: F) -> F {
    v.max(F::of(LOG_STD_MIN)).min(F::of(LOG_STD_MAX))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicyOutput<F> {
    pub mean: Vec<F>,
    pub log_std: Vec<F>,
}

impl<F: Real> GaussianPolicyOutput<F> {
    /// Builds a policy head, clamping `log_std`.
    pub fn new(mean: Vec<F>, log_std: Vec<F>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::shape("policy log_std", mean.len(), log_std.len()));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite policy parameters".into()));
        }
        let log_std = log_std.into_iter().map(clamp_log_std).collect();
        Ok(GaussianPolicyOutput { mean, log_std })
    }

    /// Splits one actor output row `[mean | raw_log_std]`.
    pub fn from_actor_output(row: &[F]) -> Result<Self> {
        if row.len() % 2 != 0 || row.is_empty() {
            return Err(Error::Domain(format!("actor output width {} is not 2|A|", row.len())));
        }
        let (mean, log_std) = row.split_at(row.len() / 2);
        Self::new(mean.to_vec(), log_std.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SquashedAction<F> {
    pub action: Vec<F>,
    pub pre_squash: Vec<F>,
    pub log_prob: F,
}

/// Squashes `mean + std_multiplier * std * noise`. The log-density is that of
/// the scaled Gaussian pushed through `tanh`.
pub fn squash_noise<F: Real>(p: &GaussianPolicyOutput<F>, noise: &[F], std_multiplier: F) -> SquashedAction<F> {
    assert_eq!(noise.len(), p.dim(), "noise width");
    let mut action = Vec::with_capacity(p.dim());
    let mut pre_squash = Vec::with_capacity(p.dim());
    let mut log_prob = F::zero();
    for ((&mu, &ls), &eps) in p.mean.iter().zip(&p.log_std).zip(noise) {
        let std = std_multiplier * ls.exp();
        let u = mu + std * eps;
        let a = u.tanh();
        log_prob = log_prob - F::of(0.5) * eps * eps - std.ln() - F::of(HALF_LN_2PI)
            - (F::one() - a * a + F::of(SQUASH_EPS)).ln();
        action.push(a);
        pre_squash.push(u);
    }
    SquashedAction {
        action,
        pre_squash,
        log_prob,
    }
}

pub fn sample_action<F: Real, R: Rng + ?Sized>(
    p: &GaussianPolicyOutput<F>,
    rng: &mut R,
    std_multiplier: F,
) -> Result<SquashedAction<F>> {
    if !(std_multiplier > F::zero()) {
        return Err(Error::Domain("std_multiplier must be positive".into()));
    }
    let noise: Vec<F> = (0..p.dim()).map(|_| F::of(rng.sample(StandardNormal))).collect();
    Ok(squash_noise(p, &noise, std_multiplier))
}

/// Log-density of a squashed action under `p`.
pub fn log_prob<F: Real>(p: &GaussianPolicyOutput<F>, action: &[F]) -> Result<F> {
    if action.len() != p.dim() {
        return Err(Error::shape("action", p.dim(), action.len()));
    }
    let mut total = F::zero();
    for ((&a, &mu), &ls) in action.iter().zip(&p.mean).zip(&p.log_std) {
        if !(a.abs() < F::one()) {
            return Err(Error::Domain(format!("action component {a} outside (-1, 1)")));
        }
        let u = a.atanh();
        let z = (u - mu) / ls.exp();
        total = total - F::of(0.5) * z * z - ls - F::of(HALF_LN_2PI) - (F::one() - a * a + F::of(SQUASH_EPS)).ln();
    }
    Ok(total)
}

pub fn deterministic_action<F: Real>(p: &GaussianPolicyOutput<F>) -> Vec<F> {
    p.mean.iter().map(|m| m.tanh()).collect()
}

/// `KL(p || q)` in nats, computed on the pre-squash Gaussians.
pub fn kl_divergence<F: Real>(p: &GaussianPolicyOutput<F>, q: &GaussianPolicyOutput<F>) -> Result<F> {
    if p.dim() != q.dim() {
        return Err(Error::shape("kl_divergence", p.dim(), q.dim()));
    }
    Ok(p.mean
        .iter()
        .zip(&p.log_std)
        .zip(q.mean.iter().zip(&q.log_std))
        .map(|((&mp, &lp), (&mq, &lq))| gaussian_kl(mp, lp, mq, lq))
        .sum())
}

fn gaussian_kl<F: Real>(mean_p: F, log_std_p: F, mean_q: F, log_std_q: F) -> F {
    let var_p = (log_std_p + log_std_p).exp();
    let var_q = (log_std_q + log_std_q).exp();
    let d = mean_p - mean_q;
    log_std_q - log_std_p + (var_p + d * d) / (var_q + var_q) - F::of(0.5)
}

/// Policy heads for a batch of states, one row per state.
#[derive(Clone, Debug)]
pub struct PolicyBatch<F> {
    pub mean: Array2<F>,
    pub log_std: Array2<F>,
    /// Whether the raw log-std was inside the clamp (gradient passes).
    log_std_free: Array2<bool>,
}

/// Reparameterized samples for a [`PolicyBatch`].
#[derive(Clone, Debug)]
pub struct SampledBatch<F> {
    pub noise: Array2<F>,
    pub action: Array2<F>,
    pub log_prob: Array1<F>,
    std_multiplier: F,
}

impl<F: Real> PolicyBatch<F> {
    pub fn from_actor_output(output: ArrayView2<F>) -> Self {
        let dim = output.ncols() / 2;
        assert_eq!(output.ncols(), 2 * dim, "actor output width must be even");
        let raw = output.slice(s![.., dim..]);
        PolicyBatch {
            mean: output.slice(s![.., ..dim]).to_owned(),
            log_std: raw.mapv(clamp_log_std),
            log_std_free: raw.mapv(|v| v >= F::of(LOG_STD_MIN) && v <= F::of(LOG_STD_MAX)),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn row(&self, i: usize) -> GaussianPolicyOutput<F> {
        GaussianPolicyOutput {
            mean: self.mean.row(i).to_vec(),
            log_std: self.log_std.row(i).to_vec(),
        }
    }

    pub fn deterministic(&self) -> Array2<F> {
        self.mean.mapv(|m| m.tanh())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, std_multiplier: F) -> SampledBatch<F> {
        let noise = Array2::from_shape_simple_fn(self.mean.dim(), || F::of(rng.sample(StandardNormal)));
        self.sample_with_noise(noise, std_multiplier)
    }

    pub fn sample_with_noise(&self, noise: Array2<F>, std_multiplier: F) -> SampledBatch<F> {
        assert_eq!(noise.dim(), self.mean.dim(), "noise shape");
        let mut action = Array2::zeros(self.mean.dim());
        let mut log_prob = Array1::zeros(self.len());
        for i in 0..self.len() {
            let mut lp = F::zero();
            for j in 0..self.action_dim() {
                let std = std_multiplier * self.log_std[[i, j]].exp();
                let eps = noise[[i, j]];
                let a = (self.mean[[i, j]] + std * eps).tanh();
                lp = lp - F::of(0.5) * eps * eps - std.ln() - F::of(HALF_LN_2PI)
                    - (F::one() - a * a + F::of(SQUASH_EPS)).ln();
                action[[i, j]] = a;
            }
            log_prob[i] = lp;
        }
        SampledBatch {
            noise,
            action,
            log_prob,
            std_multiplier,
        }
    }

    /// Gradient w.r.t. the raw actor output (`B x 2|A|`) of an objective
    /// whose partials w.r.t. the sampled actions and log-probabilities are
    /// given, holding the noise fixed.
    pub fn reparam_grad(
        &self,
        sample: &SampledBatch<F>,
        grad_action: ArrayView2<F>,
        grad_log_prob: ArrayView1<F>,
    ) -> Array2<F> {
        let dim = self.action_dim();
        let mut grad = Array2::zeros((self.len(), 2 * dim));
        for i in 0..self.len() {
            let gl = grad_log_prob[i];
            for j in 0..dim {
                let a = sample.action[[i, j]];
                let one_minus = F::one() - a * a;
                let correction = (a + a) * one_minus / (one_minus + F::of(SQUASH_EPS));
                let grad_u = grad_action[[i, j]] * one_minus + gl * correction;
                let std = sample.std_multiplier * self.log_std[[i, j]].exp();
                grad[[i, j]] = grad_u;
                if self.log_std_free[[i, j]] {
                    grad[[i, dim + j]] = grad_u * std * sample.noise[[i, j]] - gl;
                }
            }
        }
        grad
    }

    /// Per-state `KL(self || other)`.
    pub fn kl_to(&self, other: &PolicyBatch<F>) -> Array1<F> {
        let mut out = Array1::zeros(self.len());
        for i in 0..self.len() {
            out[i] = (0..self.action_dim())
                .map(|j| {
                    gaussian_kl(
                        self.mean[[i, j]],
                        self.log_std[[i, j]],
                        other.mean[[i, j]],
                        other.log_std[[i, j]],
                    )
                })
                .sum();
        }
        out
    }

    /// Gradient of `sum_i weight[i] * KL(self_i || other_i)` w.r.t. the raw
    /// actor output that produced `other`.
    pub fn kl_grad_wrt_other(&self, other: &PolicyBatch<F>, weight: ArrayView1<F>) -> Array2<F> {
        let dim = self.action_dim();
        let mut grad = Array2::zeros((self.len(), 2 * dim));
        for i in 0..self.len() {
            for j in 0..dim {
                let var_p = (self.log_std[[i, j]] + self.log_std[[i, j]]).exp();
                let var_q = (other.log_std[[i, j]] + other.log_std[[i, j]]).exp();
                let d = other.mean[[i, j]] - self.mean[[i, j]];
                grad[[i, j]] = weight[i] * d / var_q;
                if other.log_std_free[[i, j]] {
                    grad[[i, dim + j]] = weight[i] * (F::one() - (var_p + d * d) / var_q);
                }
            }
        }
        grad
    }
}

/// Mean of `-log_prob`, the entropy estimate of a batch of samples.
pub fn entropy_estimate<F: Real>(sample: &SampledBatch<F>) -> F {
    let n = F::of(sample.log_prob.len() as f64);
    -sample.log_prob.sum() / n
}

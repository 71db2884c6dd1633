//! The BRO agent: a pessimistic actor trained against the mean of two
//! quantile critics, an optimistic actor that explores along the critics'
//! disagreement, and three dual variables steering entropy and divergence.

use log::warn;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributional::{quantile_huber_loss_sorted, quantile_levels, SortedTargets, DEFAULT_KAPPA};
use crate::networks::{Architecture, ModelSize, NetConfig, Network};
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{entropy_estimate, PolicyBatch};
use crate::replay::{Batch, ReplayBuffer};
use crate::{Error, Real, Result};

pub const DEFAULT_RESET_STEPS: [u64; 6] = [15_000, 50_000, 250_000, 500_000, 750_000, 1_000_000];

/// Bounds on `log α`; keeps α representable and strictly positive.
pub const LOG_ALPHA_RANGE: (f64, f64) = (-50.0, 50.0);

/// Lower bound keeping the KL weight strictly positive.
pub const KL_WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BroHyperparams {
    pub batch_size: usize,
    pub replay_ratio: usize,
    pub discount: f64,
    pub polyak: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Step size for the temperature and for the optimism and KL weights.
    pub lr_temperature: f64,
    pub num_quantiles: usize,
    pub huber_kappa: f64,
    pub kl_target: f64,
    pub initial_optimism: f64,
    pub initial_kl_weight: f64,
    pub std_multiplier: f64,
    /// Defaults to `-|A| / 2` when unset.
    pub target_entropy: Option<f64>,
    pub exploratory_steps: u64,
    pub initial_temperature: f64,
    pub weight_decay: f64,
    pub pessimism_floor: f64,
    pub reset_steps: Vec<u64>,
    pub critic_size: ModelSize,
    pub actor_size: ModelSize,
    pub architecture: Architecture,
    pub use_cdq: bool,
    pub use_dual_actor: bool,
    pub use_quantiles: bool,
    pub use_weight_decay: bool,
    pub use_target_network: bool,
    pub use_resets: bool,
}

impl Default for BroHyperparams {
    fn default() -> Self {
        Self::bro()
    }
}

impl BroHyperparams {
    pub fn bro() -> Self {
        BroHyperparams {
            batch_size: 128,
            replay_ratio: 10,
            discount: 0.99,
            polyak: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_temperature: 3e-4,
            num_quantiles: 100,
            huber_kappa: DEFAULT_KAPPA,
            kl_target: 0.05,
            initial_optimism: 1.0,
            initial_kl_weight: 1.0,
            std_multiplier: 0.75,
            target_entropy: None,
            exploratory_steps: 2500,
            initial_temperature: 1.0,
            weight_decay: 1e-2,
            pessimism_floor: 0.0,
            reset_steps: DEFAULT_RESET_STEPS.to_vec(),
            critic_size: ModelSize::new(2, 512),
            actor_size: ModelSize::new(1, 256),
            architecture: Architecture::Bronet,
            use_cdq: false,
            use_dual_actor: true,
            use_quantiles: true,
            use_weight_decay: true,
            use_target_network: true,
            use_resets: true,
        }
    }

    pub fn bro_fast() -> Self {
        BroHyperparams {
            replay_ratio: 2,
            ..Self::bro()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_temperature", self.lr_temperature),
            ("huber_kappa", self.huber_kappa),
            ("kl_target", self.kl_target),
            ("initial_kl_weight", self.initial_kl_weight),
            ("std_multiplier", self.std_multiplier),
            ("initial_temperature", self.initial_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config(format!("polyak must lie in (0, 1], got {}", self.polyak)));
        }
        if self.batch_size == 0 || self.replay_ratio == 0 || self.num_quantiles == 0 {
            return Err(Error::Config("batch_size, replay_ratio and num_quantiles must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.pessimism_floor.is_finite() {
            return Err(Error::Config("weight_decay must be non-negative and pessimism_floor finite".into()));
        }
        if !(self.initial_optimism >= self.pessimism_floor.max(0.0)) {
            return Err(Error::Config("initial_optimism must be at least max(0, pessimism_floor)".into()));
        }
        if self.target_entropy.is_some_and(|h| !h.is_finite()) {
            return Err(Error::Config("target_entropy must be finite".into()));
        }
        if self.reset_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("reset_steps must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn quantiles(&self) -> usize {
        if self.use_quantiles {
            self.num_quantiles
        } else {
            1
        }
    }

    pub fn effective_weight_decay(&self) -> f64 {
        if self.use_weight_decay {
            self.weight_decay
        } else {
            0.0
        }
    }

    pub fn target_entropy_for(&self, action_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(action_dim as f64) / 2.0)
    }
}

/// Per-update diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub td_error: f64,
    pub mean_q: f64,
    pub critic_loss: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub alpha: f64,
    pub beta_o: f64,
    pub kl_weight: f64,
    pub measured_kl: f64,
    pub entropy_estimate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Explore,
    Evaluate,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStep {
    pub rows: Vec<DiagnosticRow>,
    /// Set when the step was skipped.
    pub warning: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
    pub td_error: f64,
    pub mean_q: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub grad_norm: f64,
    /// `-mean log π` of the samples drawn for the update.
    pub entropy: f64,
    /// Mean `KL(π^p || π^o)`; zero for the pessimistic actor.
    pub measured_kl: f64,
}

/// Per-sample target quantiles `r + γ(1 - done)(Q̄_k(s', a') - α log π(a'|s'))`
/// where `Q̄` is the per-quantile mean of the two critics, or their minimum
/// under clipped double Q.
#[allow(clippy::too_many_arguments)]
pub fn critic_target<F: Real>(
    rewards: ArrayView1<F>,
    not_done: ArrayView1<F>,
    q1: ArrayView2<F>,
    q2: ArrayView2<F>,
    next_log_prob: ArrayView1<F>,
    alpha: F,
    discount: F,
    use_cdq: bool,
) -> Array2<F> {
    let half = F::of(0.5);
    let mut out = Array2::zeros(q1.dim());
    for ((mut row, (a, b)), i) in out.outer_iter_mut().zip(q1.outer_iter().zip(q2.outer_iter())).zip(0..) {
        let scale = discount * not_done[i];
        let entropy = alpha * next_log_prob[i];
        for ((y, &x1), &x2) in row.iter_mut().zip(a).zip(b) {
            let agg = if use_cdq { x1.min(x2) } else { half * (x1 + x2) };
            *y = rewards[i] + scale * (agg - entropy);
        }
    }
    out
}

/// `log α ← log α - lr (H - H*)`: α grows while entropy is below target.
pub fn temperature_step(log_alpha: f64, entropy: f64, target_entropy: f64, lr: f64) -> f64 {
    (log_alpha - lr * (entropy - target_entropy)).clamp(LOG_ALPHA_RANGE.0, LOG_ALPHA_RANGE.1)
}

/// `β° ← max(β° - lr (KL/|A| - KL*), max(0, β^p))`.
pub fn optimism_step(beta_o: f64, measured_kl: f64, action_dim: usize, kl_target: f64, floor: f64, lr: f64) -> f64 {
    (beta_o - lr * (measured_kl / action_dim as f64 - kl_target)).max(floor.max(0.0))
}

/// `τ ← max(τ + lr (KL/|A| - KL*), KL_WEIGHT_FLOOR)`.
pub fn kl_weight_step(kl_weight: f64, measured_kl: f64, action_dim: usize, kl_target: f64, lr: f64) -> f64 {
    (kl_weight + lr * (measured_kl / action_dim as f64 - kl_target)).max(KL_WEIGHT_FLOOR)
}

/// `target ← (1 - ρ) target + ρ online`.
pub fn polyak_update<F: Real>(online: &[F], target: &mut [F], rho: f64) -> Result<()> {
    if online.len() != target.len() {
        return Err(Error::shape("polyak target", online.len(), target.len()));
    }
    let (keep, take) = (F::of(1.0 - rho), F::of(rho));
    for (t, &o) in target.iter_mut().zip(online) {
        *t = keep * *t + take * o;
    }
    Ok(())
}

/// L2 norm over several gradient buffers taken together.
fn grad_norm<F: Real>(parts: &[&[F]]) -> f64 {
    parts.iter().flat_map(|p| p.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

fn standard_noise<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::of(rng.sample(StandardNormal)))
}

fn concat_inputs<F: Real>(obs: ArrayView2<F>, actions: ArrayView2<F>) -> Array2<F> {
    concatenate(Axis(1), &[obs.reborrow(), actions.reborrow()]).expect("matching batch sizes")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AgentState<F: Real> {
    pub hyper: BroHyperparams,
    obs_dim: usize,
    act_dim: usize,
    actor_p: Network<F>,
    actor_o: Network<F>,
    critics: [Network<F>; 2],
    targets: [Network<F>; 2],
    opt_actor_p: AdamW<F>,
    opt_actor_o: AdamW<F>,
    opt_critics: [AdamW<F>; 2],
    log_alpha: f64,
    beta_o: f64,
    kl_weight: f64,
    env_step: u64,
    gradient_step: u64,
    diverged: bool,
}

struct Fresh<F: Real> {
    actor_p: Network<F>,
    actor_o: Network<F>,
    critics: [Network<F>; 2],
}

impl<F: Real> AgentState<F> {
    pub fn new<R: Rng + ?Sized>(hyper: BroHyperparams, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Config("observation and action widths must be positive".into()));
        }
        let fresh = Self::fresh_networks(&hyper, obs_dim, act_dim, rng)?;
        let critic_opt = AdamWConfig::new(hyper.lr_critic, hyper.effective_weight_decay());
        let actor_opt = AdamWConfig::new(hyper.lr_actor, hyper.effective_weight_decay());
        Ok(AgentState {
            opt_actor_p: AdamW::for_network(actor_opt, &fresh.actor_p),
            opt_actor_o: AdamW::for_network(actor_opt, &fresh.actor_o),
            opt_critics: [
                AdamW::for_network(critic_opt, &fresh.critics[0]),
                AdamW::for_network(critic_opt, &fresh.critics[1]),
            ],
            targets: fresh.critics.clone(),
            actor_p: fresh.actor_p,
            actor_o: fresh.actor_o,
            critics: fresh.critics,
            log_alpha: hyper.initial_temperature.ln(),
            beta_o: hyper.initial_optimism,
            kl_weight: hyper.initial_kl_weight,
            hyper,
            obs_dim,
            act_dim,
            env_step: 0,
            gradient_step: 0,
            diverged: false,
        })
    }

    /// Draws actor_p, actor_o, critic 1, critic 2 in that order.
    fn fresh_networks<R: Rng + ?Sized>(hyper: &BroHyperparams, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Fresh<F>> {
        let actor = NetConfig::from_size(obs_dim, hyper.actor_size, 2 * act_dim, hyper.architecture);
        let critic = NetConfig::from_size(obs_dim + act_dim, hyper.critic_size, hyper.quantiles(), hyper.architecture);
        Ok(Fresh {
            actor_p: Network::init(actor, rng)?,
            actor_o: Network::init(actor, rng)?,
            critics: [Network::init(critic, rng)?, Network::init(critic, rng)?],
        })
    }

    /// Re-checks invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let actor = NetConfig::from_size(self.obs_dim, self.hyper.actor_size, 2 * self.act_dim, self.hyper.architecture);
        let critic = NetConfig::from_size(
            self.obs_dim + self.act_dim,
            self.hyper.critic_size,
            self.hyper.quantiles(),
            self.hyper.architecture,
        );
        for (net, config) in [
            (&self.actor_p, actor),
            (&self.actor_o, actor),
            (&self.critics[0], critic),
            (&self.critics[1], critic),
            (&self.targets[0], critic),
            (&self.targets[1], critic),
        ] {
            if *net.config() != config {
                return Err(Error::Corrupt("network configuration does not match hyperparameters".into()));
            }
            net.validate()?;
        }
        let optimizers = [
            (&self.opt_actor_p, &self.actor_p),
            (&self.opt_actor_o, &self.actor_o),
            (&self.opt_critics[0], &self.critics[0]),
            (&self.opt_critics[1], &self.critics[1]),
        ];
        if optimizers.iter().any(|(o, n)| o.len() != n.num_params()) {
            return Err(Error::Corrupt("optimizer state does not match its network".into()));
        }
        if !self.log_alpha.is_finite()
            || !(self.kl_weight > 0.0 && self.kl_weight.is_finite())
            || !(self.beta_o >= self.hyper.pessimism_floor.max(0.0) && self.beta_o.is_finite())
        {
            return Err(Error::Corrupt("dual variables out of range".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta_o(&self) -> f64 {
        self.beta_o
    }

    pub fn kl_weight(&self) -> f64 {
        self.kl_weight
    }

    pub fn set_duals(&mut self, alpha: f64, beta_o: f64, kl_weight: f64) -> Result<()> {
        if !(alpha > 0.0) || !(kl_weight > 0.0) || !(beta_o >= self.hyper.pessimism_floor.max(0.0)) {
            return Err(Error::Domain("dual variables out of range".into()));
        }
        self.log_alpha = alpha.ln();
        self.beta_o = beta_o;
        self.kl_weight = kl_weight;
        Ok(())
    }

    pub fn target_entropy(&self) -> f64 {
        self.hyper.target_entropy_for(self.act_dim)
    }

    pub fn env_step(&self) -> u64 {
        self.env_step
    }

    pub fn gradient_step(&self) -> u64 {
        self.gradient_step
    }

    pub fn advance_env_step(&mut self) {
        self.env_step += 1;
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn pessimistic_actor(&self) -> &Network<F> {
        &self.actor_p
    }

    pub fn optimistic_actor(&self) -> &Network<F> {
        &self.actor_o
    }

    pub fn critics(&self) -> &[Network<F>; 2] {
        &self.critics
    }

    pub fn target_critics(&self) -> &[Network<F>; 2] {
        &self.targets
    }

    pub fn critics_mut(&mut self) -> &mut [Network<F>; 2] {
        &mut self.critics
    }

    pub fn pessimistic_actor_mut(&mut self) -> &mut Network<F> {
        &mut self.actor_p
    }

    pub fn optimistic_actor_mut(&mut self) -> &mut Network<F> {
        &mut self.actor_o
    }

    pub fn quantile_levels(&self) -> Vec<F> {
        quantile_levels(self.hyper.quantiles())
            .expect("validated quantile count")
            .into_iter()
            .map(F::of)
            .collect()
    }

    pub fn pessimistic_policy(&self, obs: ArrayView2<F>) -> Result<PolicyBatch<F>> {
        Ok(PolicyBatch::from_actor_output(self.actor_p.forward(obs)?.view()))
    }

    pub fn optimistic_policy(&self, obs: ArrayView2<F>) -> Result<PolicyBatch<F>> {
        Ok(PolicyBatch::from_actor_output(self.actor_o.forward(obs)?.view()))
    }

    /// Quantile estimates `B x K` of the two online critics.
    pub fn q_values(&self, obs: ArrayView2<F>, actions: ArrayView2<F>) -> Result<[Array2<F>; 2]> {
        let input = concat_inputs(obs, actions);
        Ok([self.critics[0].forward(input.view())?, self.critics[1].forward(input.view())?])
    }

    fn check_obs(&self, obs: &[F]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape("observation", self.obs_dim, obs.len()));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite observation".into()));
        }
        Ok(())
    }

    pub fn select_action<R: Rng + ?Sized>(&self, obs: &[F], mode: ActionMode, rng: &mut R) -> Result<Vec<F>> {
        self.check_obs(obs)?;
        let row = ArrayView2::from_shape((1, self.obs_dim), obs).expect("checked width");
        match mode {
            ActionMode::Evaluate => Ok(self.pessimistic_policy(row)?.deterministic().into_raw_vec_and_offset().0),
            ActionMode::Explore if self.env_step < self.hyper.exploratory_steps => {
                Ok((0..self.act_dim).map(|_| F::of(rng.random_range(-1.0..=1.0))).collect())
            }
            ActionMode::Explore => {
                let (policy, mult) = if self.hyper.use_dual_actor {
                    (self.optimistic_policy(row)?, self.hyper.std_multiplier)
                } else {
                    (self.pessimistic_policy(row)?, 1.0)
                };
                Ok(policy.sample(rng, F::of(mult)).action.into_raw_vec_and_offset().0)
            }
        }
    }

    /// Target quantiles for a replay batch, using `a' ~ π^p(s')`.
    pub fn compute_critic_target<R: Rng + ?Sized>(&self, batch: &Batch<F>, rng: &mut R) -> Result<Array2<F>> {
        let policy = self.pessimistic_policy(batch.next_obs.view())?;
        let next = policy.sample(rng, F::one());
        let input = concat_inputs(batch.next_obs.view(), next.action.view());
        let nets = if self.hyper.use_target_network {
            &self.targets
        } else {
            &self.critics
        };
        let q1 = nets[0].forward(input.view())?;
        let q2 = nets[1].forward(input.view())?;
        Ok(critic_target(
            batch.rewards.view(),
            batch.not_done.view(),
            q1.view(),
            q2.view(),
            next.log_prob.view(),
            F::of(self.alpha()),
            F::of(self.hyper.discount),
            self.hyper.use_cdq,
        ))
    }

    fn flag_divergence(&mut self, what: &str) -> Error {
        self.diverged = true;
        Error::Diverged(format!("{what} at gradient step {}", self.gradient_step))
    }

    /// Quantile Huber loss of both critics (averaged) against shared target
    /// quantiles, with per-critic parameter gradients.
    pub fn critic_objective(&self, batch: &Batch<F>, targets: ArrayView2<F>) -> Result<(CriticStats, [Vec<F>; 2])> {
        let input = concat_inputs(batch.obs.view(), batch.actions.view());
        let levels = self.quantile_levels();
        let kappa = F::of(self.hyper.huber_kappa);
        let mut grads = [vec![F::zero(); self.critics[0].num_params()], vec![F::zero(); self.critics[1].num_params()]];
        let mut loss = 0.0;
        let mut pred_mean = Array1::<f64>::zeros(batch.len());
        let sorted = SortedTargets::new(targets);
        for c in 0..2 {
            let (pred, cache) = self.critics[c].forward_cached(input.view())?;
            let (l, mut grad_pred) = quantile_huber_loss_sorted(pred.view(), &sorted, &levels, kappa);
            grad_pred *= F::of(0.5);
            loss += 0.5 * l.f64();
            for (m, row) in pred_mean.iter_mut().zip(pred.outer_iter()) {
                *m += 0.5 * row.iter().map(|v| v.f64()).sum::<f64>() / row.len() as f64;
            }
            self.critics[c].backward(&cache, grad_pred.view(), Some(&mut grads[c]), false);
        }
        let target_mean = targets.mean_axis(Axis(1)).expect("non-empty targets");
        let td_error = pred_mean
            .iter()
            .zip(&target_mean)
            .map(|(p, t)| (p - t.f64()).abs())
            .sum::<f64>()
            / batch.len() as f64;
        let stats = CriticStats {
            loss,
            td_error,
            mean_q: pred_mean.mean().unwrap_or(0.0),
            grad_norm: grad_norm(&[&grads[0], &grads[1]]),
        };
        Ok((stats, grads))
    }

    /// One AdamW step on both critics. A non-finite loss flags divergence
    /// and leaves the parameters untouched.
    pub fn update_critics(&mut self, batch: &Batch<F>, targets: ArrayView2<F>) -> Result<CriticStats> {
        let (stats, grads) = self.critic_objective(batch, targets)?;
        if !stats.loss.is_finite() || !stats.grad_norm.is_finite() {
            return Err(self.flag_divergence("non-finite critic loss"));
        }
        for c in 0..2 {
            self.opt_critics[c].step(self.critics[c].params_mut(), &grads[c]);
        }
        Ok(stats)
    }

    /// Gradient of `sum_{c,b,k} w_c[b,k] Q_c(s_b, a_b)_k` w.r.t. the actions,
    /// with critic parameters held fixed. Also returns the critic outputs.
    fn critic_action_grad(
        &self,
        obs: ArrayView2<F>,
        actions: ArrayView2<F>,
        weights: impl Fn(&Array2<F>, &Array2<F>) -> [Array2<F>; 2],
    ) -> Result<(Array2<F>, [Array2<F>; 2])> {
        let input = concat_inputs(obs, actions);
        let (q1, c1) = self.critics[0].forward_cached(input.view())?;
        let (q2, c2) = self.critics[1].forward_cached(input.view())?;
        let [w1, w2] = weights(&q1, &q2);
        let g1 = self.critics[0].backward(&c1, w1.view(), None, true).expect("input gradient");
        let g2 = self.critics[1].backward(&c2, w2.view(), None, true).expect("input gradient");
        let grad = (&g1 + &g2).slice(s![.., self.obs_dim..]).to_owned();
        Ok((grad, [q1, q2]))
    }

    /// Loss `mean(α log π^p(a|s) - Q̄(s, a))` and its gradient w.r.t. φ for
    /// `a` reparameterized from π^p with the given standard-normal noise.
    pub fn pessimistic_actor_objective(&self, obs: ArrayView2<F>, noise: Array2<F>) -> Result<(ActorStats, Vec<F>)> {
        let (out, cache) = self.actor_p.forward_cached(obs)?;
        let policy = PolicyBatch::from_actor_output(out.view());
        let sample = policy.sample_with_noise(noise, F::one());
        let b = policy.len();
        let k = self.hyper.quantiles();
        let scale = F::of(-1.0 / (2 * k * b) as f64);
        let (grad_action, [q1, q2]) = self.critic_action_grad(obs, sample.action.view(), |q1, q2| {
            [Array2::from_elem(q1.dim(), scale), Array2::from_elem(q2.dim(), scale)]
        })?;
        let alpha = self.alpha();
        let q_mean = (q1.iter().chain(&q2).map(|v| v.f64()).sum::<f64>()) / (2 * k * b) as f64;
        let entropy = entropy_estimate(&sample).f64();
        let loss = -alpha * entropy - q_mean;
        let grad_log_prob = Array1::from_elem(b, F::of(alpha / b as f64));
        let grad_out = policy.reparam_grad(&sample, grad_action.view(), grad_log_prob.view());
        let mut grads = vec![F::zero(); self.actor_p.num_params()];
        self.actor_p.backward(&cache, grad_out.view(), Some(&mut grads), false);
        let stats = ActorStats {
            loss,
            grad_norm: grad_norm(&[&grads]),
            entropy,
            measured_kl: 0.0,
        };
        Ok((stats, grads))
    }

    /// One AdamW step on π^p; critics are read, never written.
    pub fn update_pessimistic_actor<R: Rng + ?Sized>(&mut self, obs: ArrayView2<F>, rng: &mut R) -> Result<ActorStats> {
        let noise = standard_noise(obs.nrows(), self.act_dim, rng);
        let (stats, grads) = self.pessimistic_actor_objective(obs, noise)?;
        if !stats.loss.is_finite() || !stats.grad_norm.is_finite() {
            return Err(self.flag_divergence("non-finite pessimistic actor loss"));
        }
        self.opt_actor_p.step(self.actor_p.params_mut(), &grads);
        Ok(stats)
    }

    /// Loss `-mean(Q̄ + β° disagreement) + τ mean KL(π^p || π^o)` and its
    /// gradient w.r.t. η, for `a` reparameterized from π^o at the exploration
    /// std multiplier. No entropy bonus.
    pub fn optimistic_actor_objective(&self, obs: ArrayView2<F>, noise: Array2<F>) -> Result<(ActorStats, Vec<F>)> {
        let anchor = self.pessimistic_policy(obs)?;
        let (out, cache) = self.actor_o.forward_cached(obs)?;
        let policy = PolicyBatch::from_actor_output(out.view());
        let sample = policy.sample_with_noise(noise, F::of(self.hyper.std_multiplier));
        let b = policy.len();
        let k = self.hyper.quantiles();
        let beta = F::of(self.beta_o);
        let scale = F::of(-1.0 / (2 * k * b) as f64);
        let (grad_action, [q1, q2]) = self.critic_action_grad(obs, sample.action.view(), |q1, q2| {
            let mut w1 = Array2::zeros(q1.dim());
            let mut w2 = Array2::zeros(q2.dim());
            ndarray::Zip::from(&mut w1).and(&mut w2).and(q1).and(q2).for_each(|w1, w2, &a, &b| {
                let sign = if a > b {
                    F::one()
                } else if a < b {
                    -F::one()
                } else {
                    F::zero()
                };
                *w1 = scale * (F::one() + beta * sign);
                *w2 = scale * (F::one() - beta * sign);
            });
            [w1, w2]
        })?;
        let kl = anchor.kl_to(&policy);
        let measured_kl = kl.iter().map(|v| v.f64()).sum::<f64>() / b as f64;
        let upper = ndarray::Zip::from(&q1)
            .and(&q2)
            .fold(0.0, |acc, &a, &c| acc + (a + c + beta * (a - c).abs()).f64())
            / (2 * k * b) as f64;
        let loss = -upper + self.kl_weight * measured_kl;
        let zeros = Array1::zeros(b);
        let mut grad_out = policy.reparam_grad(&sample, grad_action.view(), zeros.view());
        let weight = Array1::from_elem(b, F::of(self.kl_weight / b as f64));
        grad_out += &anchor.kl_grad_wrt_other(&policy, weight.view());
        let mut grads = vec![F::zero(); self.actor_o.num_params()];
        self.actor_o.backward(&cache, grad_out.view(), Some(&mut grads), false);
        let stats = ActorStats {
            loss,
            grad_norm: grad_norm(&[&grads]),
            entropy: entropy_estimate(&sample).f64(),
            measured_kl,
        };
        Ok((stats, grads))
    }

    /// One AdamW step on π^o; π^p and the critics are read, never written.
    pub fn update_optimistic_actor<R: Rng + ?Sized>(&mut self, obs: ArrayView2<F>, rng: &mut R) -> Result<ActorStats> {
        let noise = standard_noise(obs.nrows(), self.act_dim, rng);
        let (stats, grads) = self.optimistic_actor_objective(obs, noise)?;
        if !stats.loss.is_finite() || !stats.grad_norm.is_finite() {
            return Err(self.flag_divergence("non-finite optimistic actor loss"));
        }
        self.opt_actor_o.step(self.actor_o.params_mut(), &grads);
        Ok(stats)
    }

    pub fn update_temperature(&mut self, entropy: f64) {
        self.log_alpha = temperature_step(self.log_alpha, entropy, self.target_entropy(), self.hyper.lr_temperature);
    }

    pub fn update_optimism(&mut self, measured_kl: f64) {
        let h = &self.hyper;
        self.beta_o = optimism_step(self.beta_o, measured_kl, self.act_dim, h.kl_target, h.pessimism_floor, h.lr_temperature);
    }

    pub fn update_kl_weight(&mut self, measured_kl: f64) {
        let h = &self.hyper;
        self.kl_weight = kl_weight_step(self.kl_weight, measured_kl, self.act_dim, h.kl_target, h.lr_temperature);
    }

    /// Polyak-averages the targets, or copies the online critics when the
    /// target network is disabled.
    pub fn update_targets(&mut self) {
        let rho = if self.hyper.use_target_network { self.hyper.polyak } else { 1.0 };
        for (online, target) in self.critics.iter().zip(self.targets.iter_mut()) {
            if rho == 1.0 {
                target.params_mut().copy_from_slice(online.params());
            } else {
                polyak_update(online.params(), target.params_mut(), rho).expect("same architecture");
            }
        }
    }

    /// Reinitializes every network and optimizer and restores the duals when
    /// the current env step is on the reset schedule. Returns whether it fired.
    pub fn maybe_reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        if !self.hyper.use_resets || self.hyper.reset_steps.binary_search(&self.env_step).is_err() {
            return Ok(false);
        }
        let fresh = Self::fresh_networks(&self.hyper, self.obs_dim, self.act_dim, rng)?;
        let critic_opt = self.opt_critics[0].config;
        let actor_opt = self.opt_actor_p.config;
        self.opt_actor_p = AdamW::for_network(actor_opt, &fresh.actor_p);
        self.opt_actor_o = AdamW::for_network(actor_opt, &fresh.actor_o);
        self.opt_critics = [
            AdamW::for_network(critic_opt, &fresh.critics[0]),
            AdamW::for_network(critic_opt, &fresh.critics[1]),
        ];
        self.targets = fresh.critics.clone();
        self.actor_p = fresh.actor_p;
        self.actor_o = fresh.actor_o;
        self.critics = fresh.critics;
        self.log_alpha = self.hyper.initial_temperature.ln();
        self.beta_o = self.hyper.initial_optimism;
        self.kl_weight = self.hyper.initial_kl_weight;
        Ok(true)
    }

    /// One full update on a given batch.
    pub fn train_iteration<R: Rng + ?Sized>(&mut self, batch: &Batch<F>, rng: &mut R) -> Result<DiagnosticRow> {
        if self.diverged {
            return Err(Error::Diverged("agent already diverged".into()));
        }
        let targets = self.compute_critic_target(batch, rng)?;
        let critic = self.update_critics(batch, targets.view())?;
        let pessimistic = self.update_pessimistic_actor(batch.obs.view(), rng)?;
        let measured_kl = if self.hyper.use_dual_actor {
            self.update_optimistic_actor(batch.obs.view(), rng)?.measured_kl
        } else {
            0.0
        };
        self.update_temperature(pessimistic.entropy);
        if self.hyper.use_dual_actor {
            self.update_optimism(measured_kl);
            self.update_kl_weight(measured_kl);
        }
        self.update_targets();
        self.gradient_step += 1;
        Ok(DiagnosticRow {
            td_error: critic.td_error,
            mean_q: critic.mean_q,
            critic_loss: critic.loss,
            critic_grad_norm: critic.grad_norm,
            actor_grad_norm: pessimistic.grad_norm,
            alpha: self.alpha(),
            beta_o: self.beta_o,
            kl_weight: self.kl_weight,
            measured_kl,
            entropy_estimate: pessimistic.entropy,
        })
    }

    /// `replay_ratio` updates on fresh uniform batches.
    pub fn train_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer<F>, rng: &mut R) -> Result<TrainStep> {
        if buffer.len() < self.hyper.batch_size {
            let message = format!(
                "replay holds {} transitions, fewer than the batch size {}; update skipped",
                buffer.len(),
                self.hyper.batch_size
            );
            warn!("{message}");
            return Ok(TrainStep {
                rows: Vec::new(),
                warning: Some(message),
            });
        }
        if buffer.obs_dim() != self.obs_dim || buffer.act_dim() != self.act_dim {
            return Err(Error::shape("replay widths", self.obs_dim + self.act_dim, buffer.obs_dim() + buffer.act_dim()));
        }
        let mut rows = Vec::with_capacity(self.hyper.replay_ratio);
        for _ in 0..self.hyper.replay_ratio {
            let batch = buffer.sample(self.hyper.batch_size, rng)?;
            rows.push(self.train_iteration(&batch, rng)?);
        }
        Ok(TrainStep { rows, warning: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributional::{ensemble_mean_q, huber, optimistic_q, EnsembleQuantiles};
    use crate::envsim::{Environment, GaussianBandit};
    use crate::replay::Transition;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const OBS: usize = 3;
    const ACT: usize = 2;

    fn tiny() -> BroHyperparams {
        BroHyperparams {
            batch_size: 16,
            replay_ratio: 2,
            num_quantiles: 5,
            exploratory_steps: 10,
            critic_size: ModelSize::new(1, 16),
            actor_size: ModelSize::new(1, 16),
            ..BroHyperparams::bro_fast()
        }
    }

    fn agent(hyper: BroHyperparams, seed: u64) -> AgentState<f64> {
        AgentState::new(hyper, OBS, ACT, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn buffer(n: usize, seed: u64) -> ReplayBuffer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ReplayBuffer::new(1000, OBS, ACT).unwrap();
        for i in 0..n {
            b.add(Transition {
                obs: (0..OBS).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: (0..ACT).map(|_| rng.random_range(-1.0..1.0)).collect(),
                reward: rng.random_range(-1.0..0.0),
                next_obs: (0..OBS).map(|_| rng.random_range(-1.0..1.0)).collect(),
                terminated: i % 7 == 0,
                truncated: false,
            })
            .unwrap();
        }
        b
    }

    #[test]
    fn critic_target_anchors() {
        let q: Array2<f64> = array![[2.0, 2.0, 2.0]];
        let y = critic_target(
            array![1.0].view(),
            array![1.0].view(),
            q.view(),
            q.view(),
            array![-1.0].view(),
            0.5,
            0.99,
            false,
        );
        for v in y.iter() {
            assert!((v - 3.475).abs() < 1e-12);
        }

        let y = critic_target(array![0.3].view(), array![0.0].view(), q.view(), q.view(), array![-1.0].view(), 0.5, 0.99, false);
        assert!(y.iter().all(|&v| v == 0.3));

        let q1 = array![[1.0, 2.0]];
        let q2 = array![[3.0, 5.0]];
        let (r, nd, lp) = (array![0.0], array![1.0], array![0.0]);
        let cdq = critic_target(r.view(), nd.view(), q1.view(), q2.view(), lp.view(), 1.0, 1.0, true);
        let mean = critic_target(r.view(), nd.view(), q1.view(), q2.view(), lp.view(), 1.0, 1.0, false);
        assert_eq!(cdq, q1);
        assert_eq!(mean, array![[2.0, 3.5]]);
    }

    #[test]
    fn dual_step_anchors() {
        assert!((optimism_step(1.0, 0.10, 1, 0.05, 0.0, 3e-4) - 0.999985).abs() < 1e-12);
        assert!((kl_weight_step(1.0, 0.10, 1, 0.05, 3e-4) - 1.000015).abs() < 1e-12);
        assert_eq!(optimism_step(0.7, 0.1, 2, 0.05, 0.0, 3e-4), 0.7);
        assert_eq!(kl_weight_step(0.7, 0.1, 2, 0.05, 3e-4), 0.7);

        let mut beta = 1.0;
        let mut tau = 1.0;
        for _ in 0..100_000 {
            beta = optimism_step(beta, 10.0, 1, 0.05, -0.5, 3e-4);
            tau = kl_weight_step(tau, 0.0, 1, 0.05, 3e-4);
        }
        assert_eq!(beta, 0.0);
        assert_eq!(tau, KL_WEIGHT_FLOOR);
        assert_eq!(optimism_step(0.5, 10.0, 1, 0.05, 0.4, 1.0), 0.4);
    }

    #[test]
    fn temperature_follows_entropy_gap() {
        let log_alpha = 0.0;
        assert!(temperature_step(log_alpha, 0.1, 0.5, 3e-4) > log_alpha);
        assert!(temperature_step(log_alpha, 0.9, 0.5, 3e-4) < log_alpha);
        assert_eq!(temperature_step(log_alpha, 0.5, 0.5, 3e-4), log_alpha);
        let mut la = 0.0;
        for _ in 0..1_000_000 {
            la = temperature_step(la, 100.0, -1.0, 3e-4);
        }
        assert!(la.exp() > 0.0);
        assert!((la.exp() as f32) > 0.0);
    }

    proptest! {
        #[test]
        fn dual_steps_move_in_opposite_directions(
            kl in 0.0f64..1.0, beta in 0.1f64..2.0, tau in 0.1f64..2.0, dim in 1usize..6,
        ) {
            let db = optimism_step(beta, kl, dim, 0.05, 0.0, 3e-4) - beta;
            let dt = kl_weight_step(tau, kl, dim, 0.05, 3e-4) - tau;
            prop_assert!(db * dt <= 0.0);
            if kl / dim as f64 > 0.05 { prop_assert!(db < 0.0 && dt > 0.0); }
            if kl / (dim as f64) < 0.05 { prop_assert!(db > 0.0 && dt < 0.0); }
        }

        #[test]
        fn polyak_contracts(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20), rho in 0.001f64..1.0,
        ) {
            let (online, mut target): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let dist = |t: &[f64]| t.iter().zip(&online).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let before = dist(&target);
            polyak_update(&online, &mut target, rho).unwrap();
            prop_assert!(dist(&target) <= (1.0 - rho) * before + 1e-12);
        }
    }

    #[test]
    fn polyak_anchors() {
        let mut t = vec![0.0f64];
        polyak_update(&[1.0], &mut t, 0.005).unwrap();
        assert!((t[0] - 0.005).abs() < 1e-15);
        let mut t = vec![3.0, -2.0];
        polyak_update(&[1.0, 4.0], &mut t, 1.0).unwrap();
        assert_eq!(t, vec![1.0, 4.0]);
        let mut t = vec![1.5f64, 2.5];
        polyak_update(&[1.5, 2.5], &mut t, 0.3).unwrap();
        assert!((t[0] - 1.5).abs() <= f64::EPSILON * 2.0 && (t[1] - 2.5).abs() <= f64::EPSILON * 4.0);
        assert!(polyak_update(&[1.0], &mut [0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn hyperparameter_presets_and_validation() {
        let bro = BroHyperparams::bro();
        assert_eq!((bro.batch_size, bro.replay_ratio, bro.num_quantiles), (128, 10, 100));
        assert_eq!((bro.discount, bro.polyak, bro.lr_actor, bro.kl_target), (0.99, 0.005, 3e-4, 0.05));
        assert_eq!((bro.initial_optimism, bro.std_multiplier, bro.exploratory_steps), (1.0, 0.75, 2500));
        assert_eq!(bro.reset_steps, vec![15_000, 50_000, 250_000, 500_000, 750_000, 1_000_000]);
        assert_eq!(BroHyperparams::bro_fast().replay_ratio, 2);
        assert_eq!(bro.target_entropy_for(6), -3.0);
        for bad in [
            BroHyperparams { discount: 0.0, ..tiny() },
            BroHyperparams { polyak: 1.5, ..tiny() },
            BroHyperparams { num_quantiles: 0, ..tiny() },
            BroHyperparams { replay_ratio: 0, ..tiny() },
            BroHyperparams { lr_critic: -1.0, ..tiny() },
            BroHyperparams { initial_optimism: -0.1, ..tiny() },
            BroHyperparams { reset_steps: vec![5, 5], ..tiny() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn exploration_and_evaluation_actions() {
        let mut a = agent(tiny(), 0);
        let obs = [0.1, -0.2, 0.3];
        let x = a.select_action(&obs, ActionMode::Explore, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y = a.select_action(&obs, ActionMode::Explore, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(x, y);
        assert!(x.iter().all(|v| v.abs() <= 1.0));
        assert!(a.select_action(&[f64::NAN, 0.0, 0.0], ActionMode::Explore, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(a.select_action(&[0.0], ActionMode::Evaluate, &mut ChaCha8Rng::seed_from_u64(1)).is_err());

        let output_weights: Vec<_> = a.actor_p.layout().into_iter().filter(|t| t.layer == crate::networks::Layer::Output).collect();
        for t in output_weights {
            a.actor_p.params_mut()[t.range()].fill(0.0);
        }
        assert_eq!(a.select_action(&obs, ActionMode::Evaluate, &mut ChaCha8Rng::seed_from_u64(2)).unwrap(), vec![0.0; ACT]);

        for _ in 0..10 {
            a.advance_env_step();
        }
        let row = ArrayView2::from_shape((1, OBS), &obs).unwrap();
        let from_o = a.optimistic_policy(row).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(3), 0.75).action;
        let got = a.select_action(&obs, ActionMode::Explore, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(got, from_o.into_raw_vec_and_offset().0);

        a.hyper.use_dual_actor = false;
        let from_p = a.pessimistic_policy(row).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(3), 1.0).action;
        let got = a.select_action(&obs, ActionMode::Explore, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(got, from_p.into_raw_vec_and_offset().0);
    }

    #[test]
    fn train_step_row_counts() {
        let buf = buffer(100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = agent(BroHyperparams { replay_ratio: 10, ..tiny() }, 0);
        assert_eq!(a.train_step(&buf, &mut rng).unwrap().rows.len(), 10);
        assert_eq!(a.gradient_step(), 10);
        let mut f = agent(tiny(), 0);
        assert_eq!(f.train_step(&buf, &mut rng).unwrap().rows.len(), 2);

        let small = buffer(5, 1);
        let before = f.clone();
        let step = f.train_step(&small, &mut rng).unwrap();
        assert!(step.rows.is_empty() && step.warning.is_some());
        assert_eq!(f, before);
    }

    #[test]
    fn training_is_deterministic() {
        let buf = buffer(200, 3);
        let run = || {
            let mut a = agent(tiny(), 7);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let mut rows = Vec::new();
            for _ in 0..500 {
                rows.extend(a.train_step(&buf, &mut rng).unwrap().rows);
            }
            (rows, a)
        };
        let (r1, a1) = run();
        let (r2, a2) = run();
        assert_eq!(r1.len(), 1000);
        assert!(r1.iter().zip(&r2).all(|(x, y)| {
            let bits = |r: &DiagnosticRow| {
                [r.td_error, r.mean_q, r.critic_loss, r.critic_grad_norm, r.actor_grad_norm, r.alpha, r.beta_o, r.kl_weight, r.measured_kl, r.entropy_estimate]
                    .map(f64::to_bits)
            };
            bits(x) == bits(y)
        }));
        assert_eq!(a1, a2);
        assert!(r1.iter().all(|r| [r.td_error, r.mean_q, r.critic_grad_norm, r.measured_kl].iter().all(|v| v.is_finite())));
    }

    #[test]
    fn cdq_targets_never_exceed_mean_targets() {
        let buf = buffer(200, 4);
        let mut a = agent(tiny(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            a.train_step(&buf, &mut rng).unwrap();
        }
        for i in 0..100 {
            let batch = buf.sample(16, &mut rng).unwrap();
            let mut cdq = a.clone();
            cdq.hyper.use_cdq = true;
            let seed = ChaCha8Rng::seed_from_u64(i);
            let y_mean = a.compute_critic_target(&batch, &mut seed.clone()).unwrap();
            let y_cdq = cdq.compute_critic_target(&batch, &mut seed.clone()).unwrap();
            assert!(y_cdq.iter().zip(&y_mean).all(|(c, m)| c <= m));
        }
    }

    #[test]
    fn optimistic_value_dominates_mean_on_batches() {
        let buf = buffer(200, 4);
        let a = agent(tiny(), 9);
        let batch = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let [q1, q2] = a.q_values(batch.obs.view(), batch.actions.view()).unwrap();
        for (r1, r2) in q1.outer_iter().zip(q2.outer_iter()) {
            let e = EnsembleQuantiles::from_values(r1.to_vec(), r2.to_vec()).unwrap();
            assert!(optimistic_q(&e, a.beta_o()).unwrap() >= ensemble_mean_q(&e));
        }
    }

    #[test]
    fn updates_touch_only_their_own_networks() {
        let buf = buffer(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = buf.sample(16, &mut rng).unwrap();
        let mut a = agent(tiny(), 1);

        let before = a.clone();
        a.update_pessimistic_actor(batch.obs.view(), &mut rng).unwrap();
        assert_eq!(a.critics, before.critics);
        assert_eq!(a.actor_o, before.actor_o);
        assert_ne!(a.actor_p, before.actor_p);

        let before = a.clone();
        a.update_optimistic_actor(batch.obs.view(), &mut rng).unwrap();
        assert_eq!(a.critics, before.critics);
        assert_eq!(a.actor_p, before.actor_p);
        assert_ne!(a.actor_o, before.actor_o);

        let before = a.clone();
        let targets = a.compute_critic_target(&batch, &mut rng).unwrap();
        a.update_critics(&batch, targets.view()).unwrap();
        assert_eq!(a.actor_p, before.actor_p);
        assert_eq!(a.actor_o, before.actor_o);
        assert_eq!(a.targets, before.targets);
        assert_ne!(a.critics, before.critics);
    }

    #[test]
    fn identical_critics_carry_no_optimism_gradient() {
        let buf = buffer(100, 4);
        let batch = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut a = agent(tiny(), 2);
        a.critics[1] = a.critics[0].clone();
        let noise = standard_noise(16, ACT, &mut ChaCha8Rng::seed_from_u64(1));
        a.set_duals(1.0, 0.0, 1.0).unwrap();
        let (_, g0) = a.optimistic_actor_objective(batch.obs.view(), noise.clone()).unwrap();
        a.set_duals(1.0, 5.0, 1.0).unwrap();
        let (_, g5) = a.optimistic_actor_objective(batch.obs.view(), noise).unwrap();
        assert_eq!(g0, g5);
    }

    fn fd_check(params: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) {
        let h = 1e-6;
        let mut p = params.to_vec();
        for i in (0..params.len()).step_by(3) {
            p[i] = params[i] + h;
            let up = loss(&p);
            p[i] = params[i] - h;
            let down = loss(&p);
            p[i] = params[i];
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-3 * fd.abs().max(analytic[i].abs()).max(1e-4);
            assert!((fd - analytic[i]).abs() <= tol, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn actor_objectives_match_finite_differences() {
        let buf = buffer(100, 4);
        let batch = buf.sample(8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut a = agent(BroHyperparams { actor_size: ModelSize::new(1, 8), ..tiny() }, 3);
        a.set_duals(0.3, 0.7, 2.0).unwrap();
        a.actor_o.params_mut().iter_mut().for_each(|v| *v *= 1.3);
        let noise = standard_noise(8, ACT, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(a.actor_p.num_params() < 1000);

        let (_, grads) = a.pessimistic_actor_objective(batch.obs.view(), noise.clone()).unwrap();
        let params = a.actor_p.params().to_vec();
        let mut probe = a.clone();
        fd_check(&params, &grads, |p| {
            probe.actor_p.params_mut().copy_from_slice(p);
            probe.pessimistic_actor_objective(batch.obs.view(), noise.clone()).unwrap().0.loss
        });

        let (_, grads) = a.optimistic_actor_objective(batch.obs.view(), noise.clone()).unwrap();
        let params = a.actor_o.params().to_vec();
        let mut probe = a.clone();
        fd_check(&params, &grads, |p| {
            probe.actor_o.params_mut().copy_from_slice(p);
            probe.optimistic_actor_objective(batch.obs.view(), noise.clone()).unwrap().0.loss
        });
    }

    #[test]
    fn critic_objective_matches_finite_differences() {
        let buf = buffer(100, 4);
        let batch = buf.sample(8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = agent(BroHyperparams { critic_size: ModelSize::new(1, 8), ..tiny() }, 3);
        let targets = a.compute_critic_target(&batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (_, grads) = a.critic_objective(&batch, targets.view()).unwrap();
        for c in 0..2 {
            let params = a.critics[c].params().to_vec();
            let mut probe = a.clone();
            fd_check(&params, &grads[c], |p| {
                probe.critics[c].params_mut().copy_from_slice(p);
                probe.critic_objective(&batch, targets.view()).unwrap().0.loss
            });
        }
    }

    #[test]
    fn critic_loss_decreases_on_fixed_regression_batch() {
        let buf = buffer(100, 4);
        let batch = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let targets = Array2::from_shape_fn((16, 5), |(b, k)| batch.obs[[b, 0]] + 0.1 * k as f64);
        let mut a = agent(tiny(), 4);
        let first = a.update_critics(&batch, targets.view()).unwrap().loss;
        let mut last = first;
        for _ in 0..200 {
            last = a.update_critics(&batch, targets.view()).unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn single_quantile_loss_is_half_huber_td() {
        let buf = buffer(100, 4);
        let batch = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = agent(BroHyperparams { use_quantiles: false, ..tiny() }, 4);
        let targets = a.compute_critic_target(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(targets.ncols(), 1);
        let [q1, q2] = a.q_values(batch.obs.view(), batch.actions.view()).unwrap();
        let oracle: f64 = [q1, q2]
            .iter()
            .map(|q| (0..16).map(|b| 0.5 * huber(targets[[b, 0]] - q[[b, 0]], 1.0)).sum::<f64>() / 16.0)
            .sum::<f64>()
            / 2.0;
        let (stats, _) = a.critic_objective(&batch, targets.view()).unwrap();
        assert!((stats.loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn dual_updates_follow_measured_divergence() {
        let buf = buffer(200, 4);
        let batch = buf.sample(16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        let mut far = agent(tiny(), 6);
        let out_bias = far.actor_o.layout().into_iter().last().unwrap();
        far.actor_o.params_mut()[out_bias.range()].fill(2.0);
        let (b0, t0) = (far.beta_o(), far.kl_weight());
        let row = far.train_iteration(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(row.measured_kl / ACT as f64 > 0.05);
        assert!(far.beta_o() < b0 && far.kl_weight() > t0);

        let mut near = agent(tiny(), 6);
        near.actor_o = near.actor_p.clone();
        let (b0, t0) = (near.beta_o(), near.kl_weight());
        let row = near.train_iteration(&batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(row.measured_kl / (ACT as f64) < 0.05);
        assert!(near.beta_o() >= b0 && near.kl_weight() <= t0);
    }

    #[test]
    fn large_kl_weight_pulls_optimistic_actor_onto_pessimistic() {
        let buf = buffer(200, 4);
        let mut a = agent(tiny(), 8);
        a.set_duals(1.0, 0.0, 1000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = buf.sample(64, &mut rng).unwrap().obs;
        let kl = |a: &AgentState<f64>| a.pessimistic_policy(obs.view()).unwrap().kl_to(&a.optimistic_policy(obs.view()).unwrap()).mean().unwrap();
        let start = kl(&a);
        for _ in 0..500 {
            let batch = buf.sample(16, &mut rng).unwrap();
            a.update_optimistic_actor(batch.obs.view(), &mut rng).unwrap();
        }
        assert!(kl(&a) < 0.05 * start, "{start} -> {}", kl(&a));
    }

    #[test]
    fn no_target_network_aliases_online_critics() {
        let buf = buffer(200, 4);
        let mut a = agent(BroHyperparams { use_target_network: false, ..tiny() }, 3);
        a.train_step(&buf, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.targets, a.critics);

        let mut b = agent(tiny(), 3);
        b.train_step(&buf, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_ne!(b.targets, b.critics);
    }

    #[test]
    fn reset_schedule() {
        let buf = buffer(200, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = agent(BroHyperparams { reset_steps: DEFAULT_RESET_STEPS.to_vec(), ..tiny() }, 2);
        for _ in 0..5 {
            a.train_step(&buf, &mut rng).unwrap();
        }
        a.env_step = 100_000;
        let before = a.clone();
        assert!(!a.maybe_reset(&mut rng).unwrap());
        assert_eq!(a, before);

        a.env_step = 15_000;
        a.set_duals(0.2, 0.3, 0.4).unwrap();
        let len = buf.len();
        let fresh = AgentState::<f64>::new(a.hyper.clone(), OBS, ACT, &mut rng.clone()).unwrap();
        assert!(a.maybe_reset(&mut rng).unwrap());
        assert_eq!(a.critics, fresh.critics);
        assert_eq!(a.targets, fresh.targets);
        assert_eq!(a.actor_p, fresh.actor_p);
        assert_eq!(a.actor_o, fresh.actor_o);
        assert_eq!(a.opt_critics, fresh.opt_critics);
        assert_eq!((a.alpha(), a.beta_o(), a.kl_weight()), (1.0, 1.0, 1.0));
        assert_eq!(a.gradient_step(), 10);
        assert_eq!(buf.len(), len);

        let mut off = agent(BroHyperparams { use_resets: false, ..tiny() }, 2);
        off.env_step = 15_000;
        assert!(!off.maybe_reset(&mut rng).unwrap());
    }

    #[test]
    fn non_finite_loss_flags_divergence_and_aborts() {
        let buf = buffer(200, 4);
        let mut a = agent(tiny(), 3);
        let out_bias = a.critics[0].layout().into_iter().last().unwrap();
        a.critics[0].params_mut()[out_bias.range()][0] = f64::NAN;
        let before = a.clone();
        let err = a.train_step(&buf, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
        assert!(a.diverged());
        assert_eq!(a.critics[1], before.critics[1]);
        assert!(a.train_step(&buf, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn serde_round_trip_validates() {
        let a: AgentState<f32> = AgentState::new(tiny(), OBS, ACT, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        a.validate().unwrap();
        let mut broken = a.clone();
        broken.kl_weight = 0.0;
        assert!(broken.validate().is_err());
        let mut broken = a.clone();
        broken.hyper.num_quantiles = 7;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn bandit_actor_mean_converges_to_optimum() {
        let hyper = BroHyperparams {
            batch_size: 64,
            replay_ratio: 1,
            num_quantiles: 5,
            exploratory_steps: 200,
            critic_size: ModelSize::new(1, 32),
            actor_size: ModelSize::new(1, 32),
            ..BroHyperparams::bro_fast()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = GaussianBandit::new(1, 0.0, 1.0, 0.0).unwrap();
        let mut a: AgentState<f32> = AgentState::new(hyper, 1, 1, &mut rng).unwrap();
        let mut buf = ReplayBuffer::new(10_000, 1, 1).unwrap();
        for _ in 0..3000 {
            let obs = env.reset(&mut rng);
            let obs32: Vec<f32> = obs.iter().map(|&v| v as f32).collect();
            let action = a.select_action(&obs32, ActionMode::Explore, &mut rng).unwrap();
            let step = env.step(&action.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
            buf.add(Transition {
                obs: obs32,
                action,
                reward: step.reward as f32,
                next_obs: step.obs.iter().map(|&v| v as f32).collect(),
                terminated: step.terminated,
                truncated: step.truncated,
            })
            .unwrap();
            a.advance_env_step();
            if a.env_step() >= 200 {
                a.train_step(&buf, &mut rng).unwrap();
            }
        }
        let mean = a.select_action(&[1.0], ActionMode::Evaluate, &mut rng).unwrap()[0];
        assert!(mean.abs() < 0.05, "{mean}");
    }
}

//! Quantile value estimates: levels, the quantile Huber regression loss, and
//! aggregation over the two-critic ensemble.

use ndarray::{Array2, ArrayView2};

use crate::{Error, Real, Result};

/// Default Huber threshold.
pub const DEFAULT_KAPPA: f64 = 1.0;

/// Midpoint quantile levels `(2k - 1) / 2K` for `k = 1..=K`.
pub fn quantile_levels(k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Domain("number of quantiles must be at least 1".into()));
    }
    Ok((1..=k).map(|i| (2 * i - 1) as f64 / (2 * k) as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSet<F> {
    values: Vec<F>,
    levels: Vec<F>,
}

impl<F: Real> QuantileSet<F> {
    /// Quantile values at the midpoint levels for `values.len()` quantiles.
    pub fn new(values: Vec<F>) -> Result<Self> {
        let levels = quantile_levels(values.len())?.into_iter().map(F::of).collect();
        Ok(QuantileSet { values, levels })
    }

    pub fn with_levels(values: Vec<F>, levels: Vec<F>) -> Result<Self> {
        if values.len() != levels.len() {
            return Err(Error::shape("quantile levels", values.len(), levels.len()));
        }
        if levels.is_empty() {
            return Err(Error::Domain("empty quantile set".into()));
        }
        if levels.iter().any(|&l| !(l > F::zero() && l < F::one())) || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("quantile levels must be strictly increasing in (0, 1)".into()));
        }
        Ok(QuantileSet { values, levels })
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn levels(&self) -> &[F] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> F {
        self.values.iter().copied().sum::<F>() / F::of(self.len() as f64)
    }
}

pub fn huber<F: Real>(u: F, kappa: F) -> F {
    if u.abs() <= kappa {
        F::of(0.5) * u * u
    } else {
        kappa * (u.abs() - F::of(0.5) * kappa)
    }
}

#[inline]
fn asymmetric_weight<F: Real>(level: F, residual: F) -> F {
    if residual < F::zero() {
        (level - F::one()).abs()
    } else {
        level
    }
}

/// Pairwise quantile Huber loss of `pred` against sampled `targets`,
/// averaged over all `K x M` pairs and divided by `kappa`.
pub fn quantile_huber_loss<F: Real>(pred: &QuantileSet<F>, targets: &[F], kappa: F) -> Result<F> {
    if pred.is_empty() || targets.is_empty() {
        return Err(Error::Domain("quantile loss needs predictions and targets".into()));
    }
    if !(kappa > F::zero()) {
        return Err(Error::Domain("kappa must be positive".into()));
    }
    if pred.values.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite quantile loss input".into()));
    }
    let mut total = F::zero();
    for (&p, &level) in pred.values.iter().zip(&pred.levels) {
        for &t in targets {
            let u = t - p;
            total += asymmetric_weight(level, u) * huber(u, kappa);
        }
    }
    Ok(total / (kappa * F::of((pred.len() * targets.len()) as f64)))
}

/// Target rows sorted once, with prefix sums of the centred values and
/// their squares, so each prediction's pairwise loss is a handful of binary
/// searches instead of a pass over all targets.
#[derive(Clone, Debug)]
pub struct SortedTargets {
    rows: usize,
    width: usize,
    centre: Vec<f64>,
    sorted: Vec<f64>,
    sum1: Vec<f64>,
    sum2: Vec<f64>,
}

impl SortedTargets {
    pub fn new<F: Real>(targets: ArrayView2<F>) -> Self {
        let (rows, width) = targets.dim();
        let mut centre = Vec::with_capacity(rows);
        let mut sorted = Vec::with_capacity(rows * width);
        let mut sum1 = Vec::with_capacity(rows * (width + 1));
        let mut sum2 = Vec::with_capacity(rows * (width + 1));
        for row in targets.outer_iter() {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / width.max(1) as f64;
            let start = sorted.len();
            sorted.extend(row.iter().map(|v| v.f64() - mean));
            sorted[start..].sort_unstable_by(f64::total_cmp);
            let (mut a, mut b) = (0.0, 0.0);
            sum1.push(0.0);
            sum2.push(0.0);
            for &t in &sorted[start..] {
                a += t;
                b += t * t;
                sum1.push(a);
                sum2.push(b);
            }
            centre.push(mean);
        }
        SortedTargets {
            rows,
            width,
            centre,
            sorted,
            sum1,
            sum2,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Summed quantile Huber loss (not yet divided by kappa or averaged) of
    /// prediction `pred` at `level` against row `row`, and its derivative.
    fn pair_sums(&self, row: usize, pred: f64, level: f64, kappa: f64) -> (f64, f64) {
        let m = self.width;
        let t = &self.sorted[row * m..(row + 1) * m];
        let s1 = &self.sum1[row * (m + 1)..(row + 1) * (m + 1)];
        let s2 = &self.sum2[row * (m + 1)..(row + 1) * (m + 1)];
        let p = pred - self.centre[row];
        let i1 = t.partition_point(|&v| v < p - kappa);
        let i2 = t.partition_point(|&v| v < p);
        let i3 = t.partition_point(|&v| v <= p + kappa);
        let below = 1.0 - level;
        let count = |i: usize, j: usize| (j - i) as f64;
        let first = |i: usize, j: usize| s1[j] - s1[i];
        let squares = |i: usize, j: usize| {
            let n = count(i, j);
            (s2[j] - s2[i]) - 2.0 * p * first(i, j) + n * p * p
        };
        // u = t - p < -kappa: linear tail below the prediction
        let n_a = count(0, i1);
        let loss_a = below * kappa * (n_a * (p - 0.5 * kappa) - first(0, i1));
        let slope_a = -below * kappa * n_a;
        // -kappa <= u < 0 and 0 <= u <= kappa: quadratic core
        let loss_b = below * 0.5 * squares(i1, i2);
        let slope_b = below * (first(i1, i2) - count(i1, i2) * p);
        let loss_c = level * 0.5 * squares(i2, i3);
        let slope_c = level * (first(i2, i3) - count(i2, i3) * p);
        // u > kappa: linear tail above
        let n_d = count(i3, m);
        let loss_d = level * kappa * (first(i3, m) - n_d * (p + 0.5 * kappa));
        let slope_d = level * kappa * n_d;
        (loss_a + loss_b + loss_c + loss_d, slope_a + slope_b + slope_c + slope_d)
    }
}

/// Batch form used for critic training: rows are samples, `pred` is `B x K`,
/// `targets` is `B x M`. Returns the batch-mean loss and its gradient w.r.t.
/// `pred`; targets are constants.
pub fn quantile_huber_loss_batch<F: Real>(
    pred: ArrayView2<F>,
    targets: ArrayView2<F>,
    levels: &[F],
    kappa: F,
) -> (F, Array2<F>) {
    quantile_huber_loss_sorted(pred, &SortedTargets::new(targets), levels, kappa)
}

pub fn quantile_huber_loss_sorted<F: Real>(
    pred: ArrayView2<F>,
    targets: &SortedTargets,
    levels: &[F],
    kappa: F,
) -> (F, Array2<F>) {
    let (batch, k) = pred.dim();
    assert_eq!(levels.len(), k, "levels width");
    assert_eq!(targets.rows, batch, "target rows");
    let kappa = kappa.f64();
    let scale = 1.0 / (kappa * (k * targets.width * batch) as f64);
    let mut grad = Array2::zeros((batch, k));
    let mut total = 0.0;
    for b in 0..batch {
        for j in 0..k {
            let (loss, slope) = targets.pair_sums(b, pred[[b, j]].f64(), levels[j].f64(), kappa);
            total += loss;
            grad[[b, j]] = F::of(-slope * scale);
        }
    }
    (F::of(total * scale), grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleQuantiles<F> {
    pub critic1: QuantileSet<F>,
    pub critic2: QuantileSet<F>,
}

impl<F: Real> EnsembleQuantiles<F> {
    pub fn new(critic1: QuantileSet<F>, critic2: QuantileSet<F>) -> Result<Self> {
        if critic1.len() != critic2.len() {
            return Err(Error::shape("ensemble quantiles", critic1.len(), critic2.len()));
        }
        Ok(EnsembleQuantiles { critic1, critic2 })
    }

    pub fn from_values(q1: Vec<F>, q2: Vec<F>) -> Result<Self> {
        Self::new(QuantileSet::new(q1)?, QuantileSet::new(q2)?)
    }

    fn pairs(&self) -> impl Iterator<Item = (F, F)> + '_ {
        self.critic1.values.iter().copied().zip(self.critic2.values.iter().copied())
    }

    fn per_quantile(&self, f: impl Fn(F, F) -> F) -> QuantileSet<F> {
        QuantileSet {
            values: self.pairs().map(|(a, b)| f(a, b)).collect(),
            levels: self.critic1.levels.clone(),
        }
    }

    fn two_k(&self) -> F {
        F::of(2.0 * self.critic1.len() as f64)
    }
}

pub fn ensemble_mean_q<F: Real>(e: &EnsembleQuantiles<F>) -> F {
    e.pairs().map(|(a, b)| a + b).sum::<F>() / e.two_k()
}

pub fn ensemble_mean_per_quantile<F: Real>(e: &EnsembleQuantiles<F>) -> QuantileSet<F> {
    e.per_quantile(|a, b| F::of(0.5) * (a + b))
}

/// Clipped double-Q extended to quantiles: elementwise minimum.
pub fn ensemble_min_per_quantile<F: Real>(e: &EnsembleQuantiles<F>) -> QuantileSet<F> {
    e.per_quantile(|a, b| a.min(b))
}

/// Mean absolute per-quantile gap between the critics, halved.
pub fn disagreement<F: Real>(e: &EnsembleQuantiles<F>) -> F {
    e.pairs().map(|(a, b)| (a - b).abs()).sum::<F>() / e.two_k()
}

/// Upper-bound value `mean + beta_o * disagreement`.
pub fn optimistic_q<F: Real>(e: &EnsembleQuantiles<F>, beta_o: F) -> Result<F> {
    if !(beta_o >= F::zero()) {
        return Err(Error::Domain("optimism must be non-negative".into()));
    }
    Ok(e.pairs().map(|(a, b)| a + b + beta_o * (a - b).abs()).sum::<F>() / e.two_k())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};

    fn set(values: &[f64]) -> QuantileSet<f64> {
        QuantileSet::new(values.to_vec()).unwrap()
    }

    fn ens(q1: &[f64], q2: &[f64]) -> EnsembleQuantiles<f64> {
        EnsembleQuantiles::from_values(q1.to_vec(), q2.to_vec()).unwrap()
    }

    #[test]
    fn levels() {
        assert_eq!(quantile_levels(1).unwrap(), vec![0.5]);
        assert_eq!(quantile_levels(2).unwrap(), vec![0.25, 0.75]);
        assert_eq!(quantile_levels(4).unwrap(), vec![0.125, 0.375, 0.625, 0.875]);
        assert!(quantile_levels(0).is_err());
        assert!(QuantileSet::with_levels(vec![0.0, 1.0], vec![0.6, 0.4]).is_err());
        assert!(QuantileSet::with_levels(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn loss_anchors() {
        assert_eq!(quantile_huber_loss(&set(&[1.0, 2.0]), &[1.0, 1.0], 1.0).unwrap() > 0.0, true);
        assert_eq!(quantile_huber_loss(&set(&[3.0]), &[3.0], 1.0).unwrap(), 0.0);
        let half = QuantileSet::<f64>::with_levels(vec![0.0], vec![0.5]).unwrap();
        assert!((quantile_huber_loss(&half, &[1.0], 1.0).unwrap() - 0.25).abs() < 1e-15);
        let high = QuantileSet::<f64>::with_levels(vec![0.0], vec![0.9]).unwrap();
        assert!((quantile_huber_loss(&high, &[1.0], 1.0).unwrap() - 0.45).abs() < 1e-15);
        assert!(quantile_huber_loss(&half, &[], 1.0).is_err());
        assert!(quantile_huber_loss(&half, &[1.0], 0.0).is_err());
        assert!(quantile_huber_loss(&half, &[f64::NAN], 1.0).is_err());
    }

    /// Direct transcription of the loss definition.
    fn oracle(values: &[f64], levels: &[f64], targets: &[f64], kappa: f64) -> f64 {
        let mut sum = 0.0;
        for k in 0..values.len() {
            for j in 0..targets.len() {
                let u = targets[j] - values[k];
                let indicator = if u < 0.0 { 1.0 } else { 0.0 };
                let h = if u.abs() <= kappa { 0.5 * u * u } else { kappa * (u.abs() - 0.5 * kappa) };
                sum += (levels[k] - indicator).abs() * h / kappa;
            }
        }
        sum / (values.len() * targets.len()) as f64
    }

    #[test]
    fn loss_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let k = rng.random_range(1..=8);
            let m = rng.random_range(1..=8);
            let kappa = rng.random_range(0.1..2.0);
            let values: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let targets: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pred = set(&values);
            let got = quantile_huber_loss(&pred, &targets, kappa).unwrap();
            let want = oracle(&values, pred.levels(), &targets, kappa);
            assert!((got - want).abs() < 1e-8);

            let p = Array2::from_shape_vec((1, k), values.clone()).unwrap();
            let t = Array2::from_shape_vec((1, m), targets.clone()).unwrap();
            let (batch_loss, _) = quantile_huber_loss_batch(p.view(), t.view(), pred.levels(), kappa);
            assert!((batch_loss - want).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let levels = quantile_levels(5).unwrap();
        let pred = Array2::from_shape_simple_fn((3, 5), || rng.random_range(-2.0..2.0));
        let targets = Array2::from_shape_simple_fn((3, 7), || rng.random_range(-2.0..2.0));
        let (_, grad) = quantile_huber_loss_batch(pred.view(), targets.view(), &levels, 0.7);
        let h = 1e-6;
        for idx in [(0, 0), (1, 3), (2, 4), (0, 2)] {
            let mut plus = pred.clone();
            plus[idx] += h;
            let mut minus = pred.clone();
            minus[idx] -= h;
            let fd = (quantile_huber_loss_batch(plus.view(), targets.view(), &levels, 0.7).0
                - quantile_huber_loss_batch(minus.view(), targets.view(), &levels, 0.7).0)
                / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6, "{idx:?}");
        }
    }

    proptest! {
        #[test]
        fn loss_is_zero_only_when_residuals_vanish(
            values in prop::collection::vec(-5.0f64..5.0, 1..6),
            targets in prop::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let loss = quantile_huber_loss(&set(&values), &targets, 1.0).unwrap();
            let all_zero = values.iter().all(|v| targets.iter().all(|t| t == v));
            if all_zero { prop_assert_eq!(loss, 0.0); } else { prop_assert!(loss > 0.0); }
        }

        #[test]
        fn small_kappa_approaches_pinball_loss(
            values in prop::collection::vec(-5.0f64..5.0, 1..6),
            targets in prop::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let pred = set(&values);
            let mut pinball = 0.0;
            for (v, l) in values.iter().zip(pred.levels()) {
                for t in &targets {
                    let u = t - v;
                    pinball += asymmetric_weight(*l, u) * u.abs();
                }
            }
            pinball /= (values.len() * targets.len()) as f64;
            prop_assume!(pinball > 1e-2);
            let loss = quantile_huber_loss(&pred, &targets, 1e-4).unwrap();
            prop_assert!((loss - pinball).abs() <= 1e-2 * pinball);
        }

        #[test]
        fn optimism_is_monotone(
            q in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..8),
            b1 in 0.0f64..3.0, b2 in 0.0f64..3.0,
        ) {
            let (q1, q2): (Vec<f64>, Vec<f64>) = q.into_iter().unzip();
            let e = ens(&q1, &q2);
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let mean = ensemble_mean_q(&e);
            prop_assert!(optimistic_q(&e, lo).unwrap() <= optimistic_q(&e, hi).unwrap() + 1e-12);
            prop_assert!(optimistic_q(&e, lo).unwrap() >= mean - 1e-12);
            prop_assert!((optimistic_q(&e, hi).unwrap() - (mean + hi * disagreement(&e))).abs() < 1e-9);
            let min = ensemble_min_per_quantile(&e);
            let avg = ensemble_mean_per_quantile(&e);
            for (a, b) in min.values().iter().zip(avg.values()) {
                prop_assert!(a <= b);
            }
        }
    }

    #[test]
    fn ensemble_anchors() {
        let e = ens(&[1.0, 3.0], &[2.0, 4.0]);
        assert_eq!(ensemble_mean_q(&e), 2.5);
        assert_eq!(ensemble_mean_q(&ens(&[3.0, 1.0], &[4.0, 2.0])), 2.5);
        assert_eq!(ensemble_mean_q(&ens(&[7.0; 4], &[7.0; 4])), 7.0);

        let avg = ensemble_mean_per_quantile(&e);
        assert_eq!(avg.values(), &[1.5, 3.5]);
        assert_eq!(avg.levels(), e.critic1.levels());
        assert_eq!(avg.mean(), ensemble_mean_q(&e));
        assert_eq!(ensemble_mean_per_quantile(&ens(&[1.0, 5.0], &[1.0, 5.0])).values(), &[1.0, 5.0]);

        assert_eq!(ensemble_min_per_quantile(&e).values(), &[1.0, 3.0]);
        assert_eq!(ensemble_min_per_quantile(&ens(&[2.0, 5.0], &[2.0, 5.0])).values(), &[2.0, 5.0]);

        assert!((optimistic_q(&e, 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(optimistic_q(&e, 0.0).unwrap(), ensemble_mean_q(&e));
        let same = ens(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!(optimistic_q(&same, 4.0).unwrap(), ensemble_mean_q(&same));
        assert!(optimistic_q(&e, -1.0).is_err());

        assert_eq!(disagreement(&e), 0.5);
        assert_eq!(disagreement(&same), 0.0);
        assert_eq!(disagreement(&ens(&[2.0, 4.0], &[1.0, 3.0])), disagreement(&e));
        assert!(EnsembleQuantiles::from_values(vec![1.0], vec![1.0, 2.0]).is_err());
    }

    /// Fits free quantile values to Gaussian samples with Adam-style
    /// normalized steps, then returns them.
    fn fit_quantiles(levels: &[f64], kappa: f64, mu: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mu, sigma).unwrap();
        let k = levels.len();
        let mut values = Array2::<f64>::zeros((1, k));
        let (mut m, mut v) = (vec![0.0; k], vec![0.0; k]);
        let steps = 20_000;
        for t in 1..=steps {
            let targets = Array2::from_shape_simple_fn((1, 256), || normal.sample(&mut rng));
            let (_, grad) = quantile_huber_loss_batch(values.view(), targets.view(), levels, kappa);
            let lr = if t < steps / 2 { 1e-2 } else { 1e-3 };
            for j in 0..k {
                let g = grad[[0, j]];
                m[j] = 0.9 * m[j] + 0.1 * g;
                v[j] = 0.999 * v[j] + 0.001 * g * g;
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                values[[0, j]] -= lr * mh / (vh.sqrt() + 1e-12);
            }
        }
        values.into_raw_vec_and_offset().0
    }

    #[test]
    fn small_kappa_fit_recovers_gaussian_quantiles() {
        let levels = quantile_levels(9).unwrap();
        let fitted = fit_quantiles(&levels, 0.01, 1.0, 0.5, 3);
        let normal = StatrsNormal::new(1.0, 0.5).unwrap();
        for (q, l) in fitted.iter().zip(&levels) {
            assert!((q - normal.inverse_cdf(*l)).abs() < 0.03, "level {l}: {q}");
        }
    }

    /// Minimizer of the expected quantile Huber loss under N(mu, sigma^2),
    /// by golden-section search over Simpson quadrature.
    fn huber_quantile(level: f64, kappa: f64, mu: f64, sigma: f64) -> f64 {
        let expected = |q: f64| {
            let (lo, hi, n) = (mu - 10.0 * sigma, mu + 10.0 * sigma, 4000);
            let h = (hi - lo) / n as f64;
            let pdf = |y: f64| (-(y - mu).powi(2) / (2.0 * sigma * sigma)).exp();
            let f = |y: f64| asymmetric_weight(level, y - q) * huber(y - q, kappa) * pdf(y);
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let (mut a, mut b) = (mu - 5.0 * sigma, mu + 5.0 * sigma);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-9 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if expected(c) < expected(d) { b = d } else { a = c }
        }
        0.5 * (a + b)
    }

    #[test]
    fn unit_kappa_fit_recovers_huber_quantiles() {
        let levels = quantile_levels(5).unwrap();
        let fitted = fit_quantiles(&levels, 1.0, 1.0, 0.5, 4);
        for (q, l) in fitted.iter().zip(&levels) {
            let want = huber_quantile(*l, 1.0, 1.0, 0.5);
            assert!((q - want).abs() < 0.02, "level {l}: {q} vs {want}");
        }
        // the two fixed points really are different at the tails
        let normal = StatrsNormal::new(1.0, 0.5).unwrap();
        assert!((huber_quantile(0.1, 1.0, 1.0, 0.5) - normal.inverse_cdf(0.1)).abs() > 0.15);
    }
}

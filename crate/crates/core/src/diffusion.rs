//! Noise schedules, the forward process, the noise-prediction objective and
//! the DDPM / DDIM reverse samplers.

use lphom_tensor::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::ConditionLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t = prod_{s <= t} alpha_s`
/// for `t = 1..=T`, with `alpha_bar_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        let prev = *alpha_bar.last().expect("non-empty");
        alpha_bar.push(prev * a);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Defined for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

fn combine<T: Element>(a: f64, x: &Tensor<T>, b: f64, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::InvalidArgument(format!("shape mismatch {:?} vs {:?}", x.shape(), y.shape())));
    }
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    let data = x.data().iter().zip(y.data()).map(|(&u, &v)| a * u + b * v).collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), data)?)
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_marginal<T: Element>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    combine(ab.sqrt(), z0, (1.0 - ab).sqrt(), eps)
}

/// One forward transition `z_t = sqrt(alpha_t) z_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step<T: Element>(prev: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check(t)?;
    combine(sched.alpha(t).sqrt(), prev, sched.beta(t).sqrt(), eps)
}

/// Per-sample forward marginal over a batch `(N, ...)` with timesteps `ts`.
pub fn forward_marginal_batch<T: Element>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let n = ts.len();
    if z0.shape() != eps.shape() || z0.shape().first() != Some(&n) {
        return Err(Error::InvalidArgument(format!("batch of {n} timesteps vs shapes {:?} / {:?}", z0.shape(), eps.shape())));
    }
    let per = z0.len() / n;
    let mut data = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t)?;
        let ab = sched.alpha_bar(t);
        let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
        let range = i * per..(i + 1) * per;
        data.extend(z0.data()[range.clone()].iter().zip(&eps.data()[range]).map(|(&u, &v)| a * u + b * v));
    }
    Ok(Tensor::from_vec(z0.shape().to_vec(), data)?)
}

/// A conditional noise predictor `eps_theta(z_t, t, c)` evaluated without
/// gradient tracking. `ts` and `labels` hold one entry per batch element.
pub trait NoisePredictor<T: Element> {
    fn predict(&self, z_t: &Tensor<T>, ts: &[usize], labels: &[ConditionLabel]) -> Result<Tensor<T>>;
}

/// A noised training batch.
#[derive(Clone, Debug)]
pub struct NoisedBatch<T: Element> {
    pub z_t: Tensor<T>,
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
}

/// Draw `t ~ U{1..T}` per sample and `eps ~ N(0, I)`, then noise `z0`.
pub fn noise_batch<T: Element, R: Rng + ?Sized>(z0: &Tensor<T>, sched: &NoiseSchedule, rng: &mut R) -> Result<NoisedBatch<T>> {
    let n = *z0.shape().first().ok_or_else(|| Error::InvalidArgument("scalar latent batch".into()))?;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.len())).collect();
    let eps = Tensor::randn(z0.shape().to_vec(), rng);
    let z_t = forward_marginal_batch(z0, &ts, &eps, sched)?;
    Ok(NoisedBatch { z_t, ts, eps })
}

/// `mean((eps - eps_theta(z_t, t, c))^2)` for one random draw of `t` and `eps`.
pub fn training_loss<T: Element, M: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z0: &Tensor<T>,
    labels: &[ConditionLabel],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let b = noise_batch(z0, sched, rng)?;
    let pred = model.predict(&b.z_t, &b.ts, labels)?;
    if pred.shape() != b.eps.shape() {
        return Err(Error::InvalidArgument(format!("predictor returned {:?} for {:?}", pred.shape(), b.eps.shape())));
    }
    let sq: f64 = pred.data().iter().zip(b.eps.data()).map(|(&p, &e)| (p - e).as_f64().powi(2)).sum();
    Ok(sq / pred.len() as f64)
}

/// Ancestral step `z_t -> z_{t-1}` with the posterior variance `beta_tilde_t`;
/// no noise is added at `t = 1`.
pub fn ddpm_step<T: Element, M: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z_t: &Tensor<T>,
    t: usize,
    labels: &[ConditionLabel],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    sched.check(t)?;
    let n = z_t.shape()[0];
    let eps = model.predict(z_t, &vec![t; n], labels)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mean = combine(inv, z_t, -inv * coef, &eps)?;
    if t == 1 {
        return Ok(mean);
    }
    let noise = Tensor::randn(z_t.shape().to_vec(), rng);
    combine(1.0, &mean, sched.beta_tilde(t).sqrt(), &noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    /// `sigma_t = 0`.
    Deterministic,
    /// `sigma_t^2 = (1 - ab') / (1 - ab) * (1 - ab / ab')`, which equals
    /// `beta_tilde_t` for consecutive steps.
    Ddpm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub sigma_mode: SigmaMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 50, sigma_mode: SigmaMode::Deterministic }
    }
}

/// Strictly decreasing visited timesteps `floor(k T / S)` for `k = S..1`.
pub fn ddim_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::Config(format!("DDIM steps must lie in 1..={total}, got {num_steps}")));
    }
    Ok((1..=num_steps).rev().map(|k| k * total / num_steps).collect())
}

/// One DDIM update from `t` to `t_prev < t` given the predicted noise.
pub fn ddim_update<T: Element>(
    z_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sigma: f64,
    noise: Option<&Tensor<T>>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    // x0_hat = (z_t - sqrt(1 - ab) eps) / sqrt(ab)
    let x0 = combine(1.0 / ab.sqrt(), z_t, -(1.0 - ab).sqrt() / ab.sqrt(), eps_pred)?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let z = combine(ab_prev.sqrt(), &x0, dir, eps_pred)?;
    match noise {
        Some(e) if sigma > 0.0 => combine(1.0, &z, sigma, e),
        _ => Ok(z),
    }
}

fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: usize, mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::Deterministic => 0.0,
        SigmaMode::Ddpm => {
            let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
            ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt()
        }
    }
}

/// Run the DDIM sampler from `z_T ~ N(0, I)` drawn from `seed` and return `z_0`.
/// `shape` is the full batch shape; `labels` has one entry per batch element.
pub fn ddim_sample<T: Element, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    labels: &[ConditionLabel],
    shape: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::<T>::randn(shape.to_vec(), &mut rng);
    ddim_sample_from(model, z, labels, cfg, sched, &mut rng)
}

/// [`ddim_sample`] from a given `z_T`; `rng` feeds the stochastic mode only.
pub fn ddim_sample_from<T: Element, M: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z_t: Tensor<T>,
    labels: &[ConditionLabel],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let n = *z_t.shape().first().ok_or_else(|| Error::InvalidArgument("scalar latent".into()))?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {n}", labels.len())));
    }
    let steps = ddim_timesteps(sched.len(), cfg.num_steps)?;
    let mut z = z_t;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&z, &vec![t; n], labels)?;
        if eps.shape() != z.shape() {
            return Err(Error::InvalidArgument(format!("predictor returned {:?} for {:?}", eps.shape(), z.shape())));
        }
        let sigma = ddim_sigma(sched, t, t_prev, cfg.sigma_mode);
        let noise = (sigma > 0.0).then(|| Tensor::<T>::randn(z.shape().to_vec(), rng));
        z = ddim_update(&z, &eps, t, t_prev, sigma, noise.as_ref(), sched)?;
        if !z.all_finite() {
            return Err(Error::Numeric(format!("sampler produced non-finite values at t = {t}")));
        }
    }
    Ok(z)
}

/// Exact noise predictor for data concentrated on the single point `z*`:
/// `eps*(z_t, t) = (z_t - sqrt(ab_t) z*) / sqrt(1 - ab_t)`.
#[derive(Clone, Debug)]
pub struct PointMassOracle<'a, T: Element> {
    pub target: Tensor<T>,
    pub sched: &'a NoiseSchedule,
}

impl<T: Element> NoisePredictor<T> for PointMassOracle<'_, T> {
    fn predict(&self, z_t: &Tensor<T>, ts: &[usize], _labels: &[ConditionLabel]) -> Result<Tensor<T>> {
        let per = self.target.len();
        if z_t.len() != per * ts.len() {
            return Err(Error::InvalidArgument("oracle batch does not match its target".into()));
        }
        let mut data = Vec::with_capacity(z_t.len());
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.sched.alpha_bar(t);
            let (a, s) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
            data.extend(z_t.data()[i * per..(i + 1) * per].iter().zip(self.target.data()).map(|(&z, &x)| (z - a * x) / s));
        }
        Ok(Tensor::from_vec(z_t.shape().to_vec(), data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        // Independent product of the interpolated factors.
        let direct: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        assert!((s.alpha_bar(1000) / 4.0e-5 - 1.0).abs() < 0.2, "{}", s.alpha_bar(1000));
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!(s.beta(1) < s.beta(1000));
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
        }
        assert!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.01, 1.0).is_err());
    }

    #[test]
    fn timestep_subsequences() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_timesteps(10, 0).is_err());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn marginal_out_of_range() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let z = Tensor::<f64>::zeros([1, 2]);
        assert!(forward_marginal(&z, 0, &z, &s).is_err());
        assert!(forward_marginal(&z, 11, &z, &s).is_err());
        let zero_noise = forward_marginal(&Tensor::full([1, 2], 2.0), 5, &z, &s).unwrap();
        assert!((zero_noise.data()[0] - 2.0 * s.alpha_bar(5).sqrt()).abs() < 1e-15);
    }
}

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments; one `m`/`v` buffer per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { config, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter set. The effective decay ramps
/// up as `min(decay, (1 + n) / (10 + n))` so early updates are not dominated
/// by the initialization.
#[derive(Clone, Debug)]
pub struct Ema<T: Element = f32> {
    pub decay: f64,
    updates: u64,
    shadow: ParamStore<T>,
}

impl<T: Element> Ema<T> {
    pub fn new(decay: f64, params: &ParamStore<T>) -> Self {
        Self { decay, updates: 0, shadow: params.clone() }
    }

    pub fn update(&mut self, params: &ParamStore<T>) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = T::from_f64(self.decay.min((1.0 + n) / (10.0 + n)));
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = d * *a + (T::one() - d) * b;
            }
        }
    }

    pub fn averaged(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn into_averaged(self) -> ParamStore<T> {
        self.shadow
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec([vals.len()], vals).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(vec![0.3, -1.2, 5.0]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros([3])]).unwrap();
        assert_eq!(p.tensors(), before.tensors());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(vec![1.0, 1.0, 1.0]);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut adam = Adam::new(cfg, &p);
        let g = Tensor::from_vec([3], vec![0.5, -3.0, 1e-3]).unwrap();
        adam.step(&mut p, &[g.clone()]).unwrap();
        for (w, gi) in p.tensors()[0].data().iter().zip(g.data()) {
            let step = 1.0 - w;
            // m_hat / sqrt(v_hat) = g / |g| up to eps.
            assert!((step - 0.01 * gi.signum()).abs() < 1e-6, "{step}");
        }
    }

    #[test]
    fn bias_corrected_first_moment_equals_gradient_at_t1() {
        let mut p = store(vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = Tensor::from_vec([2], vec![0.7, -0.2]).unwrap();
        adam.step(&mut p, &[g.clone()]).unwrap();
        for (m, gi) in adam.first_moment(0).iter().zip(g.data()) {
            let mhat = m / (1.0 - 0.9);
            assert!((mhat - gi).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::zeros([3])]).is_err());
    }

    #[test]
    fn ema_tracks_a_constant_and_warms_up() {
        let mut p = store(vec![0.0]);
        let mut ema = Ema::new(0.9, &p);
        p.tensors_mut()[0].data_mut()[0] = 1.0;
        ema.update(&p);
        // First update uses decay 2/11.
        assert!((ema.averaged().tensors()[0].data()[0] - 9.0 / 11.0).abs() < 1e-12);
        for _ in 0..400 {
            ema.update(&p);
        }
        assert!((ema.averaged().tensors()[0].data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::<f64>::from_vec([2], vec![3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }
}

//! Convolutional VAE compressing `(1, S, S)` images to `(C, S/4, S/4)` latents.

use lphom_tensor::{clip_grad_norm, Adam, AdamConfig, Bound, Element, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ResBlock, Upconv};
use crate::train::{Batcher, LossLog};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Feature widths at full, half and quarter resolution.
    pub channels: [usize; 3],
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { image_size: 64, latent_channels: 4, channels: [16, 32, 32] }
    }
}

impl VaeConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn latent_shape(&self, n: usize) -> [usize; 4] {
        [n, self.latent_channels, self.latent_size(), self.latent_size()]
    }
}

/// Diagonal Gaussian `q(z | x) = N(mu, exp(logvar))`.
#[derive(Clone, Debug)]
pub struct LatentDistribution<T: Element = f32> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Element> LatentDistribution<T> {
    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        let eps = Tensor::<T>::randn(self.mu.shape().to_vec(), rng);
        self.reparameterize(&eps)
    }

    pub fn reparameterize(&self, eps: &Tensor<T>) -> Tensor<T> {
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.logvar.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| {
                let lv = lv.as_f64().clamp(LOGVAR_MIN, LOGVAR_MAX);
                m + T::from_f64((0.5 * lv).exp()) * e
            })
            .collect();
        Tensor::from_vec(self.mu.shape().to_vec(), data).expect("same shape")
    }
}

/// Batch mean of `0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kl_divergence<T: Element>(dist: &LatentDistribution<T>) -> f64 {
    let n = dist.mu.shape().first().copied().unwrap_or(1).max(1);
    let total: f64 = dist
        .mu
        .data()
        .iter()
        .zip(dist.logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            m * m + lv.exp() - 1.0 - lv
        })
        .sum();
    0.5 * total / n as f64
}

#[derive(Clone, Debug)]
struct Down {
    norm: GroupNorm,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
struct Up {
    norm: GroupNorm,
    conv: Upconv,
}

#[derive(Clone, Debug)]
pub struct Vae<T: Element = f32> {
    pub config: VaeConfig,
    pub params: ParamStore<T>,
    enc_in: Conv2d,
    enc_down: [Down; 2],
    enc_mid: ResBlock,
    enc_out: Down,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_up: [Up; 2],
    dec_out: Down,
}

fn norm_act<T: Element>(tape: &mut Tape<T>, p: &Bound, norm: &GroupNorm, x: Var) -> Result<Var> {
    let h = norm.forward(tape, p, x)?;
    Ok(tape.silu(h)?)
}

impl<T: Element> Vae<T> {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        if config.image_size < 8 || config.image_size % 4 != 0 {
            return Err(Error::Config(format!("VAE image size must be a multiple of 4, got {}", config.image_size)));
        }
        if config.channels.iter().any(|c| c % crate::nn::GROUPS != 0) || config.latent_channels == 0 {
            return Err(Error::Config(format!("VAE channels must be multiples of 8, got {:?}", config.channels)));
        }
        let [c0, c1, c2] = config.channels;
        let lc = config.latent_channels;
        let s = &mut ParamStore::new();
        let enc_in = Conv2d::same(s, "enc.in", 1, c0, rng);
        let enc_down = [
            Down { norm: GroupNorm::new(s, "enc.down0.norm", c0), conv: Conv2d::new(s, "enc.down0.conv", c0, c1, 3, 2, 1, rng) },
            Down { norm: GroupNorm::new(s, "enc.down1.norm", c1), conv: Conv2d::new(s, "enc.down1.conv", c1, c2, 3, 2, 1, rng) },
        ];
        let enc_mid = ResBlock::new(s, "enc.mid", c2, c2, None, rng);
        let enc_out = Down { norm: GroupNorm::new(s, "enc.out.norm", c2), conv: Conv2d::same(s, "enc.out.conv", c2, 2 * lc, rng) };
        let dec_in = Conv2d::same(s, "dec.in", lc, c2, rng);
        let dec_mid = ResBlock::new(s, "dec.mid", c2, c2, None, rng);
        let dec_up = [
            Up { norm: GroupNorm::new(s, "dec.up0.norm", c2), conv: Upconv::new(s, "dec.up0.conv", c2, c1, rng) },
            Up { norm: GroupNorm::new(s, "dec.up1.norm", c1), conv: Upconv::new(s, "dec.up1.conv", c1, c0, rng) },
        ];
        let dec_out = Down { norm: GroupNorm::new(s, "dec.out.norm", c0), conv: Conv2d::same(s, "dec.out.conv", c0, 1, rng) };
        Ok(Self {
            config,
            params: std::mem::take(s),
            enc_in,
            enc_down,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_up,
            dec_out,
        })
    }

    /// Same architecture, parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> Vae<U> {
        Vae {
            config: self.config.clone(),
            params: self.params.cast(),
            enc_in: self.enc_in.clone(),
            enc_down: self.enc_down.clone(),
            enc_mid: self.enc_mid.clone(),
            enc_out: self.enc_out.clone(),
            dec_in: self.dec_in.clone(),
            dec_mid: self.dec_mid.clone(),
            dec_up: self.dec_up.clone(),
            dec_out: self.dec_out.clone(),
        }
    }

    fn check_shape(&self, shape: &[usize], expect: [usize; 3], what: &str) -> Result<()> {
        if shape.len() != 4 || shape[0] == 0 || shape[1..] != expect {
            return Err(Error::InvalidArgument(format!(
                "{what}: expected shape (N, {}, {}, {}), got {shape:?}",
                expect[0], expect[1], expect[2]
            )));
        }
        Ok(())
    }

    /// Records the encoder; returns `(mu, clamped logvar)`.
    pub fn encode_on(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let s = self.config.image_size;
        self.check_shape(tape.shape(x), [1, s, s], "encode")?;
        let mut h = self.enc_in.forward(tape, p, x)?;
        for d in &self.enc_down {
            let a = norm_act(tape, p, &d.norm, h)?;
            h = d.conv.forward(tape, p, a)?;
        }
        h = self.enc_mid.forward(tape, p, h, None)?;
        let a = norm_act(tape, p, &self.enc_out.norm, h)?;
        let stats = self.enc_out.conv.forward(tape, p, a)?;
        let lc = self.config.latent_channels;
        let mu = tape.narrow_channels(stats, 0, lc)?;
        let logvar = tape.narrow_channels(stats, lc, lc)?;
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    /// Records the decoder; output passes through a sigmoid.
    pub fn decode_on(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let ls = self.config.latent_size();
        self.check_shape(tape.shape(z), [self.config.latent_channels, ls, ls], "decode")?;
        let mut h = self.dec_in.forward(tape, p, z)?;
        h = self.dec_mid.forward(tape, p, h, None)?;
        for u in &self.dec_up {
            let a = norm_act(tape, p, &u.norm, h)?;
            h = u.conv.forward(tape, p, a)?;
        }
        let a = norm_act(tape, p, &self.dec_out.norm, h)?;
        let logits = self.dec_out.conv.forward(tape, p, a)?;
        Ok(tape.sigmoid(logits)?)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentDistribution<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_on(&mut tape, &p, xv)?;
        Ok(LatentDistribution { mu: tape.value(mu).clone(), logvar: tape.value(logvar).clone() })
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.decode_on(&mut tape, &p, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Records `mse(x, decode(mu + sigma * eps)) + beta * KL`; returns
    /// `(loss, mse, kl)`.
    pub fn loss_on(&self, tape: &mut Tape<T>, p: &Bound, x: Var, eps: Var, beta: f64) -> Result<(Var, Var, Var)> {
        let n = tape.shape(x)[0];
        let (mu, logvar) = self.encode_on(tape, p, x)?;
        let half = tape.scale(logvar, 0.5)?;
        let sigma = tape.exp(half)?;
        let noise = tape.mul(sigma, eps)?;
        let z = tape.add(mu, noise)?;
        let recon = self.decode_on(tape, p, z)?;
        let mse = tape.mse(recon, x)?;

        let mu2 = tape.square(mu)?;
        let var = tape.exp(logvar)?;
        let t = tape.add(mu2, var)?;
        let t = tape.sub(t, logvar)?;
        let t = tape.add_scalar(t, -1.0)?;
        let total = tape.sum(t)?;
        let kl = tape.scale(total, 0.5 / n as f64)?;

        let weighted = tape.scale(kl, beta)?;
        let loss = tape.add(mse, weighted)?;
        Ok((loss, mse, kl))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 16, lr: 1e-3, beta: 1e-6, grad_clip: 1.0, seed: 0 }
    }
}

/// Train on `(1, S, S)` images; returns the model and the per-step loss.
pub fn train_vae(
    model_config: VaeConfig,
    images: &[Tensor<f32>],
    cfg: &VaeTrainConfig,
    init_seed: u64,
) -> Result<(Vae<f32>, LossLog)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("VAE training set is empty".into()));
    }
    let mut vae = Vae::new(model_config, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &vae.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(images.len(), cfg.batch_size);
    let mut log = LossLog::new(&["loss", "mse", "kl"]);
    for step in 0..cfg.steps {
        let idx = batcher.next(&mut rng);
        let batch = Tensor::stack(&idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
        let lshape = vae.config.latent_shape(idx.len());
        let eps = Tensor::randn(lshape.to_vec(), &mut rng);
        let mut tape = Tape::new();
        let p = vae.params.bind(&mut tape, true);
        let x = tape.constant(batch);
        let e = tape.constant(eps);
        let (loss, mse, kl) = vae.loss_on(&mut tape, &p, x, e, cfg.beta).map_err(numeric("VAE", step))?;
        let row = [tape.value(loss).item() as f64, tape.value(mse).item() as f64, tape.value(kl).item() as f64];
        let mut grads = tape.backward(loss)?;
        let mut g = p.gradients(&mut grads)?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut g, cfg.grad_clip);
        }
        adam.step(&mut vae.params, &g)?;
        log.push(step, &row);
    }
    Ok((vae, log))
}

/// Wraps non-finite failures during training as numeric errors.
pub(crate) fn numeric(stage: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(lphom_tensor::TensorError::NonFinite { op }) => {
            Error::Numeric(format!("{stage} training diverged at step {step} (non-finite value in {op})"))
        }
        other => other,
    }
}

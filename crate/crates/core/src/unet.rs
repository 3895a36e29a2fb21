//! Conditional noise predictor: a small U-Net over latents with sinusoidal
//! timestep features and summed pathology + modality embeddings.

use lphom_tensor::{clip_grad_norm, Adam, AdamConfig, Bound, Ema, Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{noise_batch, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::label::{ConditionLabel, Modality, Pathology};
use crate::nn::{Conv2d, GroupNorm, Linear, ResBlock};
use crate::train::{Batcher, LossLog};
use crate::vae::numeric;

/// Sinusoidal features of `t / T`: `d / 2` sines then `d / 2` cosines with
/// frequencies spaced geometrically from 1 to 1e4.
pub fn embed_timestep(t: usize, total: usize, d: usize) -> Result<Vec<f64>> {
    if t == 0 || t > total {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={total}")));
    }
    if d < 2 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width must be even and >= 2, got {d}")));
    }
    let half = d / 2;
    let s = t as f64 / total as f64;
    let freq = |i: usize| if half == 1 { 1.0 } else { 1e4f64.powf(i as f64 / (half - 1) as f64) };
    let mut out: Vec<f64> = (0..half).map(|i| (s * freq(i)).sin()).collect();
    out.extend((0..half).map(|i| (s * freq(i)).cos()));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Width per resolution level; each level after the first halves the size.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub emb_dim: usize,
    pub timesteps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { latent_channels: 4, latent_size: 16, channels: vec![32, 64, 128], blocks_per_level: 2, emb_dim: 64, timesteps: 1000 }
    }
}

#[derive(Clone, Debug)]
pub struct UNet<T: Element = f32> {
    pub config: UNetConfig,
    pub params: ParamStore<T>,
    pathology_table: ParamId,
    modality_table: ParamId,
    time_mlp: [Linear; 2],
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    up: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl<T: Element> UNet<T> {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        let levels = config.channels.len();
        if levels == 0 || config.blocks_per_level == 0 {
            return Err(Error::Config("U-Net needs at least one level and one block per level".into()));
        }
        if config.latent_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "latent size {} not divisible by 2^{} for {levels} levels",
                config.latent_size,
                levels - 1
            )));
        }
        if config.channels.iter().any(|c| c % crate::nn::GROUPS != 0) {
            return Err(Error::Config(format!("U-Net channels must be multiples of 8, got {:?}", config.channels)));
        }
        let d = config.emb_dim;
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("embedding width must be even, got {d}")));
        }
        let s = &mut ParamStore::new();
        let pathology_table = s.add("cond.pathology", Tensor::randn([Pathology::ALL.len(), d], rng));
        let modality_table = s.add("cond.modality", Tensor::randn([Modality::ALL.len(), d], rng));
        let time_mlp = [Linear::new(s, "time.0", d, d, rng), Linear::new(s, "time.1", d, d, rng)];
        let ch = &config.channels;
        let conv_in = Conv2d::same(s, "conv_in", config.latent_channels, ch[0], rng);
        let mut down = Vec::new();
        let mut cin = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            let blocks = (0..config.blocks_per_level)
                .map(|b| {
                    let block = ResBlock::new(s, &format!("down{l}.{b}"), cin, c, Some(d), rng);
                    cin = c;
                    block
                })
                .collect();
            down.push(blocks);
        }
        let mut up = Vec::new();
        for l in (0..levels - 1).rev() {
            let c = ch[l];
            let blocks = (0..config.blocks_per_level)
                .map(|b| {
                    let input = if b == 0 { cin + c } else { c };
                    ResBlock::new(s, &format!("up{l}.{b}"), input, c, Some(d), rng)
                })
                .collect();
            cin = c;
            up.push(blocks);
        }
        let out_norm = GroupNorm::new(s, "out.norm", ch[0]);
        let conv_out = Conv2d::same(s, "out.conv", ch[0], config.latent_channels, rng);
        Ok(Self {
            config,
            params: std::mem::take(s),
            pathology_table,
            modality_table,
            time_mlp,
            conv_in,
            down,
            up,
            out_norm,
            conv_out,
        })
    }

    pub fn cast<U: Element>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
            pathology_table: self.pathology_table,
            modality_table: self.modality_table,
            time_mlp: self.time_mlp.clone(),
            conv_in: self.conv_in.clone(),
            down: self.down.clone(),
            up: self.up.clone(),
            out_norm: self.out_norm.clone(),
            conv_out: self.conv_out.clone(),
        }
    }

    /// Parameter ids of every per-block embedding projection weight.
    pub fn embedding_projections(&self) -> Vec<ParamId> {
        self.down.iter().chain(&self.up).flatten().filter_map(|b| b.emb_proj.as_ref().map(|l| l.weight)).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.down.iter().chain(&self.up).map(Vec::len).sum()
    }

    /// Activated conditioning vector `SiLU(mlp(time) + e_pathology + e_modality)`.
    fn embedding(&self, tape: &mut Tape<T>, p: &Bound, ts: &[usize], labels: &[ConditionLabel]) -> Result<Var> {
        let d = self.config.emb_dim;
        let mut feats = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            feats.extend(embed_timestep(t, self.config.timesteps, d)?.into_iter().map(T::from_f64));
        }
        let tv = tape.constant(Tensor::from_vec([ts.len(), d], feats)?);
        let h = self.time_mlp[0].forward(tape, p, tv)?;
        let h = tape.silu(h)?;
        let temb = self.time_mlp[1].forward(tape, p, h)?;
        let pi: Vec<usize> = labels.iter().map(|l| l.pathology.index()).collect();
        let mi: Vec<usize> = labels.iter().map(|l| l.modality.index()).collect();
        let pe = tape.embedding(p.var(self.pathology_table), &pi)?;
        let me = tape.embedding(p.var(self.modality_table), &mi)?;
        let cond = tape.add(pe, me)?;
        let e = tape.add(temb, cond)?;
        Ok(tape.silu(e)?)
    }

    /// Records `eps_theta(z_t, t, c)` for a batch.
    pub fn forward_on(&self, tape: &mut Tape<T>, p: &Bound, z: Var, ts: &[usize], labels: &[ConditionLabel]) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(z).to_vec();
        let expect = [c.latent_channels, c.latent_size, c.latent_size];
        if shape.len() != 4 || shape[1..] != expect || shape[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "noise predictor expects (N, {}, {}, {}), got {shape:?}",
                expect[0], expect[1], expect[2]
            )));
        }
        if ts.len() != shape[0] || labels.len() != shape[0] {
            return Err(Error::InvalidArgument(format!(
                "batch of {} with {} timesteps and {} labels",
                shape[0],
                ts.len(),
                labels.len()
            )));
        }
        let emb = self.embedding(tape, p, ts, labels)?;
        let mut h = self.conv_in.forward(tape, p, z)?;
        let mut skips = Vec::new();
        let levels = self.down.len();
        for (l, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(tape, p, h, Some(emb))?;
            }
            if l + 1 < levels {
                skips.push(h);
                h = tape.avg_pool2(h)?;
            }
        }
        for blocks in &self.up {
            h = tape.upsample2(h)?;
            let skip = skips.pop().expect("one skip per upsampling level");
            h = tape.concat_channels(&[h, skip])?;
            for b in blocks {
                h = b.forward(tape, p, h, Some(emb))?;
            }
        }
        let h = self.out_norm.forward(tape, p, h)?;
        let h = tape.silu(h)?;
        self.conv_out.forward(tape, p, h)
    }

    /// Records `mse(eps_theta(z_t, t, c), eps)`.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z_t: &Tensor<T>,
        ts: &[usize],
        labels: &[ConditionLabel],
        eps: &Tensor<T>,
    ) -> Result<Var> {
        let z = tape.constant(z_t.clone());
        let target = tape.constant(eps.clone());
        let pred = self.forward_on(tape, p, z, ts, labels)?;
        Ok(tape.mse(pred, target)?)
    }
}

impl<T: Element> NoisePredictor<T> for UNet<T> {
    fn predict(&self, z_t: &Tensor<T>, ts: &[usize], labels: &[ConditionLabel]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(z_t.clone());
        let out = self.forward_on(&mut tape, &p, z, ts, labels)?;
        Ok(tape.value(out).clone())
    }
}

/// Convenience wrapper for a single timestep shared by the whole batch.
pub fn predict_noise<T: Element>(model: &UNet<T>, z_t: &Tensor<T>, t: usize, label: ConditionLabel) -> Result<Tensor<T>> {
    let n = *z_t.shape().first().ok_or_else(|| Error::InvalidArgument("scalar latent".into()))?;
    model.predict(z_t, &vec![t; n], &vec![label; n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Decay of the returned weight average; 0 returns the raw weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for UNetTrainConfig {
    fn default() -> Self {
        Self { steps: 12000, batch_size: 16, lr: 1e-3, grad_clip: 1.0, ema_decay: 0.999, seed: 0 }
    }
}

/// Train on scaled latents `(C, h, w)` with one label each.
pub fn train_unet(
    model_config: UNetConfig,
    latents: &[Tensor<f32>],
    labels: &[ConditionLabel],
    sched: &NoiseSchedule,
    cfg: &UNetTrainConfig,
    init_seed: u64,
) -> Result<(UNet<f32>, LossLog)> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("diffusion training set is empty".into()));
    }
    if latents.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} latents but {} labels", latents.len(), labels.len())));
    }
    let mut unet = UNet::new(model_config, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &unet.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(latents.len(), cfg.batch_size);
    let mut log = LossLog::new(&["loss"]);
    let mut ema = (cfg.ema_decay > 0.0).then(|| Ema::new(cfg.ema_decay, &unet.params));
    for step in 0..cfg.steps {
        let idx = batcher.next(&mut rng);
        let z0 = Tensor::stack(&idx.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>())?;
        let batch_labels: Vec<ConditionLabel> = idx.iter().map(|&i| labels[i]).collect();
        let nb = noise_batch(&z0, sched, &mut rng)?;
        let mut tape = Tape::new();
        let p = unet.params.bind(&mut tape, true);
        let loss = unet.loss_on(&mut tape, &p, &nb.z_t, &nb.ts, &batch_labels, &nb.eps).map_err(numeric("diffusion", step))?;
        let value = tape.value(loss).item() as f64;
        let mut grads = tape.backward(loss)?;
        let mut g = p.gradients(&mut grads)?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut g, cfg.grad_clip);
        }
        adam.step(&mut unet.params, &g)?;
        if let Some(ema) = ema.as_mut() {
            ema.update(&unet.params);
        }
        log.push(step, &[value]);
    }
    if let Some(ema) = ema {
        unet.params = ema.into_averaged();
    }
    Ok((unet, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embedding_properties() {
        let d = 8;
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| embed_timestep(t, 1000, d).unwrap()).collect();
        for e in &all {
            assert_eq!(e.len(), d);
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i] != all[j], "collision at t = {} and {}", i + 1, j + 1);
            }
        }
        assert_eq!(embed_timestep(17, 1000, 64).unwrap(), embed_timestep(17, 1000, 64).unwrap());
        assert!(embed_timestep(0, 1000, 8).is_err());
        assert!(embed_timestep(1001, 1000, 8).is_err());
    }

    #[test]
    fn shapes_for_batch_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = UNetConfig { channels: vec![8, 16], emb_dim: 8, latent_size: 8, ..Default::default() };
        let unet = UNet::<f32>::new(cfg, &mut rng).unwrap();
        for n in [1, 4] {
            let z = Tensor::randn([n, 4, 8, 8], &mut rng);
            let label = ConditionLabel::new(Pathology::Sclerosis, Modality::Flair);
            assert_eq!(predict_noise(&unet, &z, 500, label).unwrap().shape(), z.shape());
        }
        assert!(predict_noise(&unet, &Tensor::zeros([1, 3, 8, 8]), 5, ConditionLabel::from_cell(0).unwrap()).is_err());
        let bad = UNetConfig { latent_size: 6, channels: vec![8, 16, 32], ..Default::default() };
        assert!(UNet::<f32>::new(bad, &mut rng).is_err());
    }
}

//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use lphom_core::diffusion::{ddim_sample, forward_marginal, forward_step, make_schedule, NoiseSchedule, PointMassOracle, SamplerConfig, ScheduleKind};
use lphom_core::label::{ConditionLabel, Modality, Pathology};
use lphom_core::metrics::{fid, matrix_sqrt_psd, ms_ssim, ssim, FeatureStats, GrayImage, Matrix, SsimParams};
use lphom_core::phantom::generate_phantom;
use lphom_core::unet::{UNet, UNetConfig};
use lphom_core::vae::{Vae, VaeConfig};
use lphom_tensor::check::{check_gradients, GradCheckOptions, GradCheckReport};
use lphom_tensor::{Bound, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
}

fn store_inputs(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.tensors().to_vec()
}

pub fn tiny_unet_config() -> UNetConfig {
    UNetConfig { latent_channels: 4, latent_size: 4, channels: vec![8, 16], blocks_per_level: 2, emb_dim: 8, timesteps: 1000 }
}

/// Epsilon loss of a tiny conditional U-Net against finite differences with
/// respect to every parameter entry.
pub fn unet_chain_report() -> GradCheckReport {
    let mut r = rng(100);
    let unet = UNet::<f64>::new(tiny_unet_config(), &mut r).unwrap();
    let z = Tensor::<f64>::randn([2, 4, 4, 4], &mut r);
    let eps = Tensor::<f64>::randn([2, 4, 4, 4], &mut r);
    let ts = [37, 810];
    let labels = [
        ConditionLabel::new(Pathology::Glioblastoma, Modality::Flair),
        ConditionLabel::new(Pathology::Dementia, Modality::T1w),
    ];
    check_gradients(
        &store_inputs(&unet.params),
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(unet.loss_on(tape, &p, &z, &ts, &labels, &eps).map_err(|e| match e {
                lphom_core::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })?)
        },
        GradCheckOptions::default(),
    )
    .unwrap()
}

/// Reconstruction + KL loss of a tiny VAE with respect to every parameter.
pub fn vae_chain_report() -> GradCheckReport {
    let mut r = rng(101);
    let cfg = VaeConfig { image_size: 8, latent_channels: 2, channels: [8, 8, 8] };
    let vae = Vae::<f64>::new(cfg, &mut r).unwrap();
    let x = Tensor::<f64>::uniform([2, 1, 8, 8], 0.0, 1.0, &mut r);
    let eps = Tensor::<f64>::randn([2, 2, 2, 2], &mut r);
    check_gradients(
        &store_inputs(&vae.params),
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let xv = tape.constant(x.clone());
            let ev = tape.constant(eps.clone());
            let (loss, _, _) = vae.loss_on(tape, &p, xv, ev, 0.5).map_err(|e| match e {
                lphom_core::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            Ok(loss)
        },
        GradCheckOptions::default(),
    )
    .unwrap()
}

/// Largest normalized deviations of sampled `z_t` from
/// `N(sqrt(ab) z0, (1 - ab) I)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardLaw {
    /// `|mean - sqrt(ab) z0| / (sigma / sqrt(n))`; 3 is the 3-sigma bound.
    pub mean_z: f64,
    /// `|var / (1 - ab) - 1|`.
    pub var_rel: f64,
}

impl ForwardLaw {
    fn merge(self, o: ForwardLaw) -> ForwardLaw {
        ForwardLaw { mean_z: self.mean_z.max(o.mean_z), var_rel: self.var_rel.max(o.var_rel) }
    }

    pub fn ok(&self) -> bool {
        self.mean_z <= 3.0 && self.var_rel <= 0.05
    }
}

fn law(samples: &Tensor<f64>, z0: &[f64], ab: f64) -> ForwardLaw {
    let d = z0.len();
    let n = samples.len() / d;
    let mut out = ForwardLaw::default();
    for (j, &z) in z0.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| samples.data()[i * d + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma = (1.0 - ab).sqrt();
        out = out.merge(ForwardLaw { mean_z: (mean - ab.sqrt() * z).abs() / (sigma / (n as f64).sqrt()), var_rel: (var / (1.0 - ab) - 1.0).abs() });
    }
    out
}

/// `(closed form, chained single steps)` Monte Carlo over `draws` samples at
/// several timesteps.
pub fn forward_process_mc(draws: usize) -> (ForwardLaw, ForwardLaw) {
    let sched = default_schedule();
    let z0 = [1.5, -0.7, 0.2, 2.0];
    let d = z0.len();
    let batch = Tensor::from_vec([draws, d], (0..draws).flat_map(|_| z0).collect()).unwrap();
    let checkpoints = [1usize, 10, 100, 500, 1000];
    let mut r = rng(102);
    let mut closed = ForwardLaw::default();
    for &t in &checkpoints {
        let eps = Tensor::<f64>::randn([draws, d], &mut r);
        closed = closed.merge(law(&forward_marginal(&batch, t, &eps, &sched).unwrap(), &z0, sched.alpha_bar(t)));
    }
    let mut chained = ForwardLaw::default();
    let mut z = batch;
    for t in 1..=sched.len() {
        let eps = Tensor::<f64>::randn([draws, d], &mut r);
        z = forward_step(&z, t, &eps, &sched).unwrap();
        if checkpoints.contains(&t) {
            chained = chained.merge(law(&z, &z0, sched.alpha_bar(t)));
        }
    }
    (closed, chained)
}

/// Largest relative error of deterministic DDIM with the exact point-mass
/// predictor over 5 random targets and the given step counts.
pub fn point_mass_ddim(steps: &[usize]) -> f64 {
    let sched = default_schedule();
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for k in 0..5 {
        let target = Tensor::<f64>::randn([1, 4, 8, 8], &mut r).map(|v| 2.0 * v);
        let oracle = PointMassOracle { target: target.clone(), sched: &sched };
        for &s in steps {
            let label = ConditionLabel::from_cell(k).unwrap();
            let cfg = SamplerConfig { num_steps: s, ..SamplerConfig::default() };
            let z = ddim_sample(&oracle, &[label], &[1, 4, 8, 8], &cfg, &sched, 1000 + k as u64).unwrap();
            let err: f64 = z.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = target.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
    }
    worst
}

fn gaussian_rows(n: usize, shift: &[f64], r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| shift.iter().map(|m| m + r.sample::<f64, _>(StandardNormal)).collect()).collect()
}

pub fn random_psd(d: usize, r: &mut ChaCha8Rng) -> Matrix {
    let b: Vec<f64> = (0..d * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let b = Matrix { n: d, data: b };
    b.matmul(&b.transpose()).symmetrized()
}

#[derive(Clone, Copy, Debug)]
pub struct MetricOracles {
    pub fid_self: f64,
    /// `|fid / |m|^2 - 1|` at 10^4 samples.
    pub fid_shift_rel: f64,
    pub fid_asymmetry: f64,
    /// Worst `|sqrt(A)^2 - A|_F / |A|_F` over 100 matrices.
    pub sqrt_rel: f64,
    pub ms_ssim_self: f64,
    pub ssim_asymmetry: f64,
}

impl MetricOracles {
    pub fn ok(&self) -> bool {
        self.fid_self.abs() <= 1e-6
            && self.fid_shift_rel <= 0.05
            && self.fid_asymmetry <= 1e-6
            && self.sqrt_rel <= 1e-6
            && self.ms_ssim_self == 1.0
            && self.ssim_asymmetry == 0.0
    }
}

pub fn phantom_gray(seed: u64, cell: usize) -> GrayImage {
    let t = generate_phantom(seed, ConditionLabel::from_cell(cell).unwrap(), 64).unwrap();
    GrayImage::from_f32(64, 64, t.data()).unwrap()
}

pub fn metric_oracles() -> MetricOracles {
    let mut r = rng(104);
    let a = FeatureStats::from_features(&gaussian_rows(500, &[0.0; 16], &mut r)).unwrap();
    let a2 = a.clone();
    let m = [1.0, -1.0, 0.5, 1.5];
    let shift: f64 = m.iter().map(|v| v * v).sum();
    let p = FeatureStats::from_features(&gaussian_rows(10_000, &[0.0; 4], &mut r)).unwrap();
    let q = FeatureStats::from_features(&gaussian_rows(10_000, &m, &mut r)).unwrap();
    let fpq = fid(&p, &q).unwrap();

    let mut sqrt_rel = 0.0f64;
    for i in 0..100 {
        let d = [4, 16, 64][i % 3];
        let a = random_psd(d, &mut r);
        let root = matrix_sqrt_psd(&a).unwrap();
        sqrt_rel = sqrt_rel.max(root.matmul(&root).sub(&a).frobenius() / a.frobenius());
    }

    let params = SsimParams::default();
    let (x, y) = (phantom_gray(1, 0), phantom_gray(2, 7));
    MetricOracles {
        fid_self: fid(&a, &a2).unwrap(),
        fid_shift_rel: (fpq / shift - 1.0).abs(),
        fid_asymmetry: (fpq - fid(&q, &p).unwrap()).abs(),
        sqrt_rel,
        ms_ssim_self: ms_ssim(&x, &x, &params).unwrap(),
        ssim_asymmetry: (ssim(&x, &y, &params).unwrap() - ssim(&y, &x, &params).unwrap()).abs(),
    }
}

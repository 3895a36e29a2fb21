mod common;

use common::{rng, tiny_unet_config};
use lphom_core::diffusion::{training_loss, NoisePredictor};
use lphom_core::label::{ConditionLabel, Modality, Pathology};
use lphom_core::unet::{predict_noise, UNet, UNetConfig};
use lphom_core::vae::{kl_divergence, train_vae, LatentDistribution, Vae, VaeConfig, VaeTrainConfig};
use lphom_tensor::{Tape, Tensor};

#[test]
fn unet_full_chain_gradients() {
    let r = common::unet_chain_report();
    assert!(r.checked > 1000);
    assert!(r.max_rel_err <= 1e-3, "max rel err {:.3e} (input {}, index {})", r.max_rel_err, r.worst_input, r.worst_index);
}

#[test]
fn vae_combined_loss_gradients() {
    let r = common::vae_chain_report();
    assert!(r.max_rel_err <= 1e-3, "max rel err {:.3e} (input {}, index {})", r.max_rel_err, r.worst_input, r.worst_index);
}

#[test]
fn vae_shapes_range_and_determinism() {
    let vae = Vae::<f32>::new(VaeConfig::default(), &mut rng(1)).unwrap();
    let x = Tensor::<f32>::uniform([2, 1, 64, 64], 0.0, 1.0, &mut rng(2));
    let d = vae.encode(&x).unwrap();
    assert_eq!(d.mu.shape(), &[2, 4, 16, 16]);
    assert_eq!(d.logvar.shape(), &[2, 4, 16, 16]);
    assert!(d.mu.all_finite() && d.logvar.all_finite());
    assert_eq!(vae.encode(&x).unwrap().mu, d.mu);
    let y = vae.decode(&d.mu).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(vae.encode(&Tensor::zeros([2, 1, 32, 64])).is_err());
    assert!(vae.decode(&Tensor::zeros([2, 3, 16, 16])).is_err());
}

#[test]
fn kl_closed_forms() {
    let zeros = LatentDistribution::<f64> { mu: Tensor::zeros([1, 4, 2, 2]), logvar: Tensor::zeros([1, 4, 2, 2]) };
    assert_eq!(kl_divergence(&zeros), 0.0);
    let one = LatentDistribution::<f64> { mu: Tensor::full([1, 1], 1.0), logvar: Tensor::zeros([1, 1]) };
    assert!((kl_divergence(&one) - 0.5).abs() < 1e-15);
    let mut r = rng(3);
    for _ in 0..20 {
        let d = LatentDistribution::<f64> { mu: Tensor::randn([3, 5], &mut r), logvar: Tensor::randn([3, 5], &mut r) };
        assert!(kl_divergence(&d) >= 0.0);
    }
    // Clamped log-variance makes sampling collapse onto the mean.
    let sharp = LatentDistribution::<f64> { mu: Tensor::randn([2, 3], &mut r), logvar: Tensor::full([2, 3], -1e4) };
    let s = sharp.sample(&mut r);
    assert!(s.max_abs_diff(&sharp.mu).unwrap() < 1e-6);
}

#[test]
fn vae_training_is_deterministic_and_reduces_loss() {
    let cfg = VaeConfig { image_size: 32, latent_channels: 4, channels: [8, 8, 8] };
    let images: Vec<Tensor<f32>> = (0..8)
        .map(|i| lphom_core::phantom::generate_phantom(i, ConditionLabel::from_cell(i as usize).unwrap(), 32).unwrap())
        .collect();
    let tc = VaeTrainConfig { steps: 60, batch_size: 4, seed: 5, ..VaeTrainConfig::default() };
    let (a, log_a) = train_vae(cfg.clone(), &images, &tc, 9).unwrap();
    let (b, log_b) = train_vae(cfg.clone(), &images, &tc, 9).unwrap();
    assert_eq!(log_a.to_csv(), log_b.to_csv());
    assert_eq!(a.params.tensors(), b.params.tensors());
    let loss = lphom_core::train::smooth(&log_a.column(0), 10);
    assert!(loss[loss.len() - 1] < loss[9]);
    let pure = VaeTrainConfig { beta: 0.0, steps: 3, ..tc.clone() };
    let (_, log) = train_vae(cfg.clone(), &images, &pure, 9).unwrap();
    assert!(log.rows.iter().all(|(_, r)| r[0] == r[1]));
    assert!(train_vae(cfg, &[], &tc, 9).is_err());
}

#[test]
fn unet_shapes_for_batch_sizes() {
    let unet = UNet::<f32>::new(UNetConfig::default(), &mut rng(4)).unwrap();
    let label = ConditionLabel::new(Pathology::Sclerosis, Modality::T2w);
    for n in [1, 4] {
        let z = Tensor::<f32>::randn([n, 4, 16, 16], &mut rng(5));
        let e = predict_noise(&unet, &z, 500, label).unwrap();
        assert_eq!(e.shape(), z.shape());
        assert_eq!(predict_noise(&unet, &z, 500, label).unwrap(), e);
    }
    assert!(predict_noise(&unet, &Tensor::zeros([1, 4, 8, 8]), 10, label).is_err());
    assert!(predict_noise(&unet, &Tensor::zeros([1, 3, 16, 16]), 10, label).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    let unet = UNet::<f32>::new(tiny_unet_config(), &mut rng(6)).unwrap();
    let mut r = rng(7);
    let z = Tensor::<f32>::randn([4, 4, 4, 4], &mut r);
    let eps = Tensor::<f32>::randn([4, 4, 4, 4], &mut r);
    let labels: Vec<ConditionLabel> = (0..4).map(|i| ConditionLabel::from_cell(i * 5 + i).unwrap()).collect();
    let mut tape = Tape::new();
    let p = unet.params.bind(&mut tape, true);
    let loss = unet.loss_on(&mut tape, &p, &z, &[3, 200, 640, 999], &labels, &eps).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let g = p.gradients(&mut grads).unwrap();
    for ((name, _), grad) in unet.params.iter().zip(&g) {
        assert!(grad.data().iter().any(|&v| v != 0.0), "no gradient reaches {name}");
    }
}

#[test]
fn conditioning_reaches_every_block() {
    let mut unet = UNet::<f32>::new(tiny_unet_config(), &mut rng(8)).unwrap();
    let projections = unet.embedding_projections();
    assert_eq!(projections.len(), unet.num_blocks());
    let z = Tensor::<f32>::randn([2, 4, 4, 4], &mut rng(9));
    let labels = [ConditionLabel::from_cell(0).unwrap(), ConditionLabel::from_cell(13).unwrap()];
    let before = unet.predict(&z, &[100, 100], &labels).unwrap();
    let other = unet.predict(&z, &[100, 100], &[labels[1], labels[0]]).unwrap();
    assert!(before.max_abs_diff(&other).unwrap() > 0.0);
    for &id in &projections {
        let shape = unet.params.get(id).shape().to_vec();
        unet.params.set(id, Tensor::zeros(shape)).unwrap();
        let after = unet.predict(&z, &[100, 100], &labels).unwrap();
        assert!(after.max_abs_diff(&before).unwrap() > 0.0, "zeroing {} had no effect", unet.params.name(id));
    }
}

#[test]
fn untrained_loss_is_near_unit() {
    struct Zero;
    impl NoisePredictor<f64> for Zero {
        fn predict(&self, z: &Tensor<f64>, _: &[usize], _: &[ConditionLabel]) -> lphom_core::Result<Tensor<f64>> {
            Ok(Tensor::zeros(z.shape().to_vec()))
        }
    }
    let sched = common::default_schedule();
    let z0 = Tensor::<f64>::randn([64, 4, 16, 16], &mut rng(10));
    let labels = vec![ConditionLabel::from_cell(0).unwrap(); 64];
    let mut r = rng(11);
    let mean = (0..20).map(|_| training_loss(&Zero, &z0, &labels, &sched, &mut r).unwrap()).sum::<f64>() / 20.0;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
}

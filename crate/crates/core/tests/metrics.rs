mod common;

use common::{phantom_gray, random_psd, rng};
use lphom_core::dataset::{render_in_memory, DatasetConfig};
use lphom_core::label::CellGrid;
use lphom_core::metrics::{
    diversity_report, feature_stats, fid, matrix_sqrt_psd, ms_ssim, ssim, train_condition_classifier, ClassifierConfig, FeatureExtractor,
    FeatureStats, GrayImage, Matrix, SsimParams,
};
use lphom_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn oracle_bundle() {
    let m = common::metric_oracles();
    assert!(m.ok(), "{m:?}");
}

#[test]
fn sqrt_hand_cases_and_errors() {
    let r = matrix_sqrt_psd(&Matrix::diag(&[4.0, 9.0])).unwrap();
    assert!(r.sub(&Matrix::diag(&[2.0, 3.0])).max_abs() < 1e-14);
    assert!(matrix_sqrt_psd(&Matrix::identity(5)).unwrap().sub(&Matrix::identity(5)).max_abs() < 1e-14);
    assert!(matrix_sqrt_psd(&Matrix::from_rows(2, vec![1.0, 0.5, 0.0, 1.0]).unwrap()).is_err());
    assert!(matrix_sqrt_psd(&Matrix::diag(&[1.0, -0.1])).is_err());
}

#[test]
fn monte_carlo_covariance() {
    let mut r = rng(20);
    let rows: Vec<Vec<f64>> = (0..10_000).map(|_| (0..4).map(|_| r.sample(rand_distr::StandardNormal)).collect()).collect();
    let s = FeatureStats::from_features(&rows).unwrap();
    assert!(s.mu.iter().all(|m| m.abs() < 0.05));
    assert!(s.sigma.sub(&Matrix::identity(4)).max_abs() < 0.05);
}

#[test]
fn feature_stats_from_images() {
    let img = Tensor::<f32>::uniform([1, 64, 64], 0.0, 1.0, &mut rng(21));
    let ext = FeatureExtractor::random_conv();
    let same = feature_stats(&vec![img.clone(); 4], &ext).unwrap();
    assert!(same.sigma.max_abs() < 1e-20);
    let other = Tensor::<f32>::uniform([1, 64, 64], 0.0, 1.0, &mut rng(22));
    assert!(feature_stats(&[img.clone()], &ext).is_err());
    let pair = feature_stats(&[img.clone(), other.clone()], &ext).unwrap();
    // Rank one: the covariance is a scaled outer product of the difference.
    let eig = lphom_core::metrics::symmetric_eigen(&pair.sigma).0;
    let mut eig: Vec<f64> = eig.into_iter().map(f64::abs).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!(eig[1] <= 1e-9 * eig[0]);
    let twice = feature_stats(&[img.clone(), other.clone(), img], &ext).unwrap();
    assert!(fid(&twice, &twice.clone()).unwrap() <= 1e-6);
}

#[test]
fn ssim_degrades_with_noise() {
    let p = SsimParams::default();
    let x = phantom_gray(5, 6);
    let mut r = rng(23);
    let noise: Vec<f64> = (0..64 * 64).map(|_| r.sample(rand_distr::StandardNormal)).collect();
    let noisy = |eps: f64| GrayImage::new(64, 64, x.data.iter().zip(&noise).map(|(v, n)| v + eps * n).collect()).unwrap();
    let scores: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&e| ms_ssim(&x, &noisy(e), &p).unwrap()).collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    assert!(scores.iter().all(|&s| s < 1.0));
}

#[test]
fn diversity_is_seeded() {
    let p = SsimParams::default();
    let set: Vec<GrayImage> = (0..6).map(|i| phantom_gray(i, 2)).collect();
    let a = diversity_report(&set, &p, 20, 1).unwrap();
    assert_eq!(a, diversity_report(&set, &p, 20, 1).unwrap());
    assert!(a.mean > 0.0 && a.mean < 1.0);
    assert!(diversity_report(&set, &p, 0, 1).is_err());
    let text = a.to_string();
    assert!(text.contains(" ± ") && text.len() == "0.000 ± 0.000".len(), "{text}");
}

#[test]
fn classifier_learns_phantom_labels() {
    let train = render_in_memory(&DatasetConfig { counts: CellGrid::filled(20), size: 64, master_seed: 1 }).unwrap();
    let test = render_in_memory(&DatasetConfig { counts: CellGrid::filled(3), size: 64, master_seed: 2 }).unwrap();
    let cfg = ClassifierConfig { steps: 300, ..ClassifierConfig::default() };
    let (clf, _) = train_condition_classifier(&train, &cfg).unwrap();
    let acc = clf.accuracy(&test).unwrap();
    assert!(acc.modality >= 0.9 && acc.pathology >= 0.8, "{acc:?}");
    let noise = Tensor::<f32>::uniform([1, 64, 64], 0.0, 1.0, &mut rng(24));
    let a = clf.classify(&[noise.clone()]).unwrap();
    assert_eq!(a, clf.classify(&[noise]).unwrap());
    assert!(train_condition_classifier(&[], &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_bounded_and_symmetric(seed in any::<u64>(), amp in 0.0f64..0.5) {
        let mut r = rng(seed);
        let x = GrayImage::new(32, 32, (0..1024).map(|_| r.random::<f64>()).collect()).unwrap();
        let y = GrayImage::new(32, 32, x.data.iter().map(|v| (v + amp * (r.random::<f64>() - 0.5)).clamp(0.0, 1.0)).collect()).unwrap();
        let p = SsimParams::default();
        let s = ssim(&x, &y, &p).unwrap();
        prop_assert!(s <= 1.0);
        prop_assert_eq!(s, ssim(&y, &x, &p).unwrap());
        prop_assert!(ms_ssim(&x, &y, &p).unwrap() <= 1.0);
        if x != y {
            prop_assert!(s < 1.0 - 1e-9);
        }
    }

    #[test]
    fn fid_symmetric(seed in any::<u64>(), d in 2usize..10) {
        let mut r = rng(seed);
        let mk = |r: &mut rand_chacha::ChaCha8Rng| FeatureStats { mu: (0..d).map(|_| r.random::<f64>()).collect(), sigma: random_psd(d, r), n: 0 };
        let (a, b) = (mk(&mut r), mk(&mut r));
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap() <= 1e-6 * a.sigma.trace().max(1.0));
    }
}

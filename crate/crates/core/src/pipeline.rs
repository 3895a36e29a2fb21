//! End-to-end stages: data, VAE, latent diffusion, sampling, evaluation.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so stages can be invoked separately and in order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lphom_tensor::{Tensor, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ExtractorKind, RunConfig};
use crate::dataset::{generate_dataset, load_dataset, render_in_memory, DatasetConfig, DatasetManifest, Sample, Split, MANIFEST_FILE};
use crate::diffusion::{ddim_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image_io;
use crate::label::{CellGrid, ConditionLabel, Pathology};
use crate::metrics::{
    diversity_report, fid, gray_image, train_condition_classifier, Accuracy, CellTable, ConditionClassifier, DiversityReport,
    FeatureExtractor, FeatureStats, SsimParams,
};
use crate::seed::{mix, stream};
use crate::train::smooth;
use crate::unet::UNet;
use crate::vae::Vae;

const BORDER: usize = 3;
pub const HELD_OUT_COLOR: [u8; 3] = [255, 165, 0];
const TRAINED_COLOR: [u8; 3] = [40, 40, 40];
const SAMPLE_BATCH: usize = 64;
const EVAL_BATCH: usize = 32;
/// Noise draws per validation latent when estimating the held-out loss.
const VAL_DRAWS: usize = 8;
/// Real phantoms per cell for measuring classifier accuracy.
const CLASSIFIER_TEST_PER_CELL: usize = 10;

/// File layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join(MANIFEST_FILE)
    }
    pub fn vae_ckpt(&self) -> PathBuf {
        self.root.join("vae.ckpt")
    }
    pub fn ldm_ckpt(&self) -> PathBuf {
        self.root.join("ldm.ckpt")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn cell_samples(&self, label: ConditionLabel) -> PathBuf {
        self.samples().join(label.slug())
    }
    pub fn grid(&self) -> PathBuf {
        self.root.join("grid.png")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Progress sink; the CLI prints, tests stay quiet.
pub type Log<'a> = &'a dyn Fn(&str);

pub fn quiet(_: &str) {}

pub fn gen_data(cfg: &RunConfig, log: Log) -> Result<DatasetManifest> {
    let paths = RunPaths::new(&cfg.out);
    let manifest = generate_dataset(&cfg.dataset()?, &paths.data())?;
    log(&format!("wrote {} images to {}", manifest.records.len(), paths.data().display()));
    Ok(manifest)
}

fn train_split(samples: &[Sample], cfg: &RunConfig) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == Split::Train && !cfg.is_held_out(s.label)).cloned().collect()
}

pub fn load_vae(cfg: &RunConfig, path: &Path) -> Result<Vae<f32>> {
    let ckpt = Checkpoint::load(path)?;
    let mut vae = Vae::new(cfg.vae(), &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.restore_into(&mut vae.params)?;
    Ok(vae)
}

/// Returns `(model, latent scale)`.
pub fn load_ldm(cfg: &RunConfig, path: &Path) -> Result<(UNet<f32>, f32)> {
    let ckpt = Checkpoint::load(path)?;
    let mut unet = UNet::new(cfg.unet(), &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.restore_into(&mut unet.params)?;
    if !(ckpt.latent_scale.is_finite() && ckpt.latent_scale > 0.0) {
        return Err(Error::Numeric(format!("{}: latent scale {} is not positive", path.display(), ckpt.latent_scale)));
    }
    Ok((unet, ckpt.latent_scale))
}

/// Posterior means of `images`, batched.
fn encode_means(vae: &Vae<f32>, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mu = vae.encode(&Tensor::stack(chunk)?)?.mu;
        let n = chunk.len();
        let per = mu.len() / n;
        let shape = mu.shape()[1..].to_vec();
        for i in 0..n {
            out.push(Tensor::from_vec(shape.clone(), mu.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

fn reconstruction_mse(vae: &Vae<f32>, images: &[Tensor<f32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(EVAL_BATCH) {
        let x = Tensor::stack(chunk)?;
        let recon = vae.decode(&vae.encode(&x)?.mu)?;
        total += x.data().iter().zip(recon.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeReport {
    pub train_mse: f64,
    pub val_mse: f64,
}

pub fn train_vae_stage(cfg: &RunConfig, log: Log) -> Result<VaeReport> {
    let paths = RunPaths::new(&cfg.out);
    let samples = load_dataset(&paths.manifest(), None)?;
    let train: Vec<Tensor<f32>> = train_split(&samples, cfg).into_iter().map(|s| s.image).collect();
    let val: Vec<Tensor<f32>> = samples.iter().filter(|s| s.split == Split::Val).map(|s| s.image.clone()).collect();
    log(&format!("training VAE on {} images for {} steps", train.len(), cfg.vae_steps));
    let (vae, losses) = crate::vae::train_vae(cfg.vae(), &train, &cfg.vae_train(), mix(cfg.seed, stream::VAE_INIT))?;
    losses.write_csv(&paths.file("loss_vae.csv"))?;
    Checkpoint::from_store(&vae.params, cfg.model_text(), 1.0).save(&paths.vae_ckpt())?;
    let report = VaeReport {
        train_mse: reconstruction_mse(&vae, &train)?,
        val_mse: if val.is_empty() { f64::NAN } else { reconstruction_mse(&vae, &val)? },
    };
    write_text(
        &paths.file("vae_metrics.csv"),
        &format!("metric,value\ntrain_mse,{:.6e}\nval_mse,{:.6e}\n", report.train_mse, report.val_mse),
    )?;
    log(&format!("VAE reconstruction MSE: train {:.5}, val {:.5}", report.train_mse, report.val_mse));
    Ok(report)
}

/// Mean epsilon-prediction loss over fixed seeded `(t, eps)` draws.
fn eps_loss(unet: &UNet<f32>, latents: &[Tensor<f32>], labels: &[ConditionLabel], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0;
    for _ in 0..VAL_DRAWS {
        for (zs, ls) in latents.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
            let z0 = Tensor::stack(zs)?;
            let nb = crate::diffusion::noise_batch(&z0, sched, &mut rng)?;
            let mut tape = Tape::new();
            let p = unet.params.bind(&mut tape, false);
            let loss = unet.loss_on(&mut tape, &p, &nb.z_t, &nb.ts, ls, &nb.eps)?;
            total += tape.value(loss).item() as f64 * zs.len() as f64;
            count += zs.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdmReport {
    pub latent_scale: f32,
    /// Mean of the last 10% of training losses.
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub untrained_val_loss: f64,
}

pub fn train_ldm_stage(cfg: &RunConfig, log: Log) -> Result<LdmReport> {
    let paths = RunPaths::new(&cfg.out);
    require(&paths.manifest())?;
    require(&paths.vae_ckpt())?;
    let vae = load_vae(cfg, &paths.vae_ckpt())?;
    let samples = load_dataset(&paths.manifest(), None)?;
    let train = train_split(&samples, cfg);
    let val: Vec<Sample> = samples.iter().filter(|s| s.split == Split::Val && !cfg.is_held_out(s.label)).cloned().collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training images outside the held-out cells".into()));
    }

    let mut audit = CellGrid::filled(0usize);
    for s in &train {
        *audit.get_mut(s.label) += 1;
    }
    let mut text = String::from("pathology,modality,train_count,held_out\n");
    for (l, n) in audit.iter() {
        let _ = writeln!(text, "{},{},{n},{}", l.pathology, l.modality, cfg.is_held_out(l));
    }
    write_text(&paths.file("label_audit.csv"), &text)?;

    let raw = encode_means(&vae, &train.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let all: Vec<f64> = raw.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::Numeric(format!("latent standard deviation is {std}")));
    }
    let scale = (1.0 / std) as f32;
    let scaled = |ts: Vec<Tensor<f32>>| -> Vec<Tensor<f32>> { ts.into_iter().map(|t| t.map(|v| v * scale)).collect() };
    let latents = scaled(raw);
    let labels: Vec<ConditionLabel> = train.iter().map(|s| s.label).collect();
    let sched = cfg.schedule()?;

    log(&format!("training latent U-Net on {} latents for {} steps (scale {scale:.4})", latents.len(), cfg.unet_steps));
    let init_seed = mix(cfg.seed, stream::UNET_INIT);
    let (unet, losses) = crate::unet::train_unet(cfg.unet(), &latents, &labels, &sched, &cfg.unet_train(), init_seed)?;
    losses.write_csv(&paths.file("loss_ldm.csv"))?;
    Checkpoint::from_store(&unet.params, cfg.model_text(), scale).save(&paths.ldm_ckpt())?;

    let (vl, vlab) = if val.is_empty() {
        (latents.clone(), labels.clone())
    } else {
        (scaled(encode_means(&vae, &val.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?), val.iter().map(|s| s.label).collect())
    };
    let eval_seed = mix(cfg.seed, stream::EVAL);
    let untrained = UNet::<f32>::new(cfg.unet(), &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let column = losses.column(0);
    let tail = (column.len() / 10).max(1);
    let report = LdmReport {
        latent_scale: scale,
        final_train_loss: smooth(&column, tail).last().copied().unwrap_or(f64::NAN),
        val_loss: eps_loss(&unet, &vl, &vlab, &sched, eval_seed)?,
        untrained_val_loss: eps_loss(&untrained, &vl, &vlab, &sched, eval_seed)?,
    };
    write_text(
        &paths.file("ldm_metrics.csv"),
        &format!(
            "metric,value\nlatent_scale,{:.6e}\nfinal_train_loss,{:.6e}\nval_eps_loss,{:.6e}\nuntrained_val_eps_loss,{:.6e}\n",
            report.latent_scale, report.final_train_loss, report.val_loss, report.untrained_val_loss
        ),
    )?;
    log(&format!(
        "diffusion loss: train {:.4}, val {:.4} (untrained {:.4})",
        report.final_train_loss, report.val_loss, report.untrained_val_loss
    ));
    Ok(report)
}

/// Trained VAE plus latent diffusion model.
pub struct Generator {
    pub vae: Vae<f32>,
    pub unet: UNet<f32>,
    pub latent_scale: f32,
}

impl Generator {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let paths = RunPaths::new(&cfg.out);
        require(&paths.vae_ckpt())?;
        require(&paths.ldm_ckpt())?;
        let vae = load_vae(cfg, &paths.vae_ckpt())?;
        let (unet, latent_scale) = load_ldm(cfg, &paths.ldm_ckpt())?;
        Ok(Self { vae, unet, latent_scale })
    }

    /// `n` images for one cell, quantized to 8 bits like their PNG files.
    pub fn sample(&self, cfg: &RunConfig, label: ConditionLabel, n: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
        let sched = cfg.schedule()?;
        let mut out = Vec::with_capacity(n);
        let mut batch_index = 0u64;
        while out.len() < n {
            let b = SAMPLE_BATCH.min(n - out.len());
            let shape = cfg.vae().latent_shape(b);
            let z = ddim_sample(&self.unet, &vec![label; b], &shape, &cfg.sampler(), &sched, mix(seed, batch_index))?;
            let x = self.vae.decode(&z.map(|v| v / self.latent_scale))?;
            if !x.all_finite() {
                return Err(Error::Numeric(format!("decoded samples for {label} are not finite")));
            }
            let side = cfg.image_size;
            for i in 0..b {
                let data = x.data()[i * side * side..(i + 1) * side * side].iter().map(|&v| image_io::to_u8(v) as f32 / 255.0).collect();
                out.push(Tensor::from_vec([1, side, side], data)?);
            }
            batch_index += 1;
        }
        Ok(out)
    }
}

fn cell_seed(cfg: &RunConfig, label: ConditionLabel) -> u64 {
    mix(mix(cfg.seed, stream::SAMPLING), label.cell() as u64)
}

fn sample_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:04}.png"))
}

/// Generate, write and return samples for `cells`.
pub fn sample_cells(cfg: &RunConfig, cells: &[ConditionLabel], log: Log) -> Result<CellGrid<Vec<Tensor<f32>>>> {
    let paths = RunPaths::new(&cfg.out);
    let generator = Generator::load(cfg)?;
    let mut grid = CellGrid::filled(Vec::new());
    for &label in cells {
        log(&format!("sampling {} images for {label}", cfg.samples_per_cell));
        let images = generator.sample(cfg, label, cfg.samples_per_cell, cell_seed(cfg, label))?;
        let dir = paths.cell_samples(label);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, img) in images.iter().enumerate() {
            image_io::write_gray(&sample_path(&dir, i), cfg.image_size, cfg.image_size, img.data())?;
        }
        *grid.get_mut(label) = images;
    }
    Ok(grid)
}

/// Cached samples of one cell if all `samples_per_cell` files are present.
fn read_cell_samples(cfg: &RunConfig, label: ConditionLabel) -> Result<Option<Vec<Tensor<f32>>>> {
    let dir = RunPaths::new(&cfg.out).cell_samples(label);
    let mut out = Vec::with_capacity(cfg.samples_per_cell);
    for i in 0..cfg.samples_per_cell {
        let path = sample_path(&dir, i);
        if !path.exists() {
            return Ok(None);
        }
        let (w, h, data) = image_io::read_gray(&path)?;
        if w != cfg.image_size || h != cfg.image_size {
            return Ok(None);
        }
        out.push(Tensor::from_vec([1, h, w], data)?);
    }
    Ok(Some(out))
}

/// Samples for `cells`, reusing files from an earlier `sample-grid` when present.
pub fn cached_or_sample(cfg: &RunConfig, cells: &[ConditionLabel], log: Log) -> Result<CellGrid<Vec<Tensor<f32>>>> {
    let mut grid = CellGrid::filled(Vec::new());
    let mut missing = Vec::new();
    for &label in cells {
        match read_cell_samples(cfg, label)? {
            Some(images) => *grid.get_mut(label) = images,
            None => missing.push(label),
        }
    }
    if !missing.is_empty() {
        let fresh = sample_cells(cfg, &missing, log)?;
        for label in missing {
            *grid.get_mut(label) = fresh.get(label).clone();
        }
    }
    Ok(grid)
}

/// 4x5 montage of the first sample per cell; held-out cells get an orange frame.
pub fn render_grid(cfg: &RunConfig, samples: &CellGrid<Vec<Tensor<f32>>>) -> (usize, usize, Vec<u8>) {
    let s = cfg.image_size;
    let tile = s + 2 * BORDER;
    let (w, h) = (5 * tile, 4 * tile);
    let mut rgb = vec![0u8; w * h * 3];
    for (label, images) in samples.iter() {
        let (ox, oy) = (label.modality.index() * tile, label.pathology.index() * tile);
        let color = if cfg.is_held_out(label) { HELD_OUT_COLOR } else { TRAINED_COLOR };
        for y in 0..tile {
            for x in 0..tile {
                let inner = (BORDER..BORDER + s).contains(&x) && (BORDER..BORDER + s).contains(&y);
                let px = match (inner, images.first()) {
                    (true, Some(img)) => [image_io::to_u8(img.data()[(y - BORDER) * s + x - BORDER]); 3],
                    (true, None) => [0; 3],
                    (false, _) => color,
                };
                let o = ((oy + y) * w + ox + x) * 3;
                rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    (w, h, rgb)
}

pub fn sample_grid_stage(cfg: &RunConfig, log: Log) -> Result<CellGrid<Vec<Tensor<f32>>>> {
    let cells: Vec<ConditionLabel> = ConditionLabel::all().collect();
    let samples = sample_cells(cfg, &cells, log)?;
    let (w, h, rgb) = render_grid(cfg, &samples);
    let path = RunPaths::new(&cfg.out).grid();
    image_io::write_rgb(&path, w, h, &rgb)?;
    log(&format!("wrote {}", path.display()));
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidDetail {
    pub n_real: usize,
    pub generated: f64,
    pub noise: f64,
    /// Against generated samples of the same modality, other pathologies.
    pub wrong_pathology: Vec<(Pathology, f64)>,
    /// Between two halves of the real images, when there are at least four.
    pub real_halves: Option<f64>,
}

impl FidDetail {
    pub fn beats_noise(&self) -> bool {
        self.generated < self.noise
    }

    pub fn beats_wrong_pathology(&self) -> bool {
        self.wrong_pathology.iter().all(|&(_, f)| self.generated < f)
    }

    pub fn passes(&self) -> bool {
        self.beats_noise() && self.beats_wrong_pathology()
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub fid: CellGrid<Option<FidDetail>>,
    pub diversity: CellGrid<Option<DiversityReport>>,
    /// Fraction of samples the classifier assigns the intended joint label.
    pub condition_match: CellGrid<Option<f64>>,
    pub classifier: Accuracy,
}

impl EvalReport {
    /// Fraction of cells with FID details whose ordering checks pass.
    pub fn realism_pass_rate(&self) -> Option<f64> {
        let cells: Vec<&FidDetail> = self.fid.iter().filter_map(|(_, d)| d.as_ref()).collect();
        (!cells.is_empty()).then(|| cells.iter().filter(|d| d.passes()).count() as f64 / cells.len() as f64)
    }

    /// Pooled match rate over `cells` (equal sample counts per cell).
    pub fn pooled_match(&self, cells: &[ConditionLabel]) -> Option<f64> {
        let rates: Vec<f64> = cells.iter().filter_map(|&l| *self.condition_match.get(l)).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

fn uniform_noise_images(n: usize, side: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..side * side).map(|_| (rng.random_range(0..=255u8) as f32) / 255.0).collect();
            Tensor::from_vec([1, side, side], data).expect("sized")
        })
        .collect()
}

fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor> {
    Ok(match cfg.feature_extractor {
        ExtractorKind::RandomConv => FeatureExtractor::random_conv(),
        ExtractorKind::VaeEncoder => FeatureExtractor::vae_encoder(&load_vae(cfg, &RunPaths::new(&cfg.out).vae_ckpt())?),
    })
}

/// Classifier trained on a fresh full-grid phantom set (independent of the
/// run's dataset) and its accuracy on a second fresh set.
pub fn fit_classifier(cfg: &RunConfig, log: Log) -> Result<(ConditionClassifier, Accuracy)> {
    let base = mix(cfg.seed, stream::CLASSIFIER);
    let make = |per_cell: usize, tag: u64| {
        render_in_memory(&DatasetConfig { counts: CellGrid::filled(per_cell as i64), size: cfg.image_size, master_seed: mix(base, tag) })
    };
    let train = make(cfg.classifier_per_cell, 1)?;
    log(&format!("training condition classifier on {} phantoms", train.len()));
    let (clf, _) = train_condition_classifier(&train, &cfg.classifier())?;
    let accuracy = clf.accuracy(&make(CLASSIFIER_TEST_PER_CELL, 2)?)?;
    log(&format!("classifier accuracy: pathology {:.3}, modality {:.3}", accuracy.pathology, accuracy.modality));
    Ok((clf, accuracy))
}

fn match_rate(clf: &ConditionClassifier, images: &[Tensor<f32>], label: ConditionLabel) -> Result<f64> {
    let pred = clf.classify(images)?;
    Ok(pred.iter().filter(|&&p| p == label).count() as f64 / pred.len().max(1) as f64)
}

/// Full evaluation over all cells; `held_out_only` restricts it to the
/// extrapolation check.
pub fn evaluate(cfg: &RunConfig, held_out_only: bool, log: Log) -> Result<EvalReport> {
    let paths = RunPaths::new(&cfg.out);
    require(&paths.manifest())?;
    require(&paths.vae_ckpt())?;
    require(&paths.ldm_ckpt())?;
    let cells: Vec<ConditionLabel> =
        ConditionLabel::all().filter(|&l| !held_out_only || cfg.is_held_out(l)).collect();
    let samples = cached_or_sample(cfg, &cells, log)?;

    let mut report = EvalReport {
        fid: CellGrid::filled(None),
        diversity: CellGrid::filled(None),
        condition_match: CellGrid::filled(None),
        classifier: Accuracy { pathology: f64::NAN, modality: f64::NAN, joint: f64::NAN },
    };

    if !held_out_only {
        let dataset = load_dataset(&paths.manifest(), None)?;
        let ext = extractor(cfg)?;
        let stats = |imgs: &[Tensor<f32>]| -> Result<FeatureStats> { FeatureStats::from_features(&ext.extract(imgs)?) };
        let gen_stats: CellGrid<FeatureStats> = {
            let mut g = CellGrid::filled(None);
            for &l in &cells {
                *g.get_mut(l) = Some(stats(samples.get(l))?);
            }
            CellGrid::from_fn(|l| g.get(l).clone().expect("all cells sampled"))
        };
        log("computing FID");
        for &label in &cells {
            let cell: Vec<&Sample> = dataset.iter().filter(|s| s.label == label).collect();
            if cell.len() < 2 || cfg.is_held_out(label) {
                continue;
            }
            let real: Vec<Tensor<f32>> = cell.iter().map(|s| s.image.clone()).collect();
            let real_stats = stats(&real)?;
            let noise = uniform_noise_images(cfg.samples_per_cell, cfg.image_size, mix(mix(cfg.seed, stream::EVAL), label.cell() as u64));
            let wrong = Pathology::ALL
                .iter()
                .filter(|&&p| p != label.pathology)
                .map(|&p| Ok((p, fid(&real_stats, gen_stats.get(ConditionLabel::new(p, label.modality)))?)))
                .collect::<Result<Vec<_>>>()?;
            let real_halves = if cell.len() >= 4 {
                let (a, b): (Vec<_>, Vec<_>) = cell.iter().enumerate().partition(|(i, _)| i % 2 == 0);
                let imgs = |v: Vec<(usize, &&Sample)>| v.into_iter().map(|(_, s)| s.image.clone()).collect::<Vec<_>>();
                Some(fid(&stats(&imgs(a))?, &stats(&imgs(b))?)?)
            } else {
                None
            };
            *report.fid.get_mut(label) = Some(FidDetail {
                n_real: real.len(),
                generated: fid(&real_stats, gen_stats.get(label))?,
                noise: fid(&real_stats, &stats(&noise)?)?,
                wrong_pathology: wrong,
                real_halves,
            });
        }
        log("computing MS-SSIM diversity");
        let params = SsimParams::default();
        for &label in &cells {
            let imgs = samples.get(label).iter().map(gray_image).collect::<Result<Vec<_>>>()?;
            let seed = mix(mix(cfg.seed, stream::DIVERSITY), label.cell() as u64);
            *report.diversity.get_mut(label) = Some(diversity_report(&imgs, &params, cfg.msssim_pairs, seed)?);
        }
    }

    let (clf, accuracy) = fit_classifier(cfg, log)?;
    report.classifier = accuracy;
    for &label in &cells {
        *report.condition_match.get_mut(label) = Some(match_rate(&clf, samples.get(label), label)?);
    }
    write_reports(cfg, &report, held_out_only)?;
    Ok(report)
}

fn write_reports(cfg: &RunConfig, r: &EvalReport, held_out_only: bool) -> Result<()> {
    let paths = RunPaths::new(&cfg.out);
    let emit = |stem: &str, table: &CellTable, extra: &str| -> Result<()> {
        write_text(&paths.file(&format!("{stem}.csv")), &table.to_csv())?;
        write_text(&paths.file(&format!("{stem}.txt")), &(table.to_text() + extra))
    };
    if !held_out_only {
        let fid_table = CellTable::new("FID by pathology and modality", CellGrid::from_fn(|l| r.fid.get(l).as_ref().map(|d| format!("{:.3}", d.generated))));
        let rate = r.realism_pass_rate().map_or("-".into(), |v| format!("{v:.3}"));
        emit("fid_table", &fid_table, &format!("\ncells beating noise and every wrong pathology: {rate}\n"))?;
        let ms = CellTable::new("MS-SSIM by pathology and modality", CellGrid::from_fn(|l| r.diversity.get(l).map(|d| d.to_string())));
        emit("msssim_table", &ms, "")?;

        let mut details = String::from("pathology,modality,n_real,fid_generated,fid_noise,fid_wrong_min,wrong_pathology,fid_real_halves,beats_noise,beats_wrong\n");
        for (l, d) in r.fid.iter() {
            if let Some(d) = d {
                let (wp, wf) = d.wrong_pathology.iter().fold((None, f64::INFINITY), |acc, &(p, f)| if f < acc.1 { (Some(p), f) } else { acc });
                let _ = writeln!(
                    details,
                    "{},{},{},{:.6e},{:.6e},{:.6e},{},{},{},{}",
                    l.pathology,
                    l.modality,
                    d.n_real,
                    d.generated,
                    d.noise,
                    wf,
                    wp.map_or("-".to_string(), |p| p.to_string()),
                    d.real_halves.map_or("-".to_string(), |v| format!("{v:.6e}")),
                    d.beats_noise(),
                    d.beats_wrong_pathology()
                );
            }
        }
        write_text(&paths.file("fid_details.csv"), &details)?;
    }
    let ex = CellTable::new(
        "Condition match rate of generated samples (* = held out)",
        CellGrid::from_fn(|l| r.condition_match.get(l).map(|v| format!("{v:.3}{}", if cfg.is_held_out(l) { "*" } else { "" }))),
    );
    let pooled = r.pooled_match(&cfg.held_out).map_or("-".into(), |v| format!("{v:.3}"));
    write_text(&paths.file("extrapolation.csv"), &CellTable::new(ex.title.clone(), CellGrid::from_fn(|l| r.condition_match.get(l).map(|v| format!("{v:.3}")))).to_csv())?;
    write_text(
        &paths.file("extrapolation.txt"),
        &format!(
            "{}\nheld-out pooled match rate: {pooled}\nclassifier accuracy on real phantoms: pathology {:.3}, modality {:.3}\n",
            ex.to_text(),
            r.classifier.pathology,
            r.classifier.modality
        ),
    )
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, log: Log) -> Result<(VaeReport, LdmReport, EvalReport)> {
    gen_data(cfg, log)?;
    let vae = train_vae_stage(cfg, log)?;
    let ldm = train_ldm_stage(cfg, log)?;
    sample_grid_stage(cfg, log)?;
    let eval = evaluate(cfg, false, log)?;
    Ok((vae, ldm, eval))
}

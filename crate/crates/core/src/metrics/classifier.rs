//! Two-headed convolutional classifier predicting pathology and modality.

use lphom_tensor::{clip_grad_norm, Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::label::{ConditionLabel, Modality, Pathology};
use crate::nn::{Conv2d, GroupNorm, Linear};
use crate::train::{Batcher, LossLog};
use crate::vae::numeric;

const WIDTHS: [usize; 4] = [8, 16, 32, 32];
const HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Std of the Gaussian pixel noise added to training batches, drawn
    /// uniformly from `[0, noise]` per image.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { steps: 800, batch_size: 32, lr: 2e-3, noise: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ConditionClassifier {
    pub params: ParamStore<f32>,
    image_size: usize,
    stages: Vec<(Conv2d, GroupNorm)>,
    hidden: Linear,
    pathology_head: Linear,
    modality_head: Linear,
}

/// Per-head accuracy on a labelled set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub pathology: f64,
    pub modality: f64,
    pub joint: f64,
}

impl ConditionClassifier {
    pub fn new<R: Rng + ?Sized>(image_size: usize, rng: &mut R) -> Result<Self> {
        let reduce = 1 << WIDTHS.len();
        if image_size < reduce || image_size % reduce != 0 {
            return Err(Error::Config(format!("classifier input side must be a multiple of {reduce}, got {image_size}")));
        }
        let mut s = ParamStore::new();
        let mut cin = 1;
        let mut stages = Vec::new();
        for (i, &c) in WIDTHS.iter().enumerate() {
            stages.push((Conv2d::same(&mut s, &format!("cls.conv{i}"), cin, c, rng), GroupNorm::new(&mut s, &format!("cls.norm{i}"), c)));
            cin = c;
        }
        let side = image_size / reduce;
        let hidden = Linear::new(&mut s, "cls.hidden", cin * side * side, HIDDEN, rng);
        let pathology_head = Linear::new(&mut s, "cls.pathology", HIDDEN, Pathology::ALL.len(), rng);
        let modality_head = Linear::new(&mut s, "cls.modality", HIDDEN, Modality::ALL.len(), rng);
        Ok(Self { params: s, image_size, stages, hidden, pathology_head, modality_head })
    }

    fn logits_on(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let n = tape.shape(x)[0];
        let mut h = x;
        for (conv, norm) in &self.stages {
            let c = conv.forward(tape, p, h)?;
            let g = norm.forward(tape, p, c)?;
            let r = tape.relu(g)?;
            h = tape.avg_pool2(r)?;
        }
        let flat_len = tape.value(h).len() / n;
        let flat = tape.reshape(h, &[n, flat_len])?;
        let hid = self.hidden.forward(tape, p, flat)?;
        let hid = tape.relu(hid)?;
        Ok((self.pathology_head.forward(tape, p, hid)?, self.modality_head.forward(tape, p, hid)?))
    }

    pub fn classify(&self, images: &[Tensor<f32>]) -> Result<Vec<ConditionLabel>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            if let Some(bad) = chunk.iter().find(|im| im.shape() != [1, self.image_size, self.image_size]) {
                return Err(Error::InvalidArgument(format!(
                    "classifier expects (1, {s}, {s}) images, got {:?}",
                    bad.shape(),
                    s = self.image_size
                )));
            }
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let x = tape.constant(Tensor::stack(chunk)?);
            let (lp, lm) = self.logits_on(&mut tape, &p, x)?;
            let pi = argmax_rows(tape.value(lp));
            let mi = argmax_rows(tape.value(lm));
            for (a, b) in pi.into_iter().zip(mi) {
                out.push(ConditionLabel::new(Pathology::from_index(a).expect("head size"), Modality::from_index(b).expect("head size")));
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, samples: &[Sample]) -> Result<Accuracy> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("accuracy of an empty set".into()));
        }
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let pred = self.classify(&images)?;
        let n = samples.len() as f64;
        let count = |f: &dyn Fn(&ConditionLabel, &ConditionLabel) -> bool| {
            pred.iter().zip(samples).filter(|(p, s)| f(p, &s.label)).count() as f64 / n
        };
        Ok(Accuracy {
            pathology: count(&|a, b| a.pathology == b.pathology),
            modality: count(&|a, b| a.modality == b.modality),
            joint: count(&|a, b| a == b),
        })
    }
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// Fit on labelled `(1, S, S)` images with summed cross-entropy over both
/// heads.
pub fn train_condition_classifier(samples: &[Sample], cfg: &ClassifierConfig) -> Result<(ConditionClassifier, LossLog)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("classifier training set is empty".into()))?;
    let size = first.image.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ConditionClassifier::new(size, &mut rng)?;
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut batcher = Batcher::new(samples.len(), cfg.batch_size);
    let mut log = LossLog::new(&["loss"]);
    for step in 0..cfg.steps {
        let idx = batcher.next(&mut rng);
        let mut parts = Vec::with_capacity(idx.len());
        for &i in &idx {
            let sigma = rng.random::<f64>() * cfg.noise;
            let noise = Tensor::<f32>::randn(samples[i].image.shape().to_vec(), &mut rng);
            let data = samples[i].image.data().iter().zip(noise.data()).map(|(&v, &e)| v + sigma as f32 * e).collect();
            parts.push(Tensor::from_vec(samples[i].image.shape().to_vec(), data)?);
        }
        let path: Vec<usize> = idx.iter().map(|&i| samples[i].label.pathology.index()).collect();
        let modality: Vec<usize> = idx.iter().map(|&i| samples[i].label.modality.index()).collect();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let x = tape.constant(Tensor::stack(&parts)?);
        let (lp, lm) = model.logits_on(&mut tape, &p, x).map_err(numeric("classifier", step))?;
        let a = tape.cross_entropy(lp, &path)?;
        let b = tape.cross_entropy(lm, &modality)?;
        let loss = tape.add(a, b)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("classifier training diverged at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut g = p.gradients(&mut grads)?;
        clip_grad_norm(&mut g, 1.0);
        adam.step(&mut model.params, &g)?;
        log.push(step, &[value]);
    }
    Ok((model, log))
}

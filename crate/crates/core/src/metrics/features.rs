//! Image embeddings for FID, evaluated in f64.

use lphom_tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::vae::Vae;

pub const FEATURE_DIM: usize = 64;
const BATCH: usize = 32;

/// Fixed random network: three `conv3x3 -> ReLU -> avgpool2` stages with
/// widths 16, 32, 64, then a global average pool.
#[derive(Clone, Debug)]
pub struct RandomConv {
    params: ParamStore<f64>,
    convs: [Conv2d; 3],
}

impl RandomConv {
    pub const DEFAULT_SEED: u64 = 0x5eed_f1d0;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let convs = [
            Conv2d::same(&mut params, "feat0", 1, 16, &mut rng),
            Conv2d::same(&mut params, "feat1", 16, 32, &mut rng),
            Conv2d::same(&mut params, "feat2", 32, FEATURE_DIM, &mut rng),
        ];
        Self { params, convs }
    }

    fn embed(&self, x: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut h = tape.constant(x);
        for conv in &self.convs {
            let c = conv.forward(&mut tape, &p, h)?;
            let r = tape.relu(c)?;
            h = tape.avg_pool2(r)?;
        }
        Ok(tape.value(h).clone())
    }
}

impl Default for RandomConv {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

/// Maps `(1, S, S)` images to fixed-length f64 vectors.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    RandomConv(RandomConv),
    /// Posterior mean of a trained VAE, average-pooled to `C x 4 x 4`.
    VaeEncoder(Vae<f64>),
}

impl FeatureExtractor {
    pub fn random_conv() -> Self {
        Self::RandomConv(RandomConv::default())
    }

    pub fn vae_encoder(vae: &Vae<f32>) -> Self {
        Self::VaeEncoder(vae.cast())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RandomConv(_) => "random_conv",
            Self::VaeEncoder(_) => "vae_encoder",
        }
    }

    pub fn extract(&self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(BATCH) {
            let x = Tensor::stack(&chunk.iter().map(Tensor::cast::<f64>).collect::<Vec<_>>())?;
            let h = match self {
                Self::RandomConv(net) => net.embed(x)?,
                Self::VaeEncoder(vae) => pool_to(vae.encode(&x)?.mu, 4)?,
            };
            let [n, c, hh, ww] = h.dims4()?;
            let plane = hh * ww;
            for i in 0..n {
                let item = &h.data()[i * c * plane..(i + 1) * c * plane];
                out.push(match self {
                    Self::RandomConv(_) => item.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect(),
                    Self::VaeEncoder(_) => item.to_vec(),
                });
            }
        }
        Ok(out)
    }
}

/// Repeated 2x average pooling down to `side x side`.
fn pool_to(x: Tensor<f64>, side: usize) -> Result<Tensor<f64>> {
    let [_, _, h, w] = x.dims4()?;
    if h != w || h < side || h % side != 0 || !(h / side).is_power_of_two() {
        return Err(Error::InvalidArgument(format!("cannot pool a {h}x{w} latent to {side}x{side}")));
    }
    let mut tape = Tape::new();
    let mut v = tape.constant(x);
    while tape.shape(v)[2] > side {
        v = tape.avg_pool2(v)?;
    }
    Ok(tape.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::VaeConfig;

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::uniform([1, 64, 64], 0.0, 1.0, &mut rng)).collect();
        let a = FeatureExtractor::random_conv().extract(&imgs).unwrap();
        let b = FeatureExtractor::random_conv().extract(&imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|f| f.len() == FEATURE_DIM));
        assert_ne!(a[0], a[1]);

        let vae = Vae::<f32>::new(VaeConfig::default(), &mut rng).unwrap();
        let v = FeatureExtractor::vae_encoder(&vae).extract(&imgs).unwrap();
        assert!(v.iter().all(|f| f.len() == 64));
    }
}

//! SSIM over Gaussian windows and its multi-scale product form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

use crate::error::{Error, Result};

/// Single-channel f64 image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("{} values for a {width}x{height} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        Self::new(width, height, data.iter().map(|&v| v as f64).collect())
    }

    /// 2x2 mean pooling (odd trailing rows/columns dropped).
    pub fn downsample2(&self) -> GrayImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.data[yy * self.width + xx];
                data.push(0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)));
            }
        }
        GrayImage { width: w, height: h, data }
    }
}

/// Leading three standard multi-scale weights, renormalized to sum to one.
pub const MS_SSIM_WEIGHTS: [f64; 3] = {
    let (a, b, c) = (0.0448, 0.2856, 0.3001);
    let s = a + b + c;
    [a / s, b / s, c / s]
};

#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// One exponent per scale, finest first.
    pub weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        let l = 1.0f64;
        Self { window: 7, sigma: 1.5, c1: (0.01 * l).powi(2), c2: (0.03 * l).powi(2), weights: MS_SSIM_WEIGHTS.to_vec() }
    }
}

impl SsimParams {
    /// Normalized separable Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Mean SSIM over all fully contained windows.
pub fn ssim(x: &GrayImage, y: &GrayImage, params: &SsimParams) -> Result<f64> {
    if x.width != y.width || x.height != y.height {
        return Err(Error::InvalidArgument(format!(
            "SSIM of {}x{} and {}x{} images",
            x.width, x.height, y.width, y.height
        )));
    }
    let k = params.window;
    if x.width < k || x.height < k {
        return Err(Error::InvalidArgument(format!("image {}x{} smaller than the {k}x{k} window", x.width, x.height)));
    }
    let taps = params.taps();
    let (w, h) = (x.width, x.height);
    let (ow, oh) = (w - k + 1, h - k + 1);
    // Separable weighted local moments: rows first, then columns.
    let products: [Vec<f64>; 5] = [
        x.data.clone(),
        y.data.clone(),
        x.data.iter().map(|v| v * v).collect(),
        y.data.iter().map(|v| v * v).collect(),
        x.data.iter().zip(&y.data).map(|(a, b)| a * b).collect(),
    ];
    let filtered: Vec<Vec<f64>> = products
        .iter()
        .map(|img| {
            let mut rows = vec![0.0; h * ow];
            for r in 0..h {
                for c in 0..ow {
                    rows[r * ow + c] = (0..k).map(|i| taps[i] * img[r * w + c + i]).sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    out[r * ow + c] = (0..k).map(|i| taps[i] * rows[(r + i) * ow + c]).sum();
                }
            }
            out
        })
        .collect();
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (filtered[0][i], filtered[1][i]);
        let vx = filtered[2][i] - mx * mx;
        let vy = filtered[3][i] - my * my;
        let cxy = filtered[4][i] - mx * my;
        let num = (2.0 * mx * my + params.c1) * (2.0 * cxy + params.c2);
        let den = (mx * mx + my * my + params.c1) * (vx + vy + params.c2);
        total += num / den;
    }
    Ok(total / (oh * ow) as f64)
}

/// `prod_j max(SSIM_j, 0)^{w_j}` over a 2x mean-pooling pyramid.
pub fn ms_ssim(x: &GrayImage, y: &GrayImage, params: &SsimParams) -> Result<f64> {
    let scales = params.weights.len();
    if scales == 0 {
        return Err(Error::InvalidArgument("MS-SSIM needs at least one scale".into()));
    }
    let need = params.window << (scales - 1);
    if x.width.min(x.height) < need {
        return Err(Error::InvalidArgument(format!(
            "MS-SSIM with {scales} scales needs images of side >= {need}, got {}x{}",
            x.width, x.height
        )));
    }
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut value = 1.0;
    for (j, &wj) in params.weights.iter().enumerate() {
        if j > 0 {
            a = a.downsample2();
            b = b.downsample2();
        }
        value *= ssim(&a, &b, params)?.max(0.0).powf(wj);
    }
    Ok(value)
}

/// Mean and population standard deviation of pairwise MS-SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityReport {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for DiversityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// MS-SSIM over `n_pairs` seeded random pairs of distinct images.
pub fn diversity_report(images: &[GrayImage], params: &SsimParams, n_pairs: usize, seed: u64) -> Result<DiversityReport> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 images, got {}", images.len())));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("diversity needs at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.random_range(0..images.len());
        let mut j = rng.random_range(0..images.len() - 1);
        if j >= i {
            j += 1;
        }
        values.push(ms_ssim(&images[i], &images[j], params)?);
    }
    let mean = values.iter().sum::<f64>() / n_pairs as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_pairs as f64;
    Ok(DiversityReport { mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, side: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn params_are_normalized() {
        let p = SsimParams::default();
        assert!((p.taps().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((MS_SSIM_WEIGHTS[0] - 0.071048).abs() < 1e-5);
    }

    #[test]
    fn constant_images_follow_closed_form() {
        let p = SsimParams::default();
        let (a, b) = (0.3, 0.7);
        let x = GrayImage::new(16, 16, vec![a; 256]).unwrap();
        let y = GrayImage::new(16, 16, vec![b; 256]).unwrap();
        let expect = (2.0 * a * b + p.c1) / (a * a + b * b + p.c1);
        assert!((ssim(&x, &y, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identity_symmetry_and_degenerate_pyramid() {
        let p = SsimParams::default();
        let (x, y) = (img(1, 64), img(2, 64));
        assert_eq!(ssim(&x, &x, &p).unwrap(), 1.0);
        assert_eq!(ms_ssim(&x, &x, &p).unwrap(), 1.0);
        assert_eq!(ssim(&x, &y, &p).unwrap(), ssim(&y, &x, &p).unwrap());
        let single = SsimParams { weights: vec![1.0], ..p.clone() };
        let s = ssim(&x, &y, &p).unwrap();
        assert!((ms_ssim(&x, &y, &single).unwrap() - s.max(0.0)).abs() < 1e-15);
        assert!(ms_ssim(&img(3, 20), &img(4, 20), &p).is_err());
        assert!(ssim(&img(3, 20), &img(4, 21), &p).is_err());
    }

    #[test]
    fn diversity_of_identical_set() {
        let p = SsimParams::default();
        let set = vec![img(5, 32); 4];
        let r = diversity_report(&set, &SsimParams { weights: vec![0.5, 0.5], ..p.clone() }, 10, 0).unwrap();
        assert_eq!(r.to_string(), "1.000 ± 0.000");
        assert!(diversity_report(&set[..1], &p, 10, 0).is_err());
    }
}

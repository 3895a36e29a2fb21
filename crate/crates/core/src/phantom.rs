//! Procedural 2-D brain phantoms.
//!
//! Geometry is a deterministic function of an anatomy seed (shared by every
//! modality of one subject) plus the pathology, which only adds structure on
//! top of the base anatomy. The modality is a per-tissue intensity table
//! applied to the resulting tissue map.

use std::f64::consts::PI;

use lphom_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{ConditionLabel, Modality, Pathology};
use crate::seed::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Tissue {
    Background,
    Scalp,
    Csf,
    Ventricle,
    Gray,
    White,
    Lesion,
    Edema,
    TumorRim,
    TumorCore,
}

impl Tissue {
    pub const COUNT: usize = 10;
}

/// Intensity of each [`Tissue`] (in declaration order) per modality.
pub fn intensity_table(modality: Modality) -> [f64; Tissue::COUNT] {
    match modality {
        //                 bg   scalp csf   vent  gray  white lesion edema rim   core
        Modality::T1w => [0.0, 0.60, 0.12, 0.10, 0.48, 0.78, 0.30, 0.38, 0.58, 0.22],
        Modality::T1ce => [0.0, 0.90, 0.12, 0.10, 0.46, 0.72, 0.42, 0.36, 0.95, 0.20],
        Modality::T2w => [0.0, 0.30, 0.92, 0.98, 0.58, 0.36, 0.80, 0.82, 0.62, 0.90],
        Modality::Flair => [0.0, 0.28, 0.06, 0.04, 0.56, 0.40, 0.95, 0.85, 0.70, 0.30],
        Modality::Pd => [0.0, 0.48, 0.60, 0.62, 0.66, 0.52, 0.70, 0.68, 0.64, 0.58],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Squared normalized radius and polar angle of `(x, y)` in the ellipse frame.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        (u * u + v * v, v.atan2(u))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polar(x, y).0 <= 1.0
    }

    fn shrunk(&self, by: f64) -> Ellipse {
        Ellipse { a: self.a - by, b: self.b - by, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tumor {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Tumor {
    const CORE: f64 = 0.45;
    const EDEMA: f64 = 1.45;
}

/// Low-frequency multiplicative texture: sum of three plane waves.
#[derive(Clone, Debug, PartialEq)]
struct Texture {
    waves: [(f64, f64, f64, f64); 3],
}

impl Texture {
    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(kx, ky, phase, amp)| amp * (kx * x + ky * y + phase).cos()).sum()
    }
}

/// Full geometry of one phantom slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomySpec {
    pub seed: u64,
    pub pathology: Pathology,
    pub head: Ellipse,
    pub brain: Ellipse,
    pub cortex: Ellipse,
    white_scale: f64,
    white_wobble: (f64, f64, f64),
    pub ventricles: [Ellipse; 2],
    pub tumor: Option<Tumor>,
    pub lesions: Vec<Ellipse>,
    texture: Texture,
}

impl AnatomySpec {
    pub fn new(seed: u64, pathology: Pathology) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x616e61746f6d79));
        let head = Ellipse {
            cx: rng.random_range(-0.04..0.04),
            cy: rng.random_range(-0.04..0.04),
            a: rng.random_range(0.70..0.80),
            b: rng.random_range(0.82..0.92),
            theta: rng.random_range(-0.12..0.12),
        };
        let skull = rng.random_range(0.07..0.10);
        let brain = head.shrunk(skull);
        let mut sulcal = rng.random_range(0.02..0.035);
        let white_scale = rng.random_range(0.72..0.80);
        let white_wobble = (
            rng.random_range(0.04..0.07),
            rng.random_range(5..10) as f64,
            rng.random_range(0.0..2.0 * PI),
        );
        let dx = rng.random_range(0.07..0.10);
        let dy = rng.random_range(-0.08..0.0);
        let mut va = rng.random_range(0.045..0.06);
        let mut vb = rng.random_range(0.13..0.17);
        let tilt = rng.random_range(0.15..0.35);
        let texture = Texture {
            waves: std::array::from_fn(|_| {
                let k = rng.random_range(1.5..4.0);
                let dir: f64 = rng.random_range(0.0..2.0 * PI);
                (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.005..0.015))
            }),
        };

        // Pathology-specific draws come from their own stream so the base
        // anatomy above is shared by every pathology of one seed.
        let mut prng = ChaCha8Rng::seed_from_u64(mix(seed, 0x7061746800 + pathology.index() as u64));
        let mut ventricle_offset = dx;
        if pathology == Pathology::Dementia {
            let enlarge = prng.random_range(1.55..1.75);
            va *= enlarge;
            vb *= enlarge;
            ventricle_offset *= 1.15;
            sulcal += 0.04;
        }
        let (s, c) = head.theta.sin_cos();
        let place = |ox: f64, oy: f64| (head.cx + c * ox - s * oy, head.cy + s * ox + c * oy);
        let (lx, ly) = place(-ventricle_offset, dy);
        let (rx, ry) = place(ventricle_offset, dy);
        let ventricles = [
            Ellipse { cx: lx, cy: ly, a: va, b: vb, theta: head.theta - tilt },
            Ellipse { cx: rx, cy: ry, a: va, b: vb, theta: head.theta + tilt },
        ];
        let cortex = brain.shrunk(sulcal);

        let mut spec = AnatomySpec {
            seed,
            pathology,
            head,
            brain,
            cortex,
            white_scale,
            white_wobble,
            ventricles,
            tumor: None,
            lesions: Vec::new(),
            texture,
        };

        match pathology {
            Pathology::Glioblastoma => {
                let angle = prng.random_range(0.0..2.0 * PI);
                let rho = prng.random_range(0.18..0.30);
                let radius = prng.random_range(0.16..0.21);
                let (tx, ty) = place(rho * angle.cos(), rho * angle.sin());
                spec.tumor = Some(Tumor { cx: tx, cy: ty, radius });
            }
            Pathology::Sclerosis => {
                let count = prng.random_range(3..=8);
                let mut attempts = 0;
                while spec.lesions.len() < count && attempts < 2000 {
                    attempts += 1;
                    let angle = prng.random_range(0.0..2.0 * PI);
                    let rho = prng.random_range(0.12..0.40);
                    let a = prng.random_range(0.05..0.075);
                    let b = a * prng.random_range(0.8..1.25);
                    let (x, y) = place(rho * angle.cos(), rho * angle.sin());
                    let lesion = Ellipse { cx: x, cy: y, a, b, theta: prng.random_range(0.0..PI) };
                    let clear = spec.lesions.iter().all(|o| {
                        let d = ((o.cx - x).powi(2) + (o.cy - y).powi(2)).sqrt();
                        d > o.a.max(o.b) + a.max(b) + 0.10
                    });
                    // The whole lesion footprint must sit in white matter.
                    let inside = (0..12).all(|k| {
                        let t = k as f64 * PI / 6.0;
                        let (px, py) = (x + 1.2 * a.max(b) * t.cos(), y + 1.2 * a.max(b) * t.sin());
                        spec.base_tissue(px, py) == Tissue::White
                    }) && spec.base_tissue(x, y) == Tissue::White;
                    if clear && inside {
                        spec.lesions.push(lesion);
                    }
                }
            }
            Pathology::Healthy | Pathology::Dementia => {}
        }
        spec
    }

    /// Anatomy without pathology-specific lesions or tumor.
    fn base_tissue(&self, x: f64, y: f64) -> Tissue {
        let (qh, _) = self.head.polar(x, y);
        if qh > 1.0 {
            return Tissue::Background;
        }
        if !self.brain.contains(x, y) {
            return Tissue::Scalp;
        }
        let (qc, phi) = self.cortex.polar(x, y);
        if qc > 1.0 {
            return Tissue::Csf;
        }
        if self.ventricles.iter().any(|v| v.contains(x, y)) {
            return Tissue::Ventricle;
        }
        let (amp, k, phase) = self.white_wobble;
        let boundary = self.white_scale * (1.0 + amp * (k * phi + phase).sin());
        if qc.sqrt() < boundary {
            Tissue::White
        } else {
            Tissue::Gray
        }
    }

    /// Tissue class at normalized coordinates `(x, y) in [-1, 1]^2`.
    pub fn tissue_at(&self, x: f64, y: f64) -> Tissue {
        let base = self.base_tissue(x, y);
        if let Some(t) = &self.tumor {
            if matches!(base, Tissue::White | Tissue::Gray | Tissue::Ventricle) {
                let d = ((x - t.cx).powi(2) + (y - t.cy).powi(2)).sqrt() / t.radius;
                if d <= Tumor::CORE {
                    return Tissue::TumorCore;
                }
                if d <= 1.0 {
                    return Tissue::TumorRim;
                }
                if d <= Tumor::EDEMA && base != Tissue::Ventricle {
                    return Tissue::Edema;
                }
            }
        }
        if matches!(base, Tissue::White | Tissue::Gray) && self.lesions.iter().any(|l| l.contains(x, y)) {
            return Tissue::Lesion;
        }
        base
    }

    /// Tissue class at each pixel centre of a `size x size` grid.
    pub fn tissue_map(&self, size: usize) -> TissueMap {
        let tissues = (0..size * size)
            .map(|i| {
                let (x, y) = pixel_center(i % size, i / size, size);
                self.tissue_at(x, y)
            })
            .collect();
        TissueMap { size, tissues }
    }

    /// Partial-volume rendering: each pixel averages a 3x3 subsample grid.
    pub fn render(&self, modality: Modality, size: usize) -> Vec<f32> {
        let table = intensity_table(modality);
        let step = 2.0 / size as f64;
        let mut out = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                let (x0, y0) = pixel_center(col, row, size);
                let mut acc = 0.0;
                for si in -1..=1 {
                    for sj in -1..=1 {
                        let (x, y) = (x0 + sj as f64 * step / 3.0, y0 + si as f64 * step / 3.0);
                        let tissue = self.tissue_at(x, y);
                        let mut v = table[tissue as usize];
                        if matches!(tissue, Tissue::Scalp | Tissue::Csf | Tissue::Gray | Tissue::White) {
                            v *= 1.0 + self.texture.at(x, y);
                        }
                        acc += v;
                    }
                }
                out.push((acc / 9.0).clamp(0.0, 1.0) as f32);
            }
        }
        out
    }
}

fn pixel_center(col: usize, row: usize, size: usize) -> (f64, f64) {
    ((col as f64 + 0.5) / size as f64 * 2.0 - 1.0, (row as f64 + 0.5) / size as f64 * 2.0 - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TissueMap {
    pub size: usize,
    pub tissues: Vec<Tissue>,
}

impl TissueMap {
    pub fn area(&self, tissue: Tissue) -> usize {
        self.tissues.iter().filter(|&&t| t == tissue).count()
    }

    /// 8-connected components of pixels belonging to any of `tissues`.
    pub fn components(&self, tissues: &[Tissue]) -> usize {
        let n = self.size;
        let mut seen = vec![false; n * n];
        let mut count = 0;
        for start in 0..n * n {
            if seen[start] || !tissues.contains(&self.tissues[start]) {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (r, c) = ((i / n) as isize, (i % n) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= n as isize || cc >= n as isize {
                            continue;
                        }
                        let j = rr as usize * n + cc as usize;
                        if !seen[j] && tissues.contains(&self.tissues[j]) {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        count
    }

    /// Foreground/background split; identical across modalities of one subject.
    pub fn boundary_mask(&self) -> Vec<bool> {
        self.tissues.iter().map(|&t| t != Tissue::Background).collect()
    }
}

/// Render one phantom as a `(1, size, size)` tensor with values in `[0, 1]`.
pub fn generate_phantom(anatomy_seed: u64, label: ConditionLabel, size: usize) -> Result<Tensor<f32>> {
    if size < 32 || size % 4 != 0 {
        return Err(Error::InvalidArgument(format!("phantom size must be >= 32 and a multiple of 4, got {size}")));
    }
    let spec = AnatomySpec::new(anatomy_seed, label.pathology);
    Ok(Tensor::from_vec([1, size, size], spec.render(label.modality, size))?)
}

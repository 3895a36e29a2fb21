//! Phantom datasets on disk: PNG images plus a tab-separated manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lphom_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io;
use crate::label::{CellGrid, ConditionLabel, Modality, Pathology};
use crate::phantom::generate_phantom;
use crate::seed::{mix, stream};

pub const MANIFEST_HEADER: &str = "# phantom-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Image counts per cell of the reference clinical collection.
pub fn reference_counts() -> CellGrid<u64> {
    use Modality::*;
    use Pathology::*;
    CellGrid::from_fn(|l| match (l.pathology, l.modality) {
        (Healthy, T1w) => 957,
        (Healthy, T2w) | (Healthy, Pd) => 578,
        (Glioblastoma, Pd) => 0,
        (Glioblastoma, _) => 887,
        (Sclerosis, T1ce) => 30,
        (Sclerosis, Pd) => 19,
        (Sclerosis, _) => 49,
        (Dementia, T1w) => 139,
        _ => 0,
    })
}

/// Reference counts multiplied by `scale` and rounded up.
pub fn scaled_counts(scale: f64) -> Result<CellGrid<i64>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::Config(format!("dataset scale must be a non-negative number, got {scale}")));
    }
    let reference = reference_counts();
    // The small slack keeps e.g. 30 * 0.1 from rounding up to 4.
    Ok(CellGrid::from_fn(|l| (*reference.get(l) as f64 * scale - 1e-9).ceil().max(0.0) as i64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Parse(format!("unknown split `{s}`"))),
        }
    }
}

/// Number of validation images for a cell holding `n` images.
pub fn val_count(n: usize) -> usize {
    match n {
        0 => 0,
        1..=9 => 1,
        _ => (n as f64 / 10.0).round() as usize,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub counts: CellGrid<i64>,
    pub size: usize,
    pub master_seed: u64,
}

impl DatasetConfig {
    pub fn scaled(scale: f64, size: usize, master_seed: u64) -> Result<Self> {
        Ok(Self { counts: scaled_counts(scale)?, size, master_seed })
    }

    /// Every image the config describes, in cell-major order.
    pub fn plan(&self) -> Result<Vec<ManifestRecord>> {
        let mut out = Vec::new();
        let base = mix(self.master_seed, stream::DATASET);
        for (label, &count) in self.counts.iter() {
            if count < 0 {
                return Err(Error::Config(format!("negative image count {count} for {label}")));
            }
            let n = count as usize;
            let first_val = n - val_count(n);
            for i in 0..n {
                // Keyed by pathology and index only: modalities of one subject share anatomy.
                let seed = mix(base, ((label.pathology.index() as u64) << 32) | i as u64);
                out.push(ManifestRecord {
                    path: PathBuf::from(format!("images/{}/{i:04}.png", label.slug())),
                    label,
                    split: if i >= first_val { Split::Val } else { Split::Train },
                    seed,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: ConditionLabel,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn coverage(&self) -> CellGrid<usize> {
        let mut grid = CellGrid::filled(0);
        for r in &self.records {
            *grid.get_mut(r.label) += 1;
        }
        grid
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.path.display(),
                r.label.pathology,
                r.label.modality,
                r.split,
                r.seed
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
            return Err(Error::Parse(format!("manifest must start with `{MANIFEST_HEADER}`")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |msg: String| Error::Parse(format!("manifest line {}: {msg}", i + 2));
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let pathology: Pathology = fields[1].parse().map_err(|e: Error| bad(e.to_string()))?;
            let modality: Modality = fields[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                label: ConditionLabel::new(pathology, modality),
                split: fields[3].parse().map_err(|e: Error| bad(e.to_string()))?,
                seed: fields[4].parse().map_err(|_| bad(format!("invalid seed `{}`", fields[4])))?,
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Render every planned image under `dir` and write `dir/manifest.tsv`.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    let records = config.plan()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in &records {
        let img = generate_phantom(r.seed, r.label, config.size)?;
        image_io::write_gray(&dir.join(&r.path), config.size, config.size, img.data())?;
    }
    let manifest = DatasetManifest { records };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `(1, size, size)` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: ConditionLabel,
    pub split: Split,
}

/// Decode every image of a manifest, optionally in seeded shuffled order.
pub fn load_dataset(manifest_path: &Path, shuffle_seed: Option<u64>) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let path = root.join(&r.path);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let (w, h, values) = image_io::read_gray(&path)?;
        samples.push(Sample { image: Tensor::from_vec([1, h, w], values)?, label: r.label, split: r.split });
    }
    if let Some(seed) = shuffle_seed {
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(samples)
}

/// Render a config's images in memory without touching the filesystem.
pub fn render_in_memory(config: &DatasetConfig) -> Result<Vec<Sample>> {
    config
        .plan()?
        .into_iter()
        .map(|r| {
            Ok(Sample { image: generate_phantom(r.seed, r.label, config.size)?, label: r.label, split: r.split })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        assert_eq!(val_count(0), 0);
        assert_eq!(val_count(2), 1);
        assert_eq!(val_count(9), 1);
        assert_eq!(val_count(14), 1);
        assert_eq!(val_count(58), 6);
        assert_eq!(val_count(96), 10);
    }

    #[test]
    fn negative_counts_rejected() {
        let mut cfg = DatasetConfig::scaled(0.0, 32, 1).unwrap();
        *cfg.counts.get_mut(ConditionLabel::from_cell(3).unwrap()) = -1;
        assert!(matches!(cfg.plan(), Err(Error::Config(_))));
        assert!(scaled_counts(-0.5).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let cfg = DatasetConfig::scaled(0.01, 32, 9).unwrap();
        let m = DatasetManifest { records: cfg.plan().unwrap() };
        assert!(m.to_text().starts_with("# phantom-manifest v1\n"));
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        let bad = "# phantom-manifest v1\nimages/a.png\tHealthy\tT3\ttrain\t1\n";
        let err = DatasetManifest::parse(bad).unwrap_err().to_string();
        assert!(err.contains("T3"), "{err}");
        assert!(DatasetManifest::parse("images/a.png\tHealthy\tT1w\ttrain\t1\n").is_err());
    }

    #[test]
    fn modalities_share_anatomy_seeds() {
        let cfg = DatasetConfig::scaled(0.1, 64, 3).unwrap();
        let plan = cfg.plan().unwrap();
        let seeds = |p: Pathology, m: Modality| -> Vec<u64> {
            plan.iter().filter(|r| r.label == ConditionLabel::new(p, m)).map(|r| r.seed).collect()
        };
        let t1 = seeds(Pathology::Glioblastoma, Modality::T1w);
        assert_eq!(t1, seeds(Pathology::Glioblastoma, Modality::Flair));
        assert_ne!(t1[..5], seeds(Pathology::Healthy, Modality::T1w)[..5]);
    }
}

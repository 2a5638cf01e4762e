//! Synthetic multi-slice volumes with a known lesion location.
//!
//! Backgrounds are smooth sums of broad 3D Gaussian blobs plus faint noise.
//! A positive exam additionally carries one bright, compact ellipsoid that
//! spans 2 to 4 consecutive slices. Intensities are scaled to an MRI-like
//! range of roughly 0 to 1000.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

use super::{read_labels, write_labels, Dataset, Orientation, Volume};

const INTENSITY: f32 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub lesion_rate: f64,
    pub seed: u64,
    #[serde(default = "default_orientation")]
    pub orientation: Orientation,
}

fn default_orientation() -> Orientation {
    Orientation::Axial
}

impl SynthConfig {
    pub fn new(n: usize, slices: usize, size: usize, lesion_rate: f64, seed: u64) -> Self {
        SynthConfig {
            n,
            slices,
            height: size,
            width: size,
            lesion_rate,
            seed,
            orientation: Orientation::Axial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::invalid("synthetic dataset needs n >= 1 and slices of at least 8x8"));
        }
        if self.slices < 4 {
            return Err(Error::invalid("synthetic volumes need at least 4 slices"));
        }
        if !(0.0..=1.0).contains(&self.lesion_rate) {
            return Err(Error::invalid(format!("lesion rate {} outside [0, 1]", self.lesion_rate)));
        }
        Ok(())
    }

    pub fn exam_id(&self, i: usize) -> String {
        format!("{i:04}")
    }
}

/// Geometry of one lesion, in pixels and slice indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Inclusive slice range.
    pub first: usize,
    pub last: usize,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub amplitude: f64,
}

impl Lesion {
    /// In-plane radius scale on slice `z`; zero outside the lesion.
    fn cross_section(&self, z: usize) -> f64 {
        if z < self.first || z > self.last {
            return 0.0;
        }
        let mid = (self.first + self.last) as f64 / 2.0;
        let half = (self.last - self.first + 1) as f64 / 2.0;
        (1.0 - ((z as f64 - mid) / half).powi(2)).sqrt()
    }

    /// Fraction of full lesion intensity at `(z, y, x)`.
    pub fn weight(&self, z: usize, y: usize, x: usize) -> f64 {
        let c = self.cross_section(z);
        if c == 0.0 {
            return 0.0;
        }
        let dx = (x as f64 - self.center[0]) / (self.radii[0] * c);
        let dy = (y as f64 - self.center[1]) / (self.radii[1] * c);
        let r = (dx * dx + dy * dy).sqrt();
        // flat core with a short linear rim
        ((1.25 - r) / 0.25).clamp(0.0, 1.0)
    }
}

/// On-disk description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SynthConfig,
    pub exam_ids: Vec<String>,
    pub labels: Vec<u8>,
    /// Inclusive lesion slice range per exam (`null` for negatives).
    pub lesion_slices: Vec<Option<[usize; 2]>>,
    pub lesions: Vec<Option<Lesion>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub lesions: Vec<Option<Lesion>>,
}

fn gaussian_axis(n: usize, center: f64, sigma: f64) -> Vec<f64> {
    (0..n).map(|i| (-(i as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp()).collect()
}

fn generate_volume(cfg: &SynthConfig, exam: usize, positive: bool) -> (Vec<f32>, Option<Lesion>) {
    let (s, h, w) = (cfg.slices, cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[exam as u64]));
    let mut field = vec![rng.random_range(0.15..0.3); s * h * w];

    let blobs = rng.random_range(4..=7);
    for _ in 0..blobs {
        let amp = rng.random_range(0.1..0.35);
        let gx = gaussian_axis(w, rng.random_range(0.0..w as f64), rng.random_range(0.12..0.3) * w as f64);
        let gy = gaussian_axis(h, rng.random_range(0.0..h as f64), rng.random_range(0.12..0.3) * h as f64);
        let gz = gaussian_axis(s, rng.random_range(0.0..s as f64), rng.random_range(1.5..4.0));
        for z in 0..s {
            for y in 0..h {
                let a = amp * gz[z] * gy[y];
                let row = &mut field[(z * h + y) * w..(z * h + y + 1) * w];
                for (v, g) in row.iter_mut().zip(&gx) {
                    *v += a * g;
                }
            }
        }
    }
    for v in field.iter_mut() {
        *v += rng.random_range(-0.02..0.02);
    }

    let lesion = positive.then(|| {
        let span = rng.random_range(2..=4usize);
        let first = rng.random_range(0..=s - span);
        let size = w.min(h) as f64;
        let radii = [rng.random_range(0.04..0.07) * size, rng.random_range(0.04..0.07) * size];
        let margin = [radii[0] * 1.5 + 2.0, radii[1] * 1.5 + 2.0];
        let center = [
            rng.random_range(margin[0]..w as f64 - margin[0]),
            rng.random_range(margin[1]..h as f64 - margin[1]),
        ];
        Lesion {
            first,
            last: first + span - 1,
            center,
            radii,
            amplitude: rng.random_range(0.5..0.8),
        }
    });
    if let Some(l) = &lesion {
        for z in l.first..=l.last {
            for y in 0..h {
                for x in 0..w {
                    field[(z * h + y) * w + x] += l.amplitude * l.weight(z, y, x);
                }
            }
        }
    }
    let data = field.into_iter().map(|v| (v.max(0.0) as f32) * INTENSITY).collect();
    (data, lesion)
}

impl SynthDataset {
    /// Generates the dataset; `round(n * lesion_rate)` exams are positive.
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let positives = (cfg.n as f64 * cfg.lesion_rate).round() as usize;
        let mut order: Vec<usize> = (0..cfg.n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[u64::MAX])));
        let mut labels = vec![0u8; cfg.n];
        for &i in &order[..positives] {
            labels[i] = 1;
        }

        let generated: Vec<(Vec<f32>, Option<Lesion>)> = {
            use rayon::prelude::*;
            (0..cfg.n)
                .into_par_iter()
                .map(|i| generate_volume(cfg, i, labels[i] == 1))
                .collect()
        };
        let mut dataset = Dataset::default();
        let mut lesions = Vec::with_capacity(cfg.n);
        for (i, (data, lesion)) in generated.into_iter().enumerate() {
            let t = Tensor::from_vec([cfg.slices, cfg.height, cfg.width], data)?;
            dataset.volumes.push(Volume::new(cfg.exam_id(i), cfg.orientation, t)?);
            dataset.labels.push(labels[i]);
            dataset.lesions.push(lesion.map(|l| (l.first, l.last)));
            lesions.push(lesion);
        }
        Ok(SynthDataset {
            config: cfg.clone(),
            dataset,
            lesions,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            config: self.config.clone(),
            exam_ids: self.dataset.volumes.iter().map(|v| v.id.clone()).collect(),
            labels: self.dataset.labels.clone(),
            lesion_slices: self.dataset.lesions.iter().map(|l| l.map(|(a, b)| [a, b])).collect(),
            lesions: self.lesions.clone(),
        }
    }

    /// Writes `volumes/<id>.npy`, `labels.csv` and `manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("volumes"))?;
        for v in &self.dataset.volumes {
            v.write(dir.join("volumes").join(format!("{}.npy", v.id)))?;
        }
        let ids = self.dataset.volumes.iter().map(|v| v.id.clone());
        write_labels(dir.join("labels.csv"), ids.zip(self.dataset.labels.iter().copied()))?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        Ok(())
    }

    /// Loads a dataset written by [`SynthDataset::write`].
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let labels = read_labels(dir.join("labels.csv"))?;
        let n = manifest.exam_ids.len();
        if manifest.labels.len() != n || manifest.lesion_slices.len() != n || manifest.lesions.len() != n {
            return Err(Error::format("manifest arrays have different lengths"));
        }
        let mut dataset = Dataset::default();
        for (i, id) in manifest.exam_ids.iter().enumerate() {
            if labels.get(id) != Some(&manifest.labels[i]) {
                return Err(Error::format(format!("labels.csv disagrees with the manifest for exam {id}")));
            }
            let mut v = Volume::read(dir.join("volumes").join(format!("{id}.npy")), manifest.config.orientation)?;
            v.id = id.clone();
            dataset.volumes.push(v);
            dataset.labels.push(manifest.labels[i]);
            dataset.lesions.push(manifest.lesion_slices[i].map(|[a, b]| (a, b)));
        }
        Ok(SynthDataset {
            config: manifest.config,
            dataset,
            lesions: manifest.lesions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_has_no_positives() {
        let d = SynthDataset::generate(&SynthConfig::new(10, 6, 32, 0.0, 1)).unwrap();
        assert!(d.dataset.labels.iter().all(|l| *l == 0));
        assert!(d.lesions.iter().all(Option::is_none));
    }

    #[test]
    fn reproducible() {
        let cfg = SynthConfig::new(6, 5, 24, 0.5, 3);
        assert_eq!(SynthDataset::generate(&cfg).unwrap(), SynthDataset::generate(&cfg).unwrap());
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(SynthDataset::generate(&cfg).unwrap(), SynthDataset::generate(&other).unwrap());
    }

    #[test]
    fn positive_count_and_lesion_geometry() {
        let cfg = SynthConfig::new(40, 8, 48, 0.25, 5);
        let d = SynthDataset::generate(&cfg).unwrap();
        assert_eq!(d.dataset.labels.iter().filter(|l| **l == 1).count(), 10);
        for (i, l) in d.lesions.iter().enumerate() {
            assert_eq!(l.is_some(), d.dataset.labels[i] == 1);
            if let Some(l) = l {
                let span = l.last - l.first + 1;
                assert!((2..=4).contains(&span) && l.last < 8);
                // every slice of the range actually contains lesion pixels
                for z in l.first..=l.last {
                    assert!(l.weight(z, l.center[1].round() as usize, l.center[0].round() as usize) > 0.0);
                }
            }
        }
    }

    #[test]
    fn lesions_are_brighter_than_background() {
        let cfg = SynthConfig::new(30, 6, 40, 0.5, 9);
        let d = SynthDataset::generate(&cfg).unwrap();
        for (v, l) in d.dataset.volumes.iter().zip(&d.lesions) {
            let Some(l) = l else { continue };
            let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
            for z in 0..6 {
                for y in 0..40 {
                    for x in 0..40 {
                        let val = v.data.data()[(z * 40 + y) * 40 + x] as f64;
                        if l.weight(z, y, x) > 0.0 {
                            inside = (inside.0 + val, inside.1 + 1);
                        } else {
                            outside = (outside.0 + val, outside.1 + 1);
                        }
                    }
                }
            }
            assert!(inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthDataset::generate(&SynthConfig::new(0, 6, 32, 0.5, 1)).is_err());
        assert!(SynthDataset::generate(&SynthConfig::new(3, 6, 32, 1.5, 1)).is_err());
        assert!(SynthDataset::generate(&SynthConfig::new(3, 2, 32, 0.5, 1)).is_err());
    }
}

//! Volumes, label tables and the preprocessing pipeline.

pub mod augment;
pub mod npy;
pub(crate) mod resize;
mod sampling;
pub mod standardize;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{AugmentDraw, AugmentSpec};
pub use npy::{read_npy, write_npy};
pub use resize::resize_volume;
pub use sampling::oversample_indices;
pub use standardize::StandardScale;
pub use synth::{SynthConfig, SynthDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    /// Whether right-angle rotations are a valid augmentation.
    pub fn allows_right_angles(self) -> bool {
        matches!(self, Orientation::Axial | Orientation::Coronal)
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            "sagittal" => Ok(Orientation::Sagittal),
            other => Err(Error::invalid(format!("unknown orientation {other:?}"))),
        }
    }
}

/// One exam: `S` grayscale slices of `H x W` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    pub orientation: Orientation,
    /// `(S, H, W)`.
    pub data: Tensor<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, orientation: Orientation, data: Tensor<f32>) -> Result<Self> {
        if data.shape().rank() != 3 {
            return Err(Error::shape("volume", format!("expected (S, H, W), got {}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("volume"));
        }
        Ok(Volume {
            id: id.into(),
            orientation,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>, orientation: Orientation) -> Result<Self> {
        let path = path.as_ref();
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Volume::new(id, orientation, read_npy(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_npy(path, &self.data)
    }

    pub fn slices(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub(crate) fn with_data(&self, data: Vec<f32>, dims: [usize; 3]) -> Result<Self> {
        Ok(Volume {
            id: self.id.clone(),
            orientation: self.orientation,
            data: Tensor::from_vec(dims, data)?,
        })
    }

    /// The network input layout `(S, 1, H, W)`.
    pub fn to_input(&self) -> Tensor<f32> {
        self.data
            .reshape([self.slices(), 1, self.height(), self.width()])
            .expect("same element count")
    }
}

/// Binary labels for one pathology, keyed by exam id.
pub type Labels = BTreeMap<String, u8>;

/// Reads a CSV with header `exam_id,label`.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels> {
    #[derive(Deserialize)]
    struct Row {
        exam_id: String,
        label: u8,
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Labels::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        if row.label > 1 {
            return Err(Error::format(format!("label {} for exam {} is not 0 or 1", row.label, row.exam_id)));
        }
        if out.insert(row.exam_id.clone(), row.label).is_some() {
            return Err(Error::format(format!("exam {} is listed twice", row.exam_id)));
        }
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, labels: impl IntoIterator<Item = (String, u8)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["exam_id", "label"])?;
    for (id, label) in labels {
        w.write_record([id, label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-pathology labels of a set of exams; an exam may be positive for
/// several pathologies at once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelTable {
    pub pathologies: BTreeMap<String, Labels>,
}

impl LabelTable {
    /// Loads one `exam_id,label` file per pathology.
    pub fn read<P: AsRef<Path>>(files: impl IntoIterator<Item = (String, P)>) -> Result<Self> {
        let pathologies = files
            .into_iter()
            .map(|(name, path)| Ok((name, read_labels(path)?)))
            .collect::<Result<_>>()?;
        Ok(LabelTable { pathologies })
    }

    pub fn labels(&self, pathology: &str) -> Result<&Labels> {
        self.pathologies
            .get(pathology)
            .ok_or_else(|| Error::invalid(format!("no labels for pathology {pathology:?}")))
    }

    /// All labels of one exam, by pathology.
    pub fn exam(&self, id: &str) -> BTreeMap<&str, u8> {
        self.pathologies
            .iter()
            .filter_map(|(p, l)| l.get(id).map(|v| (p.as_str(), *v)))
            .collect()
    }
}

/// Labeled volumes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub volumes: Vec<Volume>,
    pub labels: Vec<u8>,
    /// Inclusive lesion slice range per exam, when known.
    pub lesions: Vec<Option<(usize, usize)>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            volumes: indices.iter().map(|&i| self.volumes[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            lesions: indices.iter().map(|&i| self.lesions.get(i).copied().flatten()).collect(),
        }
    }

    /// Loads `<dir>/<exam_id>.npy` for every exam in the label file.
    pub fn read_dir(dir: impl AsRef<Path>, labels: &Labels, orientation: Orientation) -> Result<Self> {
        let dir = dir.as_ref();
        let mut out = Dataset::default();
        for (id, label) in labels {
            let mut v = Volume::read(dir.join(format!("{id}.npy")), orientation)?;
            v.id = id.clone();
            out.volumes.push(v);
            out.labels.push(*label);
            out.lesions.push(None);
        }
        Ok(out)
    }
}

/// Standardizes and resizes every volume. Work is spread over the rayon
/// pool; each volume is handled independently, so the result does not
/// depend on the number of workers.
pub fn preprocess_all(volumes: &[Volume], scale: &StandardScale, target: [usize; 2]) -> Result<Vec<Volume>> {
    volumes
        .par_iter()
        .map(|v| resize_volume(&scale.apply(v)?, target))
        .collect()
}

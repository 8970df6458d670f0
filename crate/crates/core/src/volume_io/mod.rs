//! Case storage, synthetic phantom generation and intensity normalization.

mod phantom;
mod storage;

pub use phantom::{generate_phantom, IntensityProfile, PhantomSpec, Region, RegionStats};
pub use storage::{generate_dataset, load_case, save_case, DatasetManifest, Split};

use crate::error::{Error, Result};
use crate::modality::Modality;

/// Label ids: background, necrotic/non-enhancing core, edema, enhancing.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CORE: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 3;
pub const NUM_CLASSES: usize = 4;

pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape.iter().product()
}

/// One modality's scalar grid, C-order `D → H → W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume shape {shape:?} has a zero extent")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape {
                op: "volume",
                detail: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i} is {}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != voxel_count(shape) {
            return Err(Error::Shape {
                op: "labels",
                detail: format!("{} labels for shape {shape:?}", labels.len()),
            });
        }
        if let Some(v) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label id {v} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { shape, labels })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Four co-registered modalities, labels and brain mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    /// Canonical order t1, tc, t2, fl.
    pub volumes: [Volume; 4],
    pub labels: LabelVolume,
    pub brain_mask: Vec<bool>,
}

impl CaseRecord {
    pub fn new(case_id: String, volumes: [Volume; 4], labels: LabelVolume, brain_mask: Vec<bool>) -> Result<Self> {
        let shape = labels.shape();
        if volumes.iter().any(|v| v.shape() != shape) || brain_mask.len() != voxel_count(shape) {
            return Err(Error::Shape {
                op: "case",
                detail: format!("case {case_id}: volume, label and mask shapes differ"),
            });
        }
        if labels.labels().iter().zip(&brain_mask).any(|(&l, &m)| l != 0 && !m) {
            return Err(Error::Contract(format!("case {case_id}: labelled voxel outside brain mask")));
        }
        Ok(Self {
            case_id,
            volumes,
            labels,
            brain_mask,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.labels.shape()
    }

    pub fn volume(&self, m: Modality) -> &Volume {
        &self.volumes[m.index()]
    }

    /// Every modality z-scored inside the brain mask.
    pub fn normalized(&self) -> Result<CaseRecord> {
        let volumes = [0, 1, 2, 3].map(|i| zscore_normalize(&self.volumes[i], &self.brain_mask));
        let [a, b, c, d] = volumes;
        Ok(CaseRecord {
            case_id: self.case_id.clone(),
            volumes: [a?, b?, c?, d?],
            labels: self.labels.clone(),
            brain_mask: self.brain_mask.clone(),
        })
    }
}

/// Zero mean and unit (population) variance over masked voxels; voxels
/// outside the mask become 0.
pub fn zscore_normalize(v: &Volume, mask: &[bool]) -> Result<Volume> {
    if mask.len() != v.data.len() {
        return Err(Error::Shape {
            op: "zscore_normalize",
            detail: format!("mask of {} voxels for volume of {}", mask.len(), v.data.len()),
        });
    }
    let masked = || v.data.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x as f64);
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::Degenerate(format!("mask has {n} voxels; at least 2 are needed")));
    }
    let mean = masked().sum::<f64>() / n as f64;
    let var = masked().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Degenerate("zero intensity variance inside mask".into()));
    }
    let inv = 1.0 / var.sqrt();
    let data = v
        .data
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { ((x as f64 - mean) * inv) as f32 } else { 0.0 })
        .collect();
    Volume::new(v.shape, data)
}

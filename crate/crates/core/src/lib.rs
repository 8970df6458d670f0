//! Incomplete multi-modal brain tumor segmentation: modality decoupling,
//! channel-wise sparse self-attention, relationship-based feature
//! compensation and a 3D U-Net, on a small reverse-mode autodiff engine.

pub mod ablation;
pub mod backbone;
pub mod cssa;
pub mod decoupler;
pub mod diffops;
pub mod error;
pub mod evaluator;
pub mod gradient_suite;
pub mod layers;
pub mod losses;
pub mod modality;
pub mod rcr;
pub mod trainer;
pub mod volume_io;

pub use backbone::{Components, DeMoSeg, Profile, UNetConfig};
pub use error::{Error, Result};
pub use evaluator::{EvalConfig, ScenarioTable};
pub use losses::{KdPlacement, LossConfig};
pub use modality::{Modality, ModalityIndicator, RelationshipTable};
pub use trainer::{Checkpoint, TrainConfig};
pub use volume_io::{CaseRecord, DatasetManifest, Shape3};

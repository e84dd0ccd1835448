//! Conditional diffusion for MRI super-resolution with a second, co-registered
//! contrast as guidance.

pub mod ablation;
pub mod curriculum;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod training;
pub mod unet;

pub use curriculum::{CurriculumConfig, EntropyIndex};
pub use data::{Manifest, SliceRecord, Split};
pub use diffusion::{ConditionPair, NoisePredictor, NoiseSchedule, Prediction};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, UncertaintyMaps};
pub use losses::{LossWeights, ReconLoss};
pub use training::{Checkpoint, TrainConfig, Trainer};
pub use unet::{DisentangledUNet, ModelConfig, ModelOutput, Representations};

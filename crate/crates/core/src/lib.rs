//! Few-shot scene-adaptive video anomaly detection.
//!
//! A future-frame prediction backbone (U-Net + ConvLSTM, adversarially
//! pre-trained) is meta-trained with a bilevel gradient procedure so that a
//! single inner gradient step on K frame pairs from an unseen camera scene
//! yields scene-specific parameters. Frame-level anomaly scores come from
//! per-video normalized prediction PSNR, evaluated with ROC-AUC.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metalearn;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{ClipTensor, FrameTensor, ParamSet, PredictorState};

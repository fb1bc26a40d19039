//! Interactive facial-image retrieval driven by attribute relevance feedback.
//!
//! A witness compares each shown candidate with the face they remember and
//! marks attributes as matching or not. A recurrent dialog model folds the
//! feedback into a query vector, and the gallery is searched by L2 distance.

pub mod dialog_model;
pub mod error;
pub mod evaluator;
pub mod feedback_sim;
pub mod gallery;
pub mod retriever;
pub mod rng;
#[cfg(feature = "service")]
pub mod service;
pub mod tensor_ops;
pub mod trainer;

pub use dialog_model::{DialogState, ModelDims, ModelParameters, RoundInput};
pub use error::{Error, Result};
pub use evaluator::{baseline_bounds, compare_modes, eval_rounds, ranking_percentile, BaselineBounds, EvalReport};
pub use feedback_sim::{
    AttributeVector, DisclosureMode, DisclosureSchedule, MaskPlan, MaskStrategy, RelevanceVector,
};
pub use gallery::{Gallery, GalleryRecord};
pub use retriever::{scan_top_k, FeatureMatrix, ScanResult};
pub use rng::SeedStream;
pub use trainer::{Checkpoint, TrainConfig, Trainer};

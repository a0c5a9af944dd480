//! Discriminative linear mappings for few-shot transfer between domains with
//! different feature spaces.
//!
//! A data-rich LTM domain and a data-poor SM domain are both mapped linearly
//! into a shared latent space where every class forms a compact cluster. SM
//! instances are pulled toward the geometric medians of the LTM clusters, and
//! a final classifier is trained on both domains together.

pub mod augment;
pub mod classify;
pub mod dataset;
pub mod discriminant;
pub mod error;
pub mod experiment;
pub mod mapping;
pub mod median;
pub mod numerics;
pub mod pipeline;
mod serde_matrix;
pub mod synth;

pub use classify::{accuracy, ClassifierKind, ClassifierSpec, Gamma};
pub use dataset::{LabeledDataset, PcaModel, Split, SplitSpec, Standardizer};
pub use discriminant::{LinearMap, MapKind};
pub use error::{CdmError, Result};
pub use experiment::{ExperimentConfig, ExperimentReport};
pub use median::{ClusterSummary, LatentEmbedding};
pub use pipeline::{cdm_fit, cdm_predict, CdmConfig, CdmModel, Diagnostics, LatentDim, PApproach};
pub use synth::{SynthData, SynthParams};

//! Multimodal self-supervised fusion on paired images.
//!
//! Two modalities are encoded by patch-location encoders and trained with a
//! graph of contrastive (InfoNCE) edges plus optional CCA, reconstruction
//! and supervised terms. Frozen representations are then evaluated with a
//! logistic-regression probe, compared across modalities with CKA and
//! SVCCA, and inspected with SmoothGrad saliency maps.

pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod introspect;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rng;
pub mod similarity;
pub mod stats;
pub mod synthdata;
pub mod tensor;

pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use model::FusionModel;
pub use objectives::{CriticConfig, ObjectiveGraph, PRESETS};
pub use optim::{train, TrainConfig, TrainOutcome};
pub use probe::{RepresentationReport, SearchSpace};
pub use similarity::SimilarityReport;
pub use synthdata::{generate, GeneratorConfig, Group, PairedDataset, Split};
pub use tensor::Tensor;

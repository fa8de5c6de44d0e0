//! Dual-branch hash learning with mutual supervision and a mixture of hash experts.
//!
//! Two branches produce continuous codes from shared features: a center branch
//! trained against fixed hash centers and a pairwise branch trained on label
//! agreement between samples. Each branch also learns from the other through a
//! cosine objective whose detached side alternates every epoch. Both branches
//! route through one shared pool of experts that emit codes directly.
//!
//! Modules, bottom up:
//!
//! - [`diff`]: reverse-mode differentiation over dense matrices
//! - [`codebook`]: hash-center distance selection and construction
//! - [`moh`]: the expert pool, gates and binarization
//! - [`losses`]: the three objectives and their weighted sum
//! - [`trainer`]: the RMSProp training loop and encoding
//! - [`retrieval`]: packed Hamming search, mAP@k and PR curves
//! - [`dataio`]: synthetic data, feature files and splits

pub mod codebook;
pub mod dataio;
pub mod diff;
pub mod format;
pub mod losses;
pub mod moh;
pub mod retrieval;
pub mod rng;
pub mod trainer;

pub use codebook::{
    build_codebook, generate_centers, gv_min_distance, verify_codebook, Codebook, DistanceMode,
    HashConfig,
};
pub use dataio::{split, synth_clusters, FeatureDataset, LabelMatrix, Split, SynthConfig};
pub use diff::{finite_diff_check, Graph, NodeId, Tensor};
pub use losses::{LossBreakdown, LossWeights};
pub use moh::{binarize, build_model, Branch, ExpertKind, MoHConfig, MoHModel};
pub use retrieval::{map_at_k, pack, pr_curve, search, BinaryCodes, EvalResult, PackedCodes};
pub use trainer::{encode, train, TrainConfig, TrainReport};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Codebook(#[from] codebook::CodebookError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Diff(#[from] diff::DiffError),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Model(#[from] moh::ModelError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
}

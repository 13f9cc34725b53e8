//! Multi-task self-supervised representation learning for triaxial
//! accelerometer windows.
//!
//! A temporal convolutional network is pretrained to recognize eight signal
//! transformations, then its trunk is transferred to an activity classifier.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
mod kernels;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use autograd::{Graph, Var};
pub use data::{RawRecording, WindowedDataset};
pub use error::{Error, Result};
pub use metrics::{cohen_kappa, weighted_prf, EvalReport, Metrics};
pub use networks::{ActivityClassifier, Autoencoder, FreezeMode, Tpn, TrunkLayer};
pub use optim::{AdamConfig, AdamState};
pub use params::ParamStore;
pub use synth::{synth_generate, SynthConfig};
pub use tensor::Tensor;
pub use training::{pretrain_autoencoder, pretrain_tpn, train_classifier, RunLog, TrainConfig};
pub use transforms::{
    apply_transform, generate_selfsup_dataset, SelfSupDataset, TransformConfig, TransformKind,
    TransformParams, TransformSpec,
};

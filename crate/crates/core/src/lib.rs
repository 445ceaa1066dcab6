//! Stochastic variational deep kernel learning for spectral voice conversion.
//!
//! A shared feedforward net maps source mel-cepstra into a feature space
//! where one sparse variational GP per target coefficient (sharing an SE-ARD
//! kernel) is trained jointly by Adam on the minibatch evidence lower bound.
//! Around the regressor sit the speech-feature pieces: DTW alignment of
//! parallel utterances, log-F0 linear conversion, mel-cepstral distortion and
//! warped log-spectrum rendering, plus text file formats for utterances,
//! aligned corpora, configs and checkpoints.

pub mod baseline;
pub mod deepnet;
pub mod error;
pub mod gp_exact;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod svgp;
pub mod synthetic;
pub mod trainer;
pub mod vc;

pub use deepnet::{Activation, FeedForwardNet, Layer, NetGradients};
pub use error::{Error, Result};
pub use gp_exact::ExactGpModel;
pub use kernels::{ArdKernelParams, DeepKernelSpec};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use svgp::{GaussianMoments, Normalizer, SvdklModel, SvgpHead, Variance, VariationalState};
pub use trainer::{compute_gradients, grad_check, train, train_pairs, train_regressor, Group, TrainConfig, TrainingLog};
pub use vc::{AlignedCorpus, F0Stats, Utterance, UtterancePair, WarpingConfig};
pub use baseline::{run_baseline_dnn, BaselineReport, DnnRegressor};
pub use io::{load_checkpoint, load_utterance, save_checkpoint, save_utterance, ModelCheckpoint};

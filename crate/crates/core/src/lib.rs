//! Self-supervised EEG representation learning by contrasting each sample
//! with a world representation of the batch.
//!
//! The pipeline: [`signals`] (epochs, synthetic data, subject splits) feeds
//! [`augment`] and [`spectral`] (STFT features) into the encoder of [`nn`],
//! trained by [`training`] on the objectives of [`contrastive`] and judged
//! by the linear [`probe`]. [`experiment`] strings the stages together and
//! [`store`] reads and writes dataset directories.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod probe;
pub mod signals;
pub mod spectral;
pub mod store;
pub mod training;

pub use augment::{AugmentPolicy, Method, NoiseMode};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use contrastive::{LossConfig, Variant};
pub use error::{Error, Result};
pub use experiment::{Arm, CompareTable};
pub use nn::{Encoder, ModelConfig, Network, Tensor};
pub use probe::{EmbeddingSet, Evaluation, ProbeModel};
pub use signals::{Dataset, Epoch, Split, Stage, SynthConfig};
pub use spectral::{FeatureTensor, StftConfig};
pub use training::{DualNetworkState, EpochLog};

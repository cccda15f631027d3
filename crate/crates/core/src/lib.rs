//! Dataset ownership verification for masked-model encoders.
//!
//! Given black-box access to an encoder (in-process or over HTTP), the
//! toolkit trains an embedding-space reconstruction decoder on part of a
//! public dataset, measures how hard masked embeddings are to reconstruct on
//! the held-out public split and on a private split, and decides with a
//! one-tailed paired t-test whether the encoder was pre-trained on the
//! public data.
//!
//! Module map:
//! - [`autodiff`]: dense reverse-mode AD, layers and Adam.
//! - [`data`]: samples, datasets, splits, synthetic families, file formats.
//! - [`masking`]: patch masks and their embedding-space counterparts.
//! - [`encoder`]: the provider abstraction and the toy masked pretrainer.
//! - [`decoder`]: the reconstruction decoder and its training loop.
//! - [`stats`]: paired t-test, Student-t tail, classification metrics.
//! - [`verify`]: difficulty series and the verdict.
//! - [`eaas`]: HTTP embedding service, client and conformance suite.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod eaas;
pub mod encoder;
pub mod masking;
pub mod seed;
pub mod stats;
pub mod verify;

pub use data::{Dataset, SampleShape};
pub use decoder::{DecoderModel, DecoderTrainConfig};
pub use encoder::{EmbeddingProvider, ProviderInfo, ProviderMode, ToyEncoder};
pub use stats::{MetricsReport, TTestResult};
pub use verify::{Verdict, VerificationConfig};

/// Version string embedded in reports and checkpoints.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

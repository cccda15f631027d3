//! Black-box embedding providers `M: R^m -> R^n`.
//!
//! The verifier only ever talks to an [`EmbeddingProvider`]: it sends
//! (possibly masked) samples and receives flat embeddings. Two providers ship
//! with the crate: the in-process [`ToyEncoder`] and the HTTP
//! [`RemoteProvider`](crate::eaas::RemoteProvider).

mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, SampleShape};
use crate::masking::{self, TokenLayout};
pub use crate::eaas::client::{remote_provider, RemoteProvider};
pub use toy::{pretrain_toy, ContextMode, PretrainConfig, PretrainError, PretrainLog, ToyEncoder, ToyEncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    /// One embedding block per input patch; `t̂` is meaningful.
    Token,
    /// A single output vector; reconstruction targets every component.
    Vector,
}

/// What a provider tells the verifier about itself. Nothing else about the
/// model is observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub input_shape: SampleShape,
    pub patch_h: usize,
    pub patch_w: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub n: usize,
    pub mode: ProviderMode,
    pub id: String,
}

impl ProviderInfo {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            tokens: self.tokens,
            dim: self.token_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.n == 0 || self.tokens * self.token_dim != self.n {
            return Err(ProviderError::Negotiation(format!(
                "n = {} but tokens x dim = {} x {}",
                self.n, self.tokens, self.token_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("input has {got} values, provider expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("protocol version mismatch: server {server}, client {client}")]
    VersionMismatch { server: u32, client: u32 },
    #[error("shape negotiation failed: {0}")]
    Negotiation(String),
    #[error("model error: {0}")]
    Model(String),
}

impl ProviderError {
    /// Transport failures (as opposed to model/protocol failures).
    pub fn is_transport(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn info(&self) -> &ProviderInfo;

    /// Embeds a batch of flat samples, preserving order.
    fn embed_batch(&self, samples: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn info(&self) -> &ProviderInfo {
        (**self).info()
    }

    fn embed_batch(&self, samples: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        (**self).embed_batch(samples)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn info(&self) -> &ProviderInfo {
        (**self).info()
    }

    fn embed_batch(&self, samples: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        (**self).embed_batch(samples)
    }
}

/// Default number of samples per provider request.
pub const DEFAULT_BATCH: usize = 256;

fn check_shape(info: &ProviderInfo, x: &Sample) -> Result<(), ProviderError> {
    let expected = info.input_shape.numel();
    if x.shape != info.input_shape || x.values.len() != expected {
        return Err(ProviderError::ShapeMismatch {
            expected,
            got: x.values.len(),
        });
    }
    Ok(())
}

/// `e = M(x)`.
pub fn embed(provider: &dyn EmbeddingProvider, x: &Sample) -> Result<Vec<f64>, ProviderError> {
    check_shape(provider.info(), x)?;
    let mut out = provider.embed_batch(&[&x.values])?;
    out.pop()
        .ok_or_else(|| ProviderError::Protocol("empty response".into()))
}

/// `e_t = M(x ⊙ t)`.
pub fn embed_masked(provider: &dyn EmbeddingProvider, x: &Sample, t: &[u8]) -> Result<Vec<f64>, ProviderError> {
    check_shape(provider.info(), x)?;
    let masked = masking::apply_input_mask(x, t).map_err(|e| ProviderError::Model(e.to_string()))?;
    embed(provider, &masked)
}

/// Embeds many samples in provider batches of `batch_size`, checking every
/// response for count and length.
pub fn embed_all(
    provider: &dyn EmbeddingProvider,
    samples: &[&[f64]],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, ProviderError> {
    let info = provider.info();
    let m = info.input_shape.numel();
    if let Some(bad) = samples.iter().find(|s| s.len() != m) {
        return Err(ProviderError::ShapeMismatch {
            expected: m,
            got: bad.len(),
        });
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let part = provider.embed_batch(chunk)?;
        if part.len() != chunk.len() {
            return Err(ProviderError::Protocol(format!(
                "sent {} samples, received {} embeddings",
                chunk.len(),
                part.len()
            )));
        }
        for e in &part {
            if e.len() != info.n {
                return Err(ProviderError::Protocol(format!(
                    "embedding of length {}, expected {}",
                    e.len(),
                    info.n
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(ProviderError::Model("non-finite embedding".into()));
            }
        }
        out.extend(part);
    }
    Ok(out)
}

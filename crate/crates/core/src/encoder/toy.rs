//! A small masked-image encoder and its pretraining loop.
//!
//! Architecture, per sample with `T` patches:
//!
//! ```text
//! h   = relu(patches · W_embed + b_embed + pos)          [T, d]
//! ctx = mean over tokens of h                             [T, d]
//! z   = relu(h · W_tok + ctx · W_ctx + b_mix)             [T, hidden]
//! e   = z · W_out + b_out                                 [T, d]   <- embedding
//! px  = e · W_head + b_head                               [T, patch_dim]
//! ```
//!
//! Pretraining zeroes a random subset of patches and regresses `px` onto the
//! original pixels of the masked patches only.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EmbeddingProvider, ProviderError, ProviderInfo, ProviderMode};
use crate::autodiff::{Adam, AdamConfig, AutodiffError, Graph, Params, Tensor, Var};
use crate::data::format::{self, FormatError};
use crate::data::{Dataset, SampleShape};
use crate::masking::{self, MaskError, PatchGrid};
use crate::seed;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("dataset shape {got:?} does not match encoder input {expected:?}")]
    ShapeMismatch { expected: SampleShape, got: SampleShape },
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: AutodiffError,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEncoderConfig {
    pub input_shape: SampleShape,
    pub patch: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub mode: ProviderMode,
    #[serde(default)]
    pub context: ContextMode,
}

/// How the token-mixing layer summarizes the other tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Mean of all token embeddings.
    #[default]
    Mean,
    /// All token embeddings concatenated in patch order (position-aware).
    Concat,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            input_shape: SampleShape::default(),
            patch: 4,
            token_dim: 8,
            hidden: 64,
            mode: ProviderMode::Token,
            context: ContextMode::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: ToyEncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub ratio: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: ToyEncoderConfig::default(),
            epochs: 20,
            batch_size: 32,
            ratio: 0.75,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn validate(&self) -> Result<(), PretrainError> {
        let e = &self.encoder;
        if self.batch_size == 0 || e.token_dim == 0 || e.hidden == 0 || e.patch == 0 {
            return Err(PretrainError::InvalidConfig("sizes must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(PretrainError::InvalidConfig(format!("ratio {} outside (0, 1)", self.ratio)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PretrainError::InvalidConfig(format!("lr {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub dataset: String,
    pub samples: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    kind: String,
    tool_version: String,
    pretrain: PretrainConfig,
    log: PretrainLog,
}

/// The in-process toy encoder. Inference is a pure function of the
/// parameters.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pretrain: PretrainConfig,
    params: Params,
    log: PretrainLog,
    grid: PatchGrid,
    info: ProviderInfo,
}

const KIND: &str = "toy_encoder";

impl ToyEncoder {
    /// Seeded initialization.
    pub fn init(pretrain: PretrainConfig) -> Result<Self, PretrainError> {
        pretrain.validate()?;
        let c = &pretrain.encoder;
        let grid = PatchGrid::new(c.input_shape, c.patch, c.patch)?;
        let (t, p, d, h) = (grid.patches(), grid.patch_dim(), c.token_dim, c.hidden);
        let mut rng = seed::rng(seed::derive(pretrain.seed, "toy-encoder-init", &[]));
        let mut params = Params::new();
        params.init_uniform("embed.w", &[p, d], p, &mut rng);
        params.init_uniform("embed.b", &[1, d], p, &mut rng);
        params.init_uniform("embed.pos", &[t, d], d, &mut rng);
        let ctx = match c.context {
            ContextMode::Mean => d,
            ContextMode::Concat => t * d,
        };
        params.init_uniform("mix.tok", &[d, h], d + ctx, &mut rng);
        params.init_uniform("mix.ctx", &[ctx, h], d + ctx, &mut rng);
        params.init_uniform("mix.b", &[1, h], d + ctx, &mut rng);
        params.init_uniform("out.w", &[h, d], h, &mut rng);
        params.init_uniform("out.b", &[1, d], h, &mut rng);
        params.init_uniform("head.w", &[d, p], d, &mut rng);
        params.init_uniform("head.b", &[1, p], d, &mut rng);
        Self::assemble(pretrain, params, PretrainLog::default())
    }

    fn assemble(pretrain: PretrainConfig, params: Params, log: PretrainLog) -> Result<Self, PretrainError> {
        let c = &pretrain.encoder;
        let grid = PatchGrid::new(c.input_shape, c.patch, c.patch)?;
        let (tokens, token_dim) = match c.mode {
            ProviderMode::Token => (grid.patches(), c.token_dim),
            ProviderMode::Vector => (1, c.token_dim),
        };
        let mut enc = Self {
            info: ProviderInfo {
                input_shape: c.input_shape,
                patch_h: c.patch,
                patch_w: c.patch,
                tokens,
                token_dim,
                n: tokens * token_dim,
                mode: c.mode,
                id: String::new(),
            },
            pretrain,
            params,
            log,
            grid,
        };
        let digest = Sha256::digest(enc.to_bytes()?);
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        enc.info.id = format!("toy-{hex}");
        Ok(enc)
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.pretrain
    }

    pub fn log(&self) -> &PretrainLog {
        &self.log
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// Same weights, reported as a single pooled vector (mean over tokens).
    pub fn into_mode(self, mode: ProviderMode) -> Result<Self, PretrainError> {
        let mut pretrain = self.pretrain;
        pretrain.encoder.mode = mode;
        Self::assemble(pretrain, self.params, self.log)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let meta = Metadata {
            kind: KIND.into(),
            tool_version: crate::TOOL_VERSION.into(),
            pretrain: self.pretrain.clone(),
            log: self.log.clone(),
        };
        format::encode_model(&meta, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| FormatError::Io(e.to_string()))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, PretrainError> {
        let (meta, params): (Metadata, Params) = format::decode_model(buf)?;
        if meta.kind != KIND {
            return Err(FormatError::Invalid(format!("expected a {KIND} checkpoint, found {}", meta.kind)).into());
        }
        let fresh = Self::init(meta.pretrain.clone())?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(FormatError::Invalid(format!("parameter {name} missing or misshapen")).into()),
            }
        }
        Self::assemble(meta.pretrain, params, meta.log)
    }

    pub fn load(path: &Path) -> Result<Self, PretrainError> {
        let buf = std::fs::read(path).map_err(|e| FormatError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Builds the forward pass for `batch` samples whose patchified values
    /// are in `patches` (`[batch * T, patch_dim]`). Returns `(embedding,
    /// pixels)`, both `[batch * T, _]`.
    fn forward(&self, g: &mut Graph, v: &BTreeMap<String, Var>, patches: Var) -> Result<(Var, Var), AutodiffError> {
        let t = self.grid.patches();
        let x = g.matmul(patches, v["embed.w"])?;
        let x = g.add_tiled(x, v["embed.b"])?;
        let x = g.add_tiled(x, v["embed.pos"])?;
        let h = g.relu(x)?;
        let a = g.matmul(h, v["mix.tok"])?;
        let b = match self.pretrain.encoder.context {
            ContextMode::Mean => {
                let ctx = g.group_mean(h, t)?;
                g.matmul(ctx, v["mix.ctx"])?
            }
            ContextMode::Concat => {
                let batch = g.value(h).shape()[0] / t;
                let flat = g.reshape(h, &[batch, t * self.pretrain.encoder.token_dim])?;
                let c = g.matmul(flat, v["mix.ctx"])?;
                g.repeat_rows(c, t)?
            }
        };
        let z = g.add(a, b)?;
        let z = g.add_tiled(z, v["mix.b"])?;
        let z = g.relu(z)?;
        let e = g.matmul(z, v["out.w"])?;
        let e = g.add_tiled(e, v["out.b"])?;
        let px = g.matmul(e, v["head.w"])?;
        let px = g.add_tiled(px, v["head.b"])?;
        Ok((e, px))
    }

    fn constants(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect()
    }

    fn patch_batch(&self, samples: &[&[f64]]) -> Result<Tensor, AutodiffError> {
        let data: Vec<f64> = samples.iter().flat_map(|s| self.grid.patchify(s)).collect();
        Tensor::new(vec![samples.len() * self.grid.patches(), self.grid.patch_dim()], data)
    }

    /// Mean masked-pixel reconstruction loss over `d`, one seeded mask per
    /// sample.
    pub fn pixel_loss(&self, d: &Dataset, ratio: f64, mask_seed: u64) -> Result<f64, PretrainError> {
        let mut total = 0.0;
        for (chunk_idx, chunk) in d.samples().chunks(256).enumerate() {
            let mut g = Graph::new();
            let v = self.constants(&mut g);
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut weights = Vec::new();
            let mut targets = Vec::new();
            for (j, s) in chunk.iter().enumerate() {
                let i = chunk_idx * 256 + j;
                let masked = masking::random_mask(&self.grid, ratio, seed::derive(mask_seed, "pixel-loss", &[i as u64]))?;
                let t = masking::input_mask(&self.grid, &masked)?;
                inputs.push(masking::apply_input_mask(s, &t)?.values);
                targets.extend(self.grid.patchify(&s.values));
                weights.extend(patch_weights(&self.grid, &masked));
            }
            let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            let x = g.constant(self.patch_batch(&refs)?);
            let (_, px) = self.forward(&mut g, &v, x)?;
            let width = self.grid.patches() * self.grid.patch_dim();
            let px = g.reshape(px, &[chunk.len(), width])?;
            let tgt = g.constant(Tensor::new(vec![chunk.len(), width], targets)?);
            let w = g.constant(Tensor::new(vec![chunk.len(), width], weights)?);
            let loss = g.masked_mse(px, tgt, w)?;
            total += g.value(loss).item() * chunk.len() as f64;
        }
        Ok(total / d.len() as f64)
    }
}

/// 1 on the pixels of masked patches, in patchified order.
fn patch_weights(grid: &PatchGrid, masked: &[usize]) -> Vec<f64> {
    let pd = grid.patch_dim();
    let mut w = vec![0.0; grid.patches() * pd];
    for &p in masked {
        w[p * pd..(p + 1) * pd].fill(1.0);
    }
    w
}

impl EmbeddingProvider for ToyEncoder {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed_batch(&self, samples: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let m = self.info.input_shape.numel();
        if let Some(bad) = samples.iter().find(|s| s.len() != m) {
            return Err(ProviderError::ShapeMismatch {
                expected: m,
                got: bad.len(),
            });
        }
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let model_err = |e: AutodiffError| ProviderError::Model(e.to_string());
        let mut g = Graph::new();
        let v = self.constants(&mut g);
        let x = g.constant(self.patch_batch(samples).map_err(model_err)?);
        let (e, _) = self.forward(&mut g, &v, x).map_err(model_err)?;
        let t = self.grid.patches();
        let d = self.pretrain.encoder.token_dim;
        let flat = g.value(e).data();
        Ok(flat
            .chunks(t * d)
            .map(|block| match self.info.mode {
                ProviderMode::Token => block.to_vec(),
                ProviderMode::Vector => (0..d)
                    .map(|j| block.iter().skip(j).step_by(d).sum::<f64>() / t as f64)
                    .collect(),
            })
            .collect())
    }
}

/// Masked-pixel pretraining on `d`. Deterministic in `(cfg, d)`.
pub fn pretrain_toy(cfg: &PretrainConfig, d: &Dataset) -> Result<ToyEncoder, PretrainError> {
    let mut enc = ToyEncoder::init(cfg.clone())?;
    if d.shape != cfg.encoder.input_shape {
        return Err(PretrainError::ShapeMismatch {
            expected: cfg.encoder.input_shape,
            got: d.shape,
        });
    }
    let grid = enc.grid.clone();
    let (t, pd) = (grid.patches(), grid.patch_dim());
    let patched: Vec<Vec<f64>> = d.samples().iter().map(|s| grid.patchify(&s.values)).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut log = PretrainLog {
        dataset: d.name.clone(),
        samples: d.len(),
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, "pretrain-order", &[epoch as u64])));
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let b = batch.len();
            let mut inputs = Vec::with_capacity(b * t * pd);
            let mut targets = Vec::with_capacity(b * t * pd);
            let mut weights = Vec::with_capacity(b * t * pd);
            for &i in batch {
                let mseed = seed::derive(cfg.seed, "pretrain-mask", &[epoch as u64, i as u64]);
                let masked = masking::random_mask(&grid, cfg.ratio, mseed)?;
                let w = patch_weights(&grid, &masked);
                inputs.extend(patched[i].iter().zip(&w).map(|(x, w)| if *w > 0.0 { 0.0 } else { *x }));
                targets.extend_from_slice(&patched[i]);
                weights.extend(w);
            }
            let mut g = Graph::new();
            let vars = enc.params.bind(&mut g);
            let diverged = |source| PretrainError::Diverged { epoch, step, source };
            let loss = (|| {
                let x = g.constant(Tensor::new(vec![b * t, pd], inputs)?);
                let (_, px) = enc.forward(&mut g, &vars, x)?;
                let px = g.reshape(px, &[b, t * pd])?;
                let tgt = g.constant(Tensor::new(vec![b, t * pd], targets)?);
                let w = g.constant(Tensor::new(vec![b, t * pd], weights)?);
                g.masked_mse(px, tgt, w)
            })()
            .map_err(diverged)?;
            epoch_loss += g.value(loss).item() * b as f64;
            let grads = g.backward(loss)?;
            let grads = enc.params.collect_grads(&vars, &grads);
            adam.step(&mut enc.params, &grads)?;
        }
        log.epoch_losses.push(epoch_loss / d.len() as f64);
    }
    ToyEncoder::assemble(cfg.clone(), enc.params, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, FamilyId, SyntheticFamily};
    use crate::encoder::{embed, embed_masked};

    fn small_cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            encoder: ToyEncoderConfig {
                hidden: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = generate(&SyntheticFamily::new(FamilyId::Gratings, 1), 8).unwrap();
        let enc = pretrain_toy(&small_cfg(0), &d).unwrap();
        let init = ToyEncoder::init(small_cfg(0)).unwrap();
        assert_eq!(enc.params(), init.params());
        assert!(enc.log().epoch_losses.is_empty());
    }

    #[test]
    fn embedding_is_deterministic_and_sized() {
        let d = generate(&SyntheticFamily::new(FamilyId::Blobs, 2), 2).unwrap();
        let enc = ToyEncoder::init(small_cfg(0)).unwrap();
        let a = embed(&enc, d.get(0)).unwrap();
        let b = embed(&enc, d.get(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), enc.info().n);
        assert_eq!(enc.info().n, 16 * 8);
        let ones = vec![1u8; 256];
        assert_eq!(embed_masked(&enc, d.get(0), &ones).unwrap(), a);
    }

    #[test]
    fn batch_embedding_preserves_order() {
        let d = generate(&SyntheticFamily::new(FamilyId::Checkers, 3), 5).unwrap();
        let enc = ToyEncoder::init(small_cfg(0)).unwrap();
        let refs: Vec<&[f64]> = d.samples().iter().map(|s| s.values.as_slice()).collect();
        let batch = enc.embed_batch(&refs).unwrap();
        for (i, e) in batch.iter().enumerate() {
            assert_eq!(e, &embed(&enc, d.get(i)).unwrap());
        }
    }

    #[test]
    fn wrong_shape_rejected() {
        let enc = ToyEncoder::init(small_cfg(0)).unwrap();
        let bad = vec![0.0; 10];
        assert!(matches!(
            enc.embed_batch(&[&bad]),
            Err(ProviderError::ShapeMismatch { expected: 256, got: 10 })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_id() {
        let d = generate(&SyntheticFamily::new(FamilyId::Gratings, 4), 16).unwrap();
        let enc = pretrain_toy(&small_cfg(1), &d).unwrap();
        let bytes = enc.to_bytes().unwrap();
        let back = ToyEncoder::from_bytes(&bytes).unwrap();
        assert_eq!(back.info(), enc.info());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(enc.info().id.starts_with("toy-"));
        let other = pretrain_toy(&small_cfg(2), &d).unwrap();
        assert_ne!(other.info().id, enc.info().id);
    }

    #[test]
    fn vector_mode_pools_tokens() {
        let enc = ToyEncoder::init(small_cfg(0)).unwrap();
        let tok = enc.clone();
        let vec_enc = enc.into_mode(ProviderMode::Vector).unwrap();
        assert_eq!(vec_enc.info().n, 8);
        assert_eq!(vec_enc.info().mode, ProviderMode::Vector);
        let x = vec![0.5; 256];
        let full = tok.embed_batch(&[&x]).unwrap().remove(0);
        let pooled = vec_enc.embed_batch(&[&x]).unwrap().remove(0);
        let mean0: f64 = full.iter().step_by(8).sum::<f64>() / 16.0;
        assert!((pooled[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss() {
        let d = generate(&SyntheticFamily::new(FamilyId::Gratings, 5), 256).unwrap();
        let enc = pretrain_toy(&small_cfg(3), &d).unwrap();
        let l = &enc.log().epoch_losses;
        assert_eq!(l.len(), 3);
        assert!(l[2] < l[0], "{l:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_cfg(1);
        cfg.ratio = 1.0;
        assert!(matches!(ToyEncoder::init(cfg), Err(PretrainError::InvalidConfig(_))));
    }
}

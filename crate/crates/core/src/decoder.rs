//! Embedding-space reconstruction decoder `M_d: R^n -> R^n`.
//!
//! An MLP trained on the decoder-training split to map `e_t = M(x ⊙ t)` back
//! to `e = M(x)`, scored only on the components the embedding mask hides.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, AutodiffError, Graph, Params, Tensor, Var};
use crate::data::format::{self, FormatError};
use crate::data::{Dataset, SplitSpec};
use crate::encoder::{self, EmbeddingProvider, ProviderError, ProviderInfo, ProviderMode};
use crate::masking::{MaskError, MaskPair, PatchGrid};
use crate::seed;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("embedding of length {got}, decoder expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("decoder was trained against provider {trained}, not {given}")]
    ProviderMismatch { trained: String, given: String },
    #[error("provider failed during epoch {epoch}: {source}")]
    Provider {
        epoch: usize,
        #[source]
        source: ProviderError,
    },
    /// Training stopped at an epoch boundary; `trainer` can be resumed.
    #[error("training interrupted after {completed} epochs: {source}")]
    Interrupted {
        completed: usize,
        #[source]
        source: Box<DecoderError>,
        trainer: Box<DecoderTrainer>,
    },
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
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
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ratio: f64,
    pub seed: u64,
    /// Draw a new mask for every example in every epoch.
    pub fresh_masks: bool,
    /// Hidden layer widths; the default `[256, 256]` gives a three-layer MLP.
    pub hidden: Vec<usize>,
    /// Square patch size used to build input masks.
    pub patch: usize,
    /// Samples per provider request.
    pub provider_batch: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            ratio: 0.75,
            seed: 0,
            fresh_masks: true,
            hidden: vec![256, 256],
            patch: 4,
            provider_batch: encoder::DEFAULT_BATCH,
        }
    }
}

impl DecoderTrainConfig {
    fn validate(&self) -> Result<(), DecoderError> {
        if self.batch_size == 0 || self.patch == 0 || self.provider_batch == 0 {
            return Err(DecoderError::InvalidConfig("sizes must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(DecoderError::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(DecoderError::InvalidConfig(format!("ratio {} outside (0, 1)", self.ratio)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DecoderError::InvalidConfig(format!("lr {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoderLog {
    /// Mean loss over the first epoch's batches before any update.
    pub initial_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderMetadata {
    pub kind: String,
    pub tool_version: String,
    pub n: usize,
    pub provider: ProviderInfo,
    pub train: DecoderTrainConfig,
    /// Provenance of the training split.
    pub train_set: String,
    pub train_size: usize,
    /// Split of the public dataset that produced the training set, if known.
    #[serde(default)]
    pub split: Option<SplitSpec>,
    pub log: DecoderLog,
}

const KIND: &str = "decoder";

/// A trained (or freshly initialized) decoder, bound to one provider.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    meta: DecoderMetadata,
    params: Params,
}

impl DecoderModel {
    pub fn init(provider: &ProviderInfo, cfg: &DecoderTrainConfig) -> Result<Self, DecoderError> {
        cfg.validate()?;
        let n = provider.n;
        let mut rng = seed::rng(seed::derive(cfg.seed, "decoder-init", &[]));
        let mut params = Params::new();
        let mut widths = vec![n];
        widths.extend(&cfg.hidden);
        widths.push(n);
        for (i, w) in widths.windows(2).enumerate() {
            params.init_uniform(&format!("l{i}.w"), &[w[0], w[1]], w[0], &mut rng);
            params.init_uniform(&format!("l{i}.b"), &[1, w[1]], w[0], &mut rng);
        }
        Ok(Self {
            meta: DecoderMetadata {
                kind: KIND.into(),
                tool_version: crate::TOOL_VERSION.into(),
                n,
                provider: provider.clone(),
                train: cfg.clone(),
                train_set: String::new(),
                train_size: 0,
                split: None,
                log: DecoderLog::default(),
            },
            params,
        })
    }

    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn provider_id(&self) -> &str {
        &self.meta.provider.id
    }

    pub fn metadata(&self) -> &DecoderMetadata {
        &self.meta
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn set_split(&mut self, split: SplitSpec) {
        self.meta.split = Some(split);
    }

    pub fn layers(&self) -> usize {
        self.meta.train.hidden.len() + 1
    }

    /// Errors unless this decoder was trained against `info`'s provider.
    pub fn check_provider(&self, info: &ProviderInfo) -> Result<(), DecoderError> {
        if info.id != self.meta.provider.id {
            return Err(DecoderError::ProviderMismatch {
                trained: self.meta.provider.id.clone(),
                given: info.id.clone(),
            });
        }
        if info.n != self.meta.n {
            return Err(DecoderError::DimensionMismatch {
                expected: self.meta.n,
                got: info.n,
            });
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, v: &BTreeMap<String, Var>, x: Var) -> Result<Var, AutodiffError> {
        let layers = self.layers();
        let mut h = x;
        for i in 0..layers {
            h = g.matmul(h, v[&format!("l{i}.w")])?;
            h = g.add_tiled(h, v[&format!("l{i}.b")])?;
            if i + 1 < layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `M_d(e_t)` for a batch of embeddings.
    pub fn decode_batch(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>, DecoderError> {
        let n = self.meta.n;
        if let Some(bad) = inputs.iter().find(|e| e.len() != n) {
            return Err(DecoderError::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let v: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        let data = inputs.iter().flat_map(|e| e.iter().copied()).collect();
        let x = g.constant(Tensor::new(vec![inputs.len(), n], data)?);
        let out = self.forward(&mut g, &v, x)?;
        Ok(g.value(out).data().chunks(n).map(<[f64]>::to_vec).collect())
    }

    pub fn decode(&self, e_t: &[f64]) -> Result<Vec<f64>, DecoderError> {
        Ok(self.decode_batch(&[e_t])?.remove(0))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        format::encode_model(&self.meta, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| FormatError::Io(e.to_string()))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecoderError> {
        let (meta, params): (DecoderMetadata, Params) = format::decode_model(buf)?;
        if meta.kind != KIND {
            return Err(FormatError::Invalid(format!("expected a {KIND} checkpoint, found {}", meta.kind)).into());
        }
        let fresh = Self::init(&meta.provider, &meta.train)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(FormatError::Invalid(format!("parameter {name} missing or misshapen")).into()),
            }
        }
        Ok(Self { meta, params })
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        let buf = std::fs::read(path).map_err(|e| FormatError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}

/// Loss weights and inputs for one epoch over the training split.
struct EpochData {
    inputs: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

/// Stepwise decoder training, resumable at epoch boundaries.
#[derive(Clone, Debug)]
pub struct DecoderTrainer {
    model: DecoderModel,
    adam: Adam,
    grid: PatchGrid,
    targets: Vec<Vec<f64>>,
    epoch: usize,
}

impl DecoderTrainer {
    pub fn new(provider: &dyn EmbeddingProvider, d_t: &Dataset, cfg: &DecoderTrainConfig) -> Result<Self, DecoderError> {
        let info = provider.info();
        let mut model = DecoderModel::init(info, cfg)?;
        let grid = PatchGrid::new(info.input_shape, cfg.patch, cfg.patch)?;
        if info.mode == ProviderMode::Token && info.tokens != grid.patches() {
            return Err(MaskError::LayoutMismatch {
                tokens: info.tokens,
                patches: grid.patches(),
            }
            .into());
        }
        if d_t.shape != info.input_shape {
            return Err(DecoderError::InvalidConfig(format!(
                "dataset shape {:?} differs from provider input {:?}",
                d_t.shape, info.input_shape
            )));
        }
        let refs: Vec<&[f64]> = d_t.samples().iter().map(|s| s.values.as_slice()).collect();
        let targets = encoder::embed_all(provider, &refs, cfg.provider_batch)
            .map_err(|source| DecoderError::Provider { epoch: 0, source })?;
        model.meta.train_set = d_t.name.clone();
        model.meta.train_size = d_t.len();
        Ok(Self {
            model,
            adam: Adam::new(AdamConfig::with_lr(cfg.lr)),
            grid,
            targets,
            epoch: 0,
        })
    }

    pub fn completed_epochs(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    fn mask(&self, epoch: usize, index: usize) -> Result<MaskPair, MaskError> {
        let cfg = &self.model.meta.train;
        let info = &self.model.meta.provider;
        let s = if cfg.fresh_masks {
            seed::derive(cfg.seed, "decoder-mask", &[epoch as u64, index as u64])
        } else {
            seed::derive(cfg.seed, "decoder-mask", &[index as u64])
        };
        let layout = (info.mode == ProviderMode::Token).then(|| info.layout());
        MaskPair::random(&self.grid, cfg.ratio, s, layout)
    }

    /// Fetches the masked embeddings for `epoch`; no parameter changes.
    fn epoch_data(&self, provider: &dyn EmbeddingProvider, d_t: &Dataset, epoch: usize) -> Result<EpochData, DecoderError> {
        let n = self.model.meta.n;
        let mut masked = Vec::with_capacity(d_t.len());
        let mut weights = Vec::with_capacity(d_t.len());
        for (i, s) in d_t.samples().iter().enumerate() {
            let pair = self.mask(epoch, i)?;
            masked.push(crate::masking::apply_input_mask(s, &pair.input)?.values);
            weights.push(pair.loss_weights(n));
        }
        let refs: Vec<&[f64]> = masked.iter().map(Vec::as_slice).collect();
        let inputs = encoder::embed_all(provider, &refs, self.model.meta.train.provider_batch)
            .map_err(|source| DecoderError::Provider { epoch, source })?;
        Ok(EpochData { inputs, weights })
    }

    fn batch_loss(&self, g: &mut Graph, vars: &BTreeMap<String, Var>, data: &EpochData, batch: &[usize]) -> Result<Var, AutodiffError> {
        let n = self.model.meta.n;
        let b = batch.len();
        let gather = |src: &Vec<Vec<f64>>| -> Vec<f64> { batch.iter().flat_map(|&i| src[i].iter().copied()).collect() };
        let x = g.constant(Tensor::new(vec![b, n], gather(&data.inputs))?);
        let y = g.constant(Tensor::new(vec![b, n], gather(&self.targets))?);
        let w = g.constant(Tensor::new(vec![b, n], gather(&data.weights))?);
        let out = self.model.forward(g, vars, x)?;
        g.masked_mse(out, y, w)
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let cfg = &self.model.meta.train;
        let mut order: Vec<usize> = (0..self.targets.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, "decoder-order", &[epoch as u64])));
        order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Runs one epoch. On error the trainer is left at the previous epoch
    /// boundary.
    pub fn train_epoch(&mut self, provider: &dyn EmbeddingProvider, d_t: &Dataset) -> Result<f64, DecoderError> {
        let epoch = self.epoch;
        let data = self.epoch_data(provider, d_t, epoch)?;
        let batches = self.batches(epoch);
        let diverged = |source| DecoderError::Diverged { epoch, source };

        if epoch == 0 && self.model.meta.log.initial_loss.is_none() {
            let mut total = 0.0;
            for batch in &batches {
                let mut g = Graph::new();
                let vars = self.model.params.bind(&mut g);
                let loss = self.batch_loss(&mut g, &vars, &data, batch).map_err(diverged)?;
                total += g.value(loss).item() * batch.len() as f64;
            }
            self.model.meta.log.initial_loss = Some(total / self.targets.len() as f64);
        }

        let mut params = self.model.params.clone();
        let mut adam = self.adam.clone();
        let mut total = 0.0;
        for batch in &batches {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let loss = self.batch_loss(&mut g, &vars, &data, batch).map_err(diverged)?;
            total += g.value(loss).item() * batch.len() as f64;
            let grads = g.backward(loss)?;
            let grads = params.collect_grads(&vars, &grads);
            adam.step(&mut params, &grads)?;
        }
        let mean = total / self.targets.len() as f64;
        if !mean.is_finite() {
            return Err(diverged(AutodiffError::NonFinite("epoch loss")));
        }
        self.model.params = params;
        self.adam = adam;
        self.model.meta.log.epoch_losses.push(mean);
        self.epoch += 1;
        Ok(mean)
    }

    /// Trains until the configured epoch count.
    pub fn run(mut self, provider: &dyn EmbeddingProvider, d_t: &Dataset) -> Result<DecoderModel, DecoderError> {
        while self.epoch < self.model.meta.train.epochs {
            if let Err(e) = self.train_epoch(provider, d_t) {
                let completed = self.epoch;
                return Err(DecoderError::Interrupted {
                    completed,
                    source: Box::new(e),
                    trainer: Box::new(self),
                });
            }
        }
        Ok(self.model)
    }
}

/// Trains a decoder against `provider` on the decoder-training split.
pub fn train_decoder(provider: &dyn EmbeddingProvider, d_t: &Dataset, cfg: &DecoderTrainConfig) -> Result<DecoderModel, DecoderError> {
    DecoderTrainer::new(provider, d_t, cfg)?.run(provider, d_t)
}

/// Full-batch Eq.-style masked loss of `model` on fixed inputs; exposed for
/// gradient checks and diagnostics.
pub fn reconstruction_loss(
    model: &DecoderModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<f64, DecoderError> {
    let n = model.n();
    let b = inputs.len();
    let flat = |src: &[Vec<f64>]| -> Vec<f64> { src.iter().flat_map(|v| v.iter().copied()).collect() };
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let x = g.constant(Tensor::new(vec![b, n], flat(inputs))?);
    let y = g.constant(Tensor::new(vec![b, n], flat(targets))?);
    let w = g.constant(Tensor::new(vec![b, n], flat(weights))?);
    let out = model.forward(&mut g, &vars, x)?;
    let loss = g.masked_mse(out, y, w)?;
    Ok(g.value(loss).item())
}

/// Analytic gradient of [`reconstruction_loss`] w.r.t. every parameter.
pub fn reconstruction_grad(
    model: &DecoderModel,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    weights: &[Vec<f64>],
) -> Result<BTreeMap<String, Tensor>, DecoderError> {
    let n = model.n();
    let b = inputs.len();
    let flat = |src: &[Vec<f64>]| -> Vec<f64> { src.iter().flat_map(|v| v.iter().copied()).collect() };
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let x = g.constant(Tensor::new(vec![b, n], flat(inputs))?);
    let y = g.constant(Tensor::new(vec![b, n], flat(targets))?);
    let w = g.constant(Tensor::new(vec![b, n], flat(weights))?);
    let out = model.forward(&mut g, &vars, x)?;
    let loss = g.masked_mse(out, y, w)?;
    let grads = g.backward(loss)?;
    Ok(model.params.collect_grads(&vars, &grads))
}

impl DecoderModel {
    /// Copy with one parameter element replaced; used by gradient checks.
    pub fn with_param_element(&self, name: &str, index: usize, value: f64) -> Option<Self> {
        let mut out = self.clone();
        let t = out.params.get_mut(name)?;
        *t.data_mut().get_mut(index)? = value;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, FamilyId, SyntheticFamily};
    use crate::encoder::{PretrainConfig, ToyEncoder, ToyEncoderConfig};

    fn toy_provider() -> ToyEncoder {
        ToyEncoder::init(PretrainConfig {
            encoder: ToyEncoderConfig {
                hidden: 16,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg(epochs: usize) -> DecoderTrainConfig {
        DecoderTrainConfig {
            epochs,
            hidden: vec![32, 32],
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_is_init() {
        let enc = toy_provider();
        let d = generate(&SyntheticFamily::new(FamilyId::Gratings, 1), 32).unwrap();
        let m = train_decoder(&enc, &d, &small_cfg(0)).unwrap();
        let init = DecoderModel::init(enc.info(), &small_cfg(0)).unwrap();
        assert_eq!(m.params(), init.params());
        assert!(m.metadata().log.initial_loss.is_none());
    }

    #[test]
    fn decode_shapes_and_determinism() {
        let enc = toy_provider();
        let m = DecoderModel::init(enc.info(), &small_cfg(0)).unwrap();
        let e = vec![0.1; m.n()];
        assert_eq!(m.decode(&e).unwrap().len(), m.n());
        assert_eq!(m.decode(&e).unwrap(), m.decode(&e).unwrap());
        assert!(matches!(m.decode(&[1.0]), Err(DecoderError::DimensionMismatch { .. })));
    }

    #[test]
    fn training_makes_progress_and_is_deterministic() {
        let enc = toy_provider();
        let d = generate(&SyntheticFamily::new(FamilyId::Blobs, 2), 64).unwrap();
        let a = train_decoder(&enc, &d, &small_cfg(5)).unwrap();
        let b = train_decoder(&enc, &d, &small_cfg(5)).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let log = &a.metadata().log;
        assert!(log.epoch_losses[4] < log.initial_loss.unwrap());
        assert_eq!(a.provider_id(), enc.info().id);
        let back = DecoderModel::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params(), a.params());
    }

    #[test]
    fn provider_mismatch_detected() {
        let enc = toy_provider();
        let m = DecoderModel::init(enc.info(), &small_cfg(0)).unwrap();
        let mut other = enc.info().clone();
        other.id = "toy-other".into();
        assert!(matches!(m.check_provider(&other), Err(DecoderError::ProviderMismatch { .. })));
        assert!(m.check_provider(enc.info()).is_ok());
    }

    struct Flaky {
        inner: ToyEncoder,
        calls: std::sync::atomic::AtomicUsize,
        fail_at: usize,
    }

    impl EmbeddingProvider for Flaky {
        fn info(&self) -> &ProviderInfo {
            self.inner.info()
        }
        fn embed_batch(&self, s: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
            let c = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            if c == self.fail_at {
                return Err(ProviderError::Transport("connection reset".into()));
            }
            self.inner.embed_batch(s)
        }
    }

    #[test]
    fn interrupted_training_resumes_to_same_result() {
        let enc = toy_provider();
        let d = generate(&SyntheticFamily::new(FamilyId::Checkers, 3), 40).unwrap();
        let cfg = small_cfg(4);
        let clean = train_decoder(&enc, &d, &cfg).unwrap();
        // call 0 fetches targets, call k fetches epoch k-1; fail during epoch 2
        let flaky = Flaky {
            inner: enc.clone(),
            calls: 0.into(),
            fail_at: 3,
        };
        let err = train_decoder(&flaky, &d, &cfg).unwrap_err();
        let DecoderError::Interrupted { completed, trainer, source } = err else {
            panic!("expected interruption");
        };
        assert_eq!(completed, 2);
        assert!(matches!(*source, DecoderError::Provider { epoch: 2, .. }));
        let resumed = trainer.run(&flaky, &d).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), clean.to_bytes().unwrap());
    }
}

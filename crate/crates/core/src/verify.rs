//! Difficulty series, relative series and the ownership verdict.
//!
//! For an encoder `M` and decoder `M_d`, the difficulty of one sample under
//! one mask is `R = ‖(M_d(e_t) − e) ⊙ (1 − t̂)‖² / ‖1 − t̂‖₁`. Each dataset
//! (decoder-training split `t`, validation split `v`, private set `p`) gets K
//! per-iteration means over N sampled instances; the verdict comes from a
//! one-tailed paired t-test of `ΔR_pt = R̄_p − R̄_t` against `ΔR_vt`.
//!
//! Since `R̄_t` appears in both relative series it cancels from the paired
//! differences: the decision depends on `R̄_p − R̄_v` only. The `t` series is
//! still computed because the report exposes the relative series.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, DataError, Dataset, SplitSpec};
use crate::decoder::{self, DecoderError, DecoderLog, DecoderModel, DecoderTrainConfig};
use crate::encoder::{self, EmbeddingProvider, ProviderError, ProviderInfo, ProviderMode};
use crate::masking::{self, MaskError, MaskPair, PatchGrid};
use crate::seed;
use crate::stats::{self, StatsError, TTestResult};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid verification config: {0}")]
    InvalidConfig(String),
    #[error("private dataset shares {0} samples with the public dataset")]
    NotDisjoint(usize),
    #[error("token mode needs {patches} tokens (one per patch), provider reports {tokens}")]
    TokenLayout { tokens: usize, patches: usize },
    #[error("mask retains every component; difficulty is undefined")]
    TrivialMask,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("provider failed on dataset {role}, iteration {iteration}: {source}")]
    Provider {
        role: String,
        iteration: usize,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    ProviderSetup(#[from] ProviderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// What the paired test compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestObject {
    /// Relative series `ΔR_pt` vs `ΔR_vt`.
    #[default]
    DeltaR,
    /// Raw series `R̄_p` vs `R̄_v`.
    R,
}

impl std::str::FromStr for TestObject {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delta_r" => Ok(Self::DeltaR),
            "r" => Ok(Self::R),
            other => Err(format!("unknown test object {other:?} (expected delta_r or r)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerificationConfig {
    /// Iterations of sampling.
    pub k: usize,
    /// Samples per iteration.
    pub n: usize,
    pub ratio: f64,
    pub alpha: f64,
    pub seed: u64,
    pub object: TestObject,
    /// `None` follows the provider.
    pub mode: Option<ProviderMode>,
    /// Size of the decoder-training split of the public dataset.
    pub dt_size: usize,
    pub patch: usize,
    /// Samples per provider request.
    pub batch: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n: 128,
            ratio: 0.75,
            alpha: stats::DEFAULT_ALPHA,
            seed: 0,
            object: TestObject::DeltaR,
            mode: None,
            dt_size: 1024,
            patch: 4,
            batch: encoder::DEFAULT_BATCH,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.k < 2 {
            return Err(VerifyError::InvalidConfig(format!(
                "k = {} (the paired test needs at least 2 iterations)",
                self.k
            )));
        }
        self.validate_sampling()
    }

    /// Everything but the iteration count the t-test needs; a single
    /// difficulty series is well defined for `k = 1`.
    fn validate_sampling(&self) -> Result<(), VerifyError> {
        let bad = |m: String| Err(VerifyError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.n == 0 || self.patch == 0 || self.batch == 0 || self.dt_size == 0 {
            return bad("n, patch, batch and dt_size must be positive".into());
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("ratio {} outside (0, 1)", self.ratio));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        Ok(())
    }

    /// Split used when the decoder does not record its own.
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            seed: seed::derive(self.seed, "split", &[]),
            train_size: self.dt_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultySeries {
    pub role: String,
    pub dataset: String,
    /// `R̄_1..R̄_K`.
    pub values: Vec<f64>,
    /// Sampled dataset indices of every iteration.
    pub indices: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeSeries {
    pub standard: String,
    pub target: String,
    pub values: Vec<f64>,
}

impl RelativeSeries {
    pub fn new(target: &DifficultySeries, standard: &DifficultySeries) -> Result<Self, VerifyError> {
        if target.values.len() != standard.values.len() {
            return Err(VerifyError::LengthMismatch(target.values.len(), standard.values.len()));
        }
        Ok(Self {
            standard: standard.role.clone(),
            target: target.role.clone(),
            values: target.values.iter().zip(&standard.values).map(|(a, b)| a - b).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Illegal,
    Legal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSet {
    pub t: DifficultySeries,
    pub v: DifficultySeries,
    pub p: DifficultySeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeSet {
    pub pt: RelativeSeries,
    pub vt: RelativeSeries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub tool_version: String,
    pub config: VerificationConfig,
    pub mode: ProviderMode,
    pub provider: ProviderInfo,
    pub decoder_id: String,
    pub split: SplitSpec,
    pub public: String,
    pub private: String,
    pub test: TTestResult,
    pub decision: Decision,
    /// Whether the test on the relative series reproduced the test on the
    /// raw series bit for bit (they agree algebraically).
    pub cancellation_exact: bool,
    pub series: SeriesSet,
    pub relative: RelativeSet,
    /// Training log when the decoder was trained as part of this run.
    pub decoder_log: Option<DecoderLog>,
}

impl Verdict {
    pub fn is_illegal(&self) -> bool {
        self.decision == Decision::Illegal
    }

    /// Deterministic JSON rendering.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

/// `‖(recon − e) ⊙ (1 − t̂)‖² / ‖1 − t̂‖₁`; with no `t̂`, the mean over all
/// components.
pub fn reconstruction_difficulty(recon: &[f64], e: &[f64], t_hat: Option<&[u8]>) -> Result<f64, VerifyError> {
    if recon.len() != e.len() {
        return Err(VerifyError::LengthMismatch(recon.len(), e.len()));
    }
    match t_hat {
        None => {
            let sq: f64 = recon.iter().zip(e).map(|(r, x)| (r - x) * (r - x)).sum();
            Ok(sq / e.len() as f64)
        }
        Some(t_hat) => {
            if t_hat.len() != e.len() {
                return Err(VerifyError::LengthMismatch(t_hat.len(), e.len()));
            }
            let mut sq = 0.0;
            let mut count = 0usize;
            for ((r, x), &keep) in recon.iter().zip(e).zip(t_hat) {
                if keep == 0 {
                    sq += (r - x) * (r - x);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(VerifyError::TrivialMask);
            }
            Ok(sq / count as f64)
        }
    }
}

/// Fixed context of one verification: provider, decoder, masks and mode.
pub struct Verifier<'a> {
    provider: &'a dyn EmbeddingProvider,
    decoder: &'a DecoderModel,
    grid: PatchGrid,
    mode: ProviderMode,
    cfg: VerificationConfig,
}

impl<'a> Verifier<'a> {
    pub fn new(
        provider: &'a dyn EmbeddingProvider,
        decoder: &'a DecoderModel,
        cfg: &VerificationConfig,
    ) -> Result<Self, VerifyError> {
        cfg.validate_sampling()?;
        let info = provider.info();
        info.validate()?;
        decoder.check_provider(info)?;
        let grid = PatchGrid::new(info.input_shape, cfg.patch, cfg.patch)?;
        let mode = cfg.mode.unwrap_or(info.mode);
        if mode == ProviderMode::Token {
            if info.mode != ProviderMode::Token || info.tokens != grid.patches() {
                return Err(VerifyError::TokenLayout {
                    tokens: info.tokens,
                    patches: grid.patches(),
                });
            }
            if masking::masked_count(grid.patches(), cfg.ratio) == 0 {
                return Err(VerifyError::TrivialMask);
            }
        }
        Ok(Self {
            provider,
            decoder,
            grid,
            mode,
            cfg: cfg.clone(),
        })
    }

    pub fn mode(&self) -> ProviderMode {
        self.mode
    }

    /// Mask for dataset `role`, iteration `k`, dataset index `index`.
    pub fn mask(&self, role: &str, k: usize, index: usize) -> Result<MaskPair, MaskError> {
        let s = seed::derive(self.cfg.seed, &format!("mask/{role}"), &[k as u64, index as u64]);
        let layout = (self.mode == ProviderMode::Token).then(|| self.provider.info().layout());
        MaskPair::random(&self.grid, self.cfg.ratio, s, layout)
    }

    /// Indices sampled from a dataset of `len` samples at iteration `k`.
    pub fn iteration_indices(&self, role: &str, k: usize, len: usize) -> Result<Vec<usize>, DataError> {
        let s = seed::derive(self.cfg.seed, &format!("sample/{role}"), &[k as u64]);
        data::sample_iteration(len, self.cfg.n, s)
    }

    /// Difficulty of one sample under one mask.
    pub fn sample_difficulty(&self, x: &data::Sample, mask: &MaskPair) -> Result<f64, VerifyError> {
        let e = encoder::embed(self.provider, x)?;
        let e_t = encoder::embed_masked(self.provider, x, &mask.input)?;
        let recon = self.decoder.decode(&e_t)?;
        reconstruction_difficulty(&recon, &e, self.t_hat(mask))
    }

    fn t_hat<'m>(&self, mask: &'m MaskPair) -> Option<&'m [u8]> {
        match self.mode {
            ProviderMode::Token => mask.embedding.as_deref(),
            ProviderMode::Vector => None,
        }
    }

    /// K per-iteration mean difficulties for `d`.
    pub fn difficulty_series(&self, d: &Dataset, role: &str) -> Result<DifficultySeries, VerifyError> {
        let provider_err = |iteration: usize| {
            let role = role.to_string();
            move |source| VerifyError::Provider {
                role,
                iteration,
                source,
            }
        };
        let mut clean: Vec<Option<Vec<f64>>> = vec![None; d.len()];
        let mut values = Vec::with_capacity(self.cfg.k);
        let mut all_indices = Vec::with_capacity(self.cfg.k);
        for k in 0..self.cfg.k {
            let indices = self.iteration_indices(role, k, d.len())?;

            let missing: Vec<usize> = {
                let mut seen = HashSet::new();
                indices
                    .iter()
                    .copied()
                    .filter(|&i| clean[i].is_none() && seen.insert(i))
                    .collect()
            };
            if !missing.is_empty() {
                let refs: Vec<&[f64]> = missing.iter().map(|&i| d.get(i).values.as_slice()).collect();
                let embedded = encoder::embed_all(self.provider, &refs, self.cfg.batch).map_err(provider_err(k))?;
                for (i, e) in missing.into_iter().zip(embedded) {
                    clean[i] = Some(e);
                }
            }

            let masks = indices
                .iter()
                .map(|&i| self.mask(role, k, i))
                .collect::<Result<Vec<_>, _>>()?;
            let masked = indices
                .iter()
                .zip(&masks)
                .map(|(&i, m)| masking::apply_input_mask(d.get(i), &m.input).map(|s| s.values))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&[f64]> = masked.iter().map(Vec::as_slice).collect();
            let e_t = encoder::embed_all(self.provider, &refs, self.cfg.batch).map_err(provider_err(k))?;
            let e_t_refs: Vec<&[f64]> = e_t.iter().map(Vec::as_slice).collect();
            let recon = self.decoder.decode_batch(&e_t_refs)?;

            let mut sum = 0.0;
            for ((&i, m), r) in indices.iter().zip(&masks).zip(&recon) {
                let e = clean[i].as_deref().expect("embedded above");
                sum += reconstruction_difficulty(r, e, self.t_hat(m))?;
            }
            values.push(sum / indices.len() as f64);
            all_indices.push(indices);
        }
        Ok(DifficultySeries {
            role: role.to_string(),
            dataset: d.name.clone(),
            values,
            indices: all_indices,
        })
    }
}

/// Decoder to verify with: an existing checkpoint or one trained inline on
/// the split.
pub enum DecoderSource<'a> {
    Trained(&'a DecoderModel),
    Train(DecoderTrainConfig),
}

/// Short content hash of a decoder checkpoint.
pub fn decoder_id(model: &DecoderModel) -> Result<String, VerifyError> {
    let bytes = model.to_bytes().map_err(DecoderError::from)?;
    let digest = Sha256::digest(&bytes);
    Ok(format!("dec-{}", digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()))
}

fn overlap(public: &Dataset, private: &Dataset) -> usize {
    let key = |s: &data::Sample| s.values.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let seen: HashSet<Vec<u64>> = public.samples().iter().map(key).collect();
    private.samples().iter().filter(|s| seen.contains(&key(s))).count()
}

/// Full procedure: split, decoder (given or trained), three series, relative
/// series, paired test, decision.
pub fn run_verification(
    public: &Dataset,
    private: &Dataset,
    provider: &dyn EmbeddingProvider,
    decoder: DecoderSource<'_>,
    cfg: &VerificationConfig,
) -> Result<Verdict, VerifyError> {
    cfg.validate()?;
    provider.info().validate()?;
    let shared = overlap(public, private);
    if shared > 0 {
        return Err(VerifyError::NotDisjoint(shared));
    }

    let split_spec = match &decoder {
        DecoderSource::Trained(m) => m.metadata().split.clone().unwrap_or_else(|| cfg.split_spec()),
        DecoderSource::Train(_) => cfg.split_spec(),
    };
    let parts = data::split(public, &split_spec)?;
    for (role, d) in [("t", &parts.train), ("v", &parts.validation), ("p", private)] {
        if cfg.n > d.len() {
            return Err(VerifyError::InvalidConfig(format!(
                "n = {} exceeds the {} samples of dataset {role}",
                cfg.n,
                d.len()
            )));
        }
    }

    let trained;
    let (model, decoder_log) = match decoder {
        DecoderSource::Trained(m) => (m, None),
        DecoderSource::Train(train_cfg) => {
            let mut m = decoder::train_decoder(provider, &parts.train, &train_cfg)?;
            m.set_split(split_spec.clone());
            let log = Some(m.metadata().log.clone());
            trained = m;
            (&trained, log)
        }
    };

    let verifier = Verifier::new(provider, model, cfg)?;
    let t = verifier.difficulty_series(&parts.train, "t")?;
    let v = verifier.difficulty_series(&parts.validation, "v")?;
    let p = verifier.difficulty_series(private, "p")?;
    let pt = RelativeSeries::new(&p, &t)?;
    let vt = RelativeSeries::new(&v, &t)?;

    let on_relative = stats::paired_ttest_one_tailed(&pt.values, &vt.values, cfg.alpha)?;
    let on_raw = stats::paired_ttest_one_tailed(&p.values, &v.values, cfg.alpha)?;
    let cancellation_exact = on_relative.t.to_bits() == on_raw.t.to_bits() && on_relative.p.to_bits() == on_raw.p.to_bits();
    if !cancellation_exact {
        log::warn!(
            "relative and raw series give different statistics (t {} vs {}, p {} vs {})",
            on_relative.t,
            on_raw.t,
            on_relative.p,
            on_raw.p
        );
    }
    let test = match cfg.object {
        TestObject::DeltaR => on_relative,
        TestObject::R => on_raw,
    };
    let decision = if test.rejects_null() { Decision::Illegal } else { Decision::Legal };

    Ok(Verdict {
        tool_version: crate::TOOL_VERSION.into(),
        config: cfg.clone(),
        mode: verifier.mode(),
        provider: provider.info().clone(),
        decoder_id: decoder_id(model)?,
        split: split_spec,
        public: public.name.clone(),
        private: private.name.clone(),
        test,
        decision,
        cancellation_exact,
        series: SeriesSet { t, v, p },
        relative: RelativeSet { pt, vt },
        decoder_log,
    })
}

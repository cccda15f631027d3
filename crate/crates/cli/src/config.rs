//! Run configurations: a JSON file (optional) overridden by flags.
//!
//! Every output artifact carries `{"command": ..., "config": ...}` with the
//! fully resolved config; passing such an artifact back as `--config`
//! replays the run.

use std::path::{Path, PathBuf};

use dovmm::data::synthetic::{FamilyId, SyntheticFamily};
use dovmm::data::DatasetSpec;
use dovmm::decoder::DecoderTrainConfig;
use dovmm::encoder::PretrainConfig;
use dovmm::verify::VerificationConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Reads a config file. Accepts a bare config or any artifact that embeds
/// one under `"config"`.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("config").filter(|c| c.is_object()) {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map(load).unwrap_or_else(|| Ok(T::default()))
}

/// `cfg.x = flag` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// JSON artifact written next to checkpoints and as reports.
#[derive(Serialize)]
pub struct Artifact<'a, C: Serialize, B: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    #[serde(flatten)]
    pub body: B,
}

pub fn default_dataset() -> DatasetSpec {
    DatasetSpec {
        family: SyntheticFamily::new(FamilyId::Gratings, 0),
        count: 2048,
        offset: 0,
        shape: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataRun {
    pub dataset: DatasetSpec,
    pub out: Option<PathBuf>,
}

impl Default for GenDataRun {
    fn default() -> Self {
        Self {
            dataset: default_dataset(),
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRun {
    /// Training data file; when absent `dataset` is generated.
    pub data: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainConfig,
    pub out: Option<PathBuf>,
}

impl Default for PretrainRun {
    fn default() -> Self {
        Self {
            data: None,
            dataset: default_dataset(),
            pretrain: PretrainConfig::default(),
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeRun {
    pub model: Option<PathBuf>,
    pub addr: String,
}

impl Default for ServeRun {
    fn default() -> Self {
        Self {
            model: None,
            addr: "127.0.0.1:8707".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDecoderRun {
    /// Checkpoint path or `http(s)://` service URL.
    pub encoder: Option<String>,
    pub public: Option<PathBuf>,
    /// Split size and seed; the split is the one `verify` uses with the
    /// same seed.
    pub verification: VerificationConfig,
    pub decoder: DecoderTrainConfig,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyRun {
    pub encoder: Option<String>,
    /// Trained decoder; when absent one is trained inline with `decoder`.
    pub decoder_path: Option<PathBuf>,
    pub public: Option<PathBuf>,
    pub private: Option<PathBuf>,
    pub verification: VerificationConfig,
    pub decoder: DecoderTrainConfig,
    pub json: Option<PathBuf>,
}

/// The suspect x public-dataset evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Each family is both a suspect's training distribution and a D_pub.
    pub families: Vec<FamilyId>,
    pub seeds: Vec<u64>,
    pub pub_count: usize,
    pub pvt_count: usize,
    /// Pixel noise of every synthetic family.
    pub noise: f64,
    /// Seeds inside are replaced per cell.
    pub pretrain: PretrainConfig,
    pub decoder: DecoderTrainConfig,
    pub verification: VerificationConfig,
    pub out: Option<PathBuf>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            families: vec![FamilyId::Gratings, FamilyId::Checkers, FamilyId::Blobs],
            seeds: vec![1, 2, 3, 4, 5],
            pub_count: 2048,
            pvt_count: 512,
            noise: 0.0,
            pretrain: PretrainConfig::default(),
            decoder: DecoderTrainConfig::default(),
            verification: VerificationConfig::default(),
            out: None,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.families.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Usage("grid needs at least one family and one seed".into()));
        }
        if self.families.len() < 2 {
            return Err(CliError::Usage("grid needs two families to have legal cells".into()));
        }
        let mut f = self.families.clone();
        f.sort_by_key(|x| x.as_str());
        f.dedup();
        if f.len() != self.families.len() {
            return Err(CliError::Usage("grid families must be distinct".into()));
        }
        if self.pub_count <= self.verification.dt_size {
            return Err(CliError::Usage(format!(
                "pub_count {} leaves no validation split after dt_size {}",
                self.pub_count, self.verification.dt_size
            )));
        }
        self.verification.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformanceRun {
    pub url: Option<String>,
}

pub fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing --{name}")))
}

//! Samples, datasets, deterministic splits and sampling.

pub mod format;
pub mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::seed;
pub use format::FormatError;
pub use synthetic::{FamilyId, SyntheticFamily};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("sample {index} has {got} values, expected {expected}")]
    ShapeMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("sample {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("training split size {train} must be smaller than the dataset size {total}")]
    SplitTooLarge { train: usize, total: usize },
    #[error("requested {requested} samples from a dataset of {available}")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("unknown synthetic family {0:?}")]
    UnknownFamily(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("reading dataset spec: {0}")]
    Json(#[from] serde_json::Error),
}

/// `(channels, height, width)` of a sample; `m = C * H * W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SampleShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl Default for SampleShape {
    fn default() -> Self {
        Self::new(1, 16, 16)
    }
}

/// One input grid, stored flat in `(c, h, w)` row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub shape: SampleShape,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pub,
    Pvt,
    Other,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic {
        family: SyntheticFamily,
        #[serde(default)]
        offset: usize,
        count: usize,
    },
    File { path: String },
    Subset { parent: String, indices_seed: u64 },
    InMemory,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub shape: SampleShape,
    pub role: Role,
    pub source: Source,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        shape: SampleShape,
        role: Role,
        source: Source,
        samples: Vec<Sample>,
    ) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, s) in samples.iter().enumerate() {
            if s.shape != shape || s.values.len() != shape.numel() {
                return Err(DataError::ShapeMismatch {
                    index: i,
                    got: s.values.len(),
                    expected: shape.numel(),
                });
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(i));
            }
        }
        Ok(Self {
            name: name.into(),
            shape,
            role,
            source,
            samples,
        })
    }

    pub fn from_values(
        name: impl Into<String>,
        shape: SampleShape,
        role: Role,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        let samples = values.into_iter().map(|values| Sample { shape, values }).collect();
        Self::new(name, shape, role, Source::InMemory, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Dataset as a `[count, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let s = self.shape;
        let data = self.samples.iter().flat_map(|x| x.values.iter().copied()).collect();
        Tensor::new(vec![self.len(), s.channels, s.height, s.width], data).expect("dataset shape")
    }

    pub fn from_tensor(name: impl Into<String>, role: Role, t: &Tensor) -> Result<Self, DataError> {
        let [count, c, h, w] = t.shape() else {
            return Err(DataError::InvalidSpec(format!(
                "dataset tensor must be rank 4 [N, C, H, W], got {:?}",
                t.shape()
            )));
        };
        let shape = SampleShape::new(*c, *h, *w);
        let m = shape.numel();
        let values = (0..*count)
            .map(|i| t.data()[i * m..(i + 1) * m].to_vec())
            .collect();
        Self::from_values(name, shape, role, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(format::save_tensor(path, &self.to_tensor())?)
    }

    pub fn load(path: &Path, role: Role) -> Result<Self, DataError> {
        let t = format::load_tensor(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut d = Self::from_tensor(name, role, &t)?;
        d.source = Source::File {
            path: path.display().to_string(),
        };
        Ok(d)
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize], indices_seed: u64) -> Result<Self, DataError> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(
            name,
            self.shape,
            self.role,
            Source::Subset {
                parent: self.name.clone(),
                indices_seed,
            },
            samples,
        )
    }
}

/// Seeded partition of a public dataset into decoder-training and
/// validation parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_size: usize,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub train: Dataset,
    pub validation: Dataset,
}

pub fn split(public: &Dataset, spec: &SplitSpec) -> Result<Split, DataError> {
    if spec.train_size >= public.len() || spec.train_size == 0 {
        return Err(DataError::SplitTooLarge {
            train: spec.train_size,
            total: public.len(),
        });
    }
    let mut perm: Vec<usize> = (0..public.len()).collect();
    perm.shuffle(&mut seed::rng(seed::derive(spec.seed, "split", &[])));
    let (t, v) = perm.split_at(spec.train_size);
    let mut train_indices = t.to_vec();
    let mut validation_indices = v.to_vec();
    train_indices.sort_unstable();
    validation_indices.sort_unstable();
    Ok(Split {
        train: public.subset(format!("{}/train", public.name), &train_indices, spec.seed)?,
        validation: public.subset(format!("{}/validation", public.name), &validation_indices, spec.seed)?,
        train_indices,
        validation_indices,
    })
}

/// `n` distinct indices in `0..len`, uniform without replacement.
///
/// The result is the length-`n` prefix of a seeded permutation, so for a
/// fixed seed smaller draws are prefixes of larger ones.
pub fn sample_iteration(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if n > len || n == 0 {
        return Err(DataError::NotEnoughSamples {
            requested: n,
            available: len,
        });
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut seed::rng(seed));
    perm.truncate(n);
    Ok(perm)
}

/// JSON dataset description accepted wherever a dataset path is expected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub family: SyntheticFamily,
    pub count: usize,
    /// Index of the first sample; lets a private set be a held-out draw.
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub shape: Option<SampleShape>,
}

/// Loads a dataset from a DOVT tensor file or a `.json` synthetic spec.
pub fn load_dataset(path: &Path, role: Role) -> Result<Dataset, DataError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::Io(e.to_string()))?;
        let spec: DatasetSpec = serde_json::from_str(&text)?;
        let shape = spec.shape.unwrap_or_default();
        Ok(synthetic::generate_range(&spec.family, spec.offset, spec.count, shape)?.with_role(role))
    } else {
        Dataset::load(path, role)
    }
}

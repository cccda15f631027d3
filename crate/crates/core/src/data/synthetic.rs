//! Procedural image families used as stand-ins for real datasets.
//!
//! Each sample is drawn from its own seeded stream keyed by `(seed, family,
//! index)`, so a dataset of `n` samples is a prefix of any larger draw with
//! the same family spec.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Role, Sample, SampleShape, Source};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyId {
    Gratings,
    Checkers,
    Blobs,
}

impl FamilyId {
    pub const ALL: [FamilyId; 3] = [FamilyId::Gratings, FamilyId::Checkers, FamilyId::Blobs];

    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyId::Gratings => "gratings",
            FamilyId::Checkers => "checkers",
            FamilyId::Blobs => "blobs",
        }
    }

    /// Default `(frequency, scale)` ranges.
    ///
    /// gratings: cycles per image and contrast; checkers: cell size in
    /// pixels and contrast; blobs: blob count and blob radius in pixels.
    fn default_ranges(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            FamilyId::Gratings => ([1.0, 4.0], [0.6, 1.0]),
            FamilyId::Checkers => ([2.0, 6.0], [0.6, 1.0]),
            FamilyId::Blobs => ([2.0, 5.0], [1.5, 4.0]),
        }
    }
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gratings" => Ok(FamilyId::Gratings),
            "checkers" => Ok(FamilyId::Checkers),
            "blobs" => Ok(FamilyId::Blobs),
            other => Err(DataError::UnknownFamily(other.to_string())),
        }
    }
}

/// A seeded synthetic family with optional parameter-range overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamily {
    pub family: FamilyId,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<[f64; 2]>,
    /// Std-dev of additive Gaussian-like pixel noise before clamping.
    #[serde(default)]
    pub noise: f64,
}

impl SyntheticFamily {
    pub fn new(family: FamilyId, seed: u64) -> Self {
        Self {
            family,
            seed,
            frequency: None,
            scale: None,
            noise: 0.0,
        }
    }

    fn ranges(&self) -> ([f64; 2], [f64; 2]) {
        let (f, s) = self.family.default_ranges();
        (self.frequency.unwrap_or(f), self.scale.unwrap_or(s))
    }

    fn validate(&self) -> Result<(), DataError> {
        let (f, s) = self.ranges();
        for (name, r) in [("frequency", f), ("scale", s)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] > 0.0) {
                return Err(DataError::InvalidSpec(format!("{name} range {r:?}")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSpec(format!("noise {}", self.noise)));
        }
        Ok(())
    }

    /// Draws sample `index` of this family.
    pub fn sample(&self, index: u64, shape: SampleShape) -> Sample {
        let mut rng = seed::rng(seed::derive(self.seed, self.family.as_str(), &[index]));
        let (freq, scale) = self.ranges();
        let (h, w) = (shape.height, shape.width);
        let mut plane = vec![0.0; h * w];
        match self.family {
            FamilyId::Gratings => {
                let theta = rng.gen_range(0.0..PI);
                let cycles = rng.gen_range(freq[0]..=freq[1]);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let contrast = rng.gen_range(scale[0]..=scale[1]);
                let (c, s) = (theta.cos(), theta.sin());
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 * c + y as f64 * s) / w as f64;
                        plane[y * w + x] = 0.5 + 0.5 * contrast * (2.0 * PI * cycles * u + phase).sin();
                    }
                }
            }
            FamilyId::Checkers => {
                let cell = rng.gen_range(freq[0]..=freq[1]);
                let ox = rng.gen_range(0.0..cell);
                let oy = rng.gen_range(0.0..cell);
                let contrast = rng.gen_range(scale[0]..=scale[1]);
                for y in 0..h {
                    for x in 0..w {
                        let v = (PI * (x as f64 + ox) / cell).sin() * (PI * (y as f64 + oy) / cell).sin();
                        plane[y * w + x] = 0.5 + 0.5 * contrast * (4.0 * v).tanh();
                    }
                }
            }
            FamilyId::Blobs => {
                let count = rng.gen_range(freq[0]..=freq[1]).round().max(1.0) as usize;
                for _ in 0..count {
                    let cx = rng.gen_range(0.0..w as f64);
                    let cy = rng.gen_range(0.0..h as f64);
                    let r = rng.gen_range(scale[0]..=scale[1]);
                    let amp = rng.gen_range(0.5..=1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            plane[y * w + x] += amp * (-d2 / (2.0 * r * r)).exp();
                        }
                    }
                }
            }
        }
        if self.noise > 0.0 {
            for v in &mut plane {
                // sum of uniforms: cheap, bounded, approximately normal
                let z: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * (0.75f64).sqrt();
                *v += self.noise * z;
            }
        }
        let values = (0..shape.channels)
            .flat_map(|_| plane.iter().map(|v| v.clamp(0.0, 1.0)))
            .collect();
        Sample { shape, values }
    }
}

/// Generates `count` samples of the default 1x16x16 shape.
pub fn generate(family: &SyntheticFamily, count: usize) -> Result<Dataset, DataError> {
    generate_with_shape(family, count, SampleShape::default())
}

pub fn generate_with_shape(
    family: &SyntheticFamily,
    count: usize,
    shape: SampleShape,
) -> Result<Dataset, DataError> {
    generate_range(family, 0, count, shape)
}

/// Samples `offset..offset + count` of the family. Disjoint ranges give
/// disjoint draws from the same distribution.
pub fn generate_range(
    family: &SyntheticFamily,
    offset: usize,
    count: usize,
    shape: SampleShape,
) -> Result<Dataset, DataError> {
    if count == 0 {
        return Err(DataError::Empty);
    }
    family.validate()?;
    let samples = (offset..offset + count).map(|i| family.sample(i as u64, shape)).collect();
    let name = if offset == 0 {
        format!("{}-{}", family.family, family.seed)
    } else {
        format!("{}-{}@{}", family.family, family.seed, offset)
    };
    Dataset::new(
        name,
        shape,
        Role::Other,
        Source::Synthetic {
            family: family.clone(),
            offset,
            count,
        },
        samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 2-D DFT power spectrum, averaged over a batch.
    fn mean_power_spectrum(d: &Dataset) -> Vec<f64> {
        let (h, w) = (d.shape.height, d.shape.width);
        let mut acc = vec![0.0; h * w];
        for s in d.samples() {
            for ky in 0..h {
                for kx in 0..w {
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let a = -2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                            re += s.values[y * w + x] * a.cos();
                            im += s.values[y * w + x] * a.sin();
                        }
                    }
                    acc[ky * w + kx] += re * re + im * im;
                }
            }
        }
        acc.iter().map(|v| v / d.len() as f64).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let f = SyntheticFamily::new(FamilyId::Gratings, 7);
        let a = generate(&f, 4).unwrap();
        let b = generate(&f, 4).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            let xb: Vec<u64> = x.values.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn single_sample_has_declared_shape() {
        let d = generate(&SyntheticFamily::new(FamilyId::Blobs, 1), 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.get(0).values.len(), 256);
        assert!(generate(&SyntheticFamily::new(FamilyId::Blobs, 1), 0).is_err());
    }

    #[test]
    fn values_in_unit_interval() {
        for fam in FamilyId::ALL {
            let mut f = SyntheticFamily::new(fam, 3);
            f.noise = 0.2;
            let d = generate(&f, 16).unwrap();
            assert!(d.samples().iter().flat_map(|s| &s.values).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn families_have_distinct_spectra() {
        let spectra: Vec<Vec<f64>> = FamilyId::ALL
            .iter()
            .map(|&fam| mean_power_spectrum(&generate(&SyntheticFamily::new(fam, 11), 64).unwrap()))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let dist: f64 = spectra[i]
                    .iter()
                    .zip(&spectra[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm: f64 = spectra[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(dist > 1e-3 * norm, "{i} vs {j}: {dist}");
            }
        }
    }

    #[test]
    fn unknown_family_rejected() {
        assert!(matches!("stripes".parse::<FamilyId>(), Err(DataError::UnknownFamily(_))));
        let json = r#"{"family":"stripes","seed":1}"#;
        assert!(serde_json::from_str::<SyntheticFamily>(json).is_err());
    }

    #[test]
    fn smaller_draw_is_prefix() {
        let f = SyntheticFamily::new(FamilyId::Checkers, 5);
        let a = generate(&f, 3).unwrap();
        let b = generate(&f, 6).unwrap();
        assert_eq!(a.samples(), &b.samples()[..3]);
    }
}

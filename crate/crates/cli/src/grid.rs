//! The evaluation grid: one toy suspect per (seed, family), verified
//! against every family's public set. Diagonal cells are illegal.

use std::time::Instant;

use dovmm::data::synthetic::{generate_range, FamilyId, SyntheticFamily};
use dovmm::data::{Dataset, Role, SampleShape};
use dovmm::encoder::{pretrain_toy, PretrainConfig, ToyEncoder};
use dovmm::seed;
use dovmm::stats::{classification_metrics, MetricsReport, Scenario};
use dovmm::verify::{run_verification, DecoderSource, Verdict, VerificationConfig};
use dovmm::DecoderTrainConfig;
use serde::{Deserialize, Serialize};

use crate::config::GridConfig;
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub seed: u64,
    pub suspect: FamilyId,
    pub public: FamilyId,
    pub illegal: bool,
    pub p: f64,
    pub t: f64,
    pub decision: dovmm::verify::Decision,
    pub cancellation_exact: bool,
    pub decoder_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<Cell>,
    pub metrics: MetricsReport,
}

/// Public and private draws of one family for one seed.
pub struct FamilyData {
    pub public: Dataset,
    pub private: Dataset,
}

pub fn family_data(cfg: &GridConfig, seed: u64, family: FamilyId) -> Result<FamilyData, CliError> {
    let mut spec = SyntheticFamily::new(family, seed);
    spec.noise = cfg.noise;
    let shape = SampleShape::default();
    Ok(FamilyData {
        public: generate_range(&spec, 0, cfg.pub_count, shape)?.with_role(Role::Pub),
        private: generate_range(&spec, cfg.pub_count, cfg.pvt_count, shape)?.with_role(Role::Pvt),
    })
}

pub fn pretrain_config(cfg: &GridConfig, seed: u64, family: FamilyId) -> PretrainConfig {
    PretrainConfig {
        seed: seed::derive(seed, &format!("pretrain/{family}"), &[]),
        ..cfg.pretrain.clone()
    }
}

/// Seeds of the decoder and the verification of one cell.
pub fn cell_configs(
    cfg: &GridConfig,
    seed: u64,
    suspect: FamilyId,
    public: FamilyId,
) -> (DecoderTrainConfig, VerificationConfig) {
    let key = format!("{suspect}/{public}");
    (
        DecoderTrainConfig {
            seed: seed::derive(seed, &format!("decoder/{key}"), &[]),
            ..cfg.decoder.clone()
        },
        VerificationConfig {
            seed: seed::derive(seed, &format!("verify/{key}"), &[]),
            ..cfg.verification.clone()
        },
    )
}

pub struct GridRun {
    pub report: GridReport,
    /// Suspects by `(seed, family)`, in grid order.
    pub suspects: Vec<(u64, FamilyId, ToyEncoder)>,
    pub verdicts: Vec<Verdict>,
}

pub fn run_grid(cfg: &GridConfig) -> Result<GridRun, CliError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut suspects = Vec::new();
    let mut verdicts = Vec::new();
    for &s in &cfg.seeds {
        let data = cfg
            .families
            .iter()
            .map(|&f| family_data(cfg, s, f))
            .collect::<Result<Vec<_>, _>>()?;
        for (si, &suspect) in cfg.families.iter().enumerate() {
            let clock = Instant::now();
            let enc = pretrain_toy(&pretrain_config(cfg, s, suspect), &data[si].public)?;
            log::info!("seed {s}: pretrained {suspect} suspect in {:.1}s", clock.elapsed().as_secs_f64());
            for (di, &public) in cfg.families.iter().enumerate() {
                let clock = Instant::now();
                let (dec, ver) = cell_configs(cfg, s, suspect, public);
                let v = run_verification(&data[di].public, &data[di].private, &enc, DecoderSource::Train(dec), &ver)?;
                let cell = Cell {
                    id: format!("{s}/{suspect}/{public}"),
                    seed: s,
                    suspect,
                    public,
                    illegal: si == di,
                    p: v.test.p,
                    t: v.test.t,
                    decision: v.decision,
                    cancellation_exact: v.cancellation_exact,
                    decoder_id: v.decoder_id.clone(),
                };
                log::info!(
                    "cell {}: {} p = {:.3e} ({:.1}s)",
                    cell.id,
                    if cell.illegal { "illegal" } else { "legal" },
                    cell.p,
                    clock.elapsed().as_secs_f64()
                );
                cells.push(cell);
                verdicts.push(v);
            }
            suspects.push((s, suspect, enc));
        }
    }
    let scenarios: Vec<Scenario> = cells
        .iter()
        .map(|c| Scenario {
            label: c.id.clone(),
            illegal: c.illegal,
            p: c.p,
        })
        .collect();
    let metrics = classification_metrics(&scenarios, cfg.verification.alpha).map_err(|e| CliError::Failed(e.to_string()))?;
    Ok(GridRun {
        report: GridReport { cells, metrics },
        suspects,
        verdicts,
    })
}

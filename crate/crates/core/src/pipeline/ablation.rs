use serde::{Deserialize, Serialize};

use super::{finetune_from, pretrain, FinetuneConfig, PipelineError, PretrainConfig};
use crate::augment::AugmentConfig;
use crate::featurize::GraphConfig;
use crate::model::ModelConfig;
use crate::structure_io::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub augment: AugmentConfig,
}

/// Perturbation only, masking only, and all three, sharing the magnitudes
/// of `base`.
pub fn default_arms(base: &AugmentConfig) -> Vec<AblationArm> {
    let with = |p: bool, m: bool| AugmentConfig {
        enable_perturb: p,
        enable_atom_mask: m,
        enable_edge_mask: m,
        ..*base
    };
    vec![
        AblationArm {
            name: "RP".into(),
            augment: with(true, false),
        },
        AblationArm {
            name: "AM+EM".into(),
            augment: with(false, true),
        },
        AblationArm {
            name: "RP+AM+EM".into(),
            augment: with(true, true),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Fine-tune from the best-validation pre-training checkpoint instead of the final one.
    pub use_best_pretrain: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            use_best_pretrain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub arm: String,
    pub seed: u64,
    pub test_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub runs: usize,
    pub mae_mean: f64,
    /// Population standard deviation over seeds.
    pub mae_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One row per arm: `arm,runs,mae_mean,mae_std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,runs,mae_mean,mae_std\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.arm, r.runs, r.mae_mean, r.mae_std));
        }
        out
    }

    /// One row per run: `arm,seed,test_mae`.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("arm,seed,test_mae\n");
        for r in &self.runs {
            out.push_str(&format!("{},{},{}\n", r.arm, r.seed, r.test_mae));
        }
        out
    }
}

pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One pre-training plus fine-tuning run per (arm, seed). The arm replaces
/// `pcfg.augment`; the seed replaces both stage seeds.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    pretrain_data: &Dataset,
    labeled: &Dataset,
    mcfg: &ModelConfig,
    gcfg: &GraphConfig,
    pcfg: &PretrainConfig,
    fcfg: &FinetuneConfig,
    arms: &[AblationArm],
    cfg: &AblationConfig,
) -> Result<AblationTable, PipelineError> {
    if cfg.seeds.is_empty() || arms.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "ablation needs at least one arm and one seed".into(),
        ));
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for arm in arms {
        let mut maes = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let p = PretrainConfig {
                augment: arm.augment,
                seed,
                ..pcfg.clone()
            };
            let pre = pretrain(pretrain_data, mcfg, gcfg, &p)?;
            let init = if cfg.use_best_pretrain {
                &pre.best_params
            } else {
                &pre.final_params
            };
            let f = FinetuneConfig {
                seed,
                init_checkpoint: None,
                ..fcfg.clone()
            };
            let fine = finetune_from(labeled, mcfg, gcfg, &f, Some(init))?;
            let mae = fine.report.test_mae.ok_or_else(|| {
                PipelineError::InvalidConfig("ablation needs a non-empty test split".into())
            })?;
            log::info!("ablation {} seed {seed}: test MAE {mae}", arm.name);
            maes.push(mae);
            runs.push(AblationRun {
                arm: arm.name.clone(),
                seed,
                test_mae: mae,
            });
        }
        rows.push(AblationRow {
            arm: arm.name.clone(),
            runs: maes.len(),
            mae_mean: maes.iter().sum::<f64>() / maes.len() as f64,
            mae_std: population_std(&maes),
        });
    }
    Ok(AblationTable { runs, rows })
}

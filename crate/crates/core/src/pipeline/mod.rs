//! Training loops: self-supervised pre-training on two augmented views,
//! supervised fine-tuning with a regression head, the augmentation
//! ablation harness, and latent export.

mod ablation;
mod adam;
mod seeds;

pub use ablation::{
    ablation_run, default_arms, population_std, AblationArm, AblationConfig, AblationRow,
    AblationRun, AblationTable,
};
pub use adam::AdamState;
pub use seeds::{stream_rng, Stream};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_views, AugmentConfig, AugmentError};
use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};
use crate::featurize::{structure_to_graph, CrystalGraph, FeaturizeError, GraphConfig};
use crate::loss::{barlow_twins_loss, cross_correlation, mae_metric, mse_loss, LossConfig, LossError};
use crate::model::{
    encode, load_checkpoint, project, regress, save_checkpoint, GraphBatch, ModelConfig,
    ModelError, ModelParams, TargetScaler,
};
use crate::structure_io::{split_dataset, Dataset, DatasetKind, SplitSpec, StructureError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch of {0} is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("fine-tuning needs a labeled dataset")]
    UnlabeledDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no gradient for parameter {0}")]
    MissingGradient(usize),
    #[error("non-finite training loss at epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 64,
            epochs: 15,
            val_fraction: 0.05,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

fn check_lr(lr: f64) -> Result<(), PipelineError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(format!("lr must be positive, got {lr}")))
    }
}

fn check_epochs(epochs: usize) -> Result<(), PipelineError> {
    if epochs == 0 {
        return Err(PipelineError::InvalidConfig("epochs must be at least 1".into()));
    }
    Ok(())
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_lr(self.lr)?;
        check_epochs(self.epochs)?;
        if self.batch < 2 {
            return Err(PipelineError::BatchTooSmall(self.batch));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PipelineError::InvalidConfig(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !self.augment.any_enabled() {
            return Err(AugmentError::NoAugmentationEnabled.into());
        }
        self.augment.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Train, validation, and test fractions.
    pub split: [f64; 3],
    pub init_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 128,
            epochs: 200,
            split: [0.6, 0.2, 0.2],
            init_checkpoint: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_lr(self.lr)?;
        check_epochs(self.epochs)?;
        if self.batch == 0 {
            return Err(PipelineError::InvalidConfig("batch must be at least 1".into()));
        }
        SplitSpec::new(self.split, self.seed)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Label units; fine-tuning only.
    pub train_mae: Option<f64>,
    pub val_mae: Option<f64>,
}

/// Per-run record. Serializes deterministically; wall-clock time is kept
/// out of the JSON and written separately by [`RunReport::timing_json`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: Stage,
    pub seed: u64,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub pretrain: Option<PretrainConfig>,
    pub finetune: Option<FinetuneConfig>,
    pub init_checkpoint: Option<String>,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept as the best model.
    pub best_epoch: usize,
    pub test_mae: Option<f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String, PipelineError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn timing_json(&self) -> String {
        format!("{{\n  \"wall_clock_secs\": {}\n}}\n", self.wall_clock_secs)
    }

    fn write(&self, dir: &Path, prefix: &str) -> Result<(), PipelineError> {
        fs::write(dir.join(format!("{prefix}_report.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{prefix}_timing.json")), self.timing_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub report: RunReport,
}

pub const PRETRAIN_FINAL: &str = "pretrain_final.ckpt";
pub const PRETRAIN_BEST: &str = "pretrain_best.ckpt";
pub const FINETUNE_BEST: &str = "finetune_best.ckpt";
pub const FINETUNE_FINAL: &str = "finetune_final.ckpt";

impl PretrainOutcome {
    /// Writes both checkpoints, the report, and the timing file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.final_params, &dir.join(PRETRAIN_FINAL))?;
        save_checkpoint(&self.best_params, &dir.join(PRETRAIN_BEST))?;
        self.report.write(dir, "pretrain")
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub final_params: ModelParams,
    /// Parameters from the epoch with the lowest validation loss.
    pub best_params: ModelParams,
    pub report: RunReport,
}

impl FinetuneOutcome {
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.best_params, &dir.join(FINETUNE_BEST))?;
        save_checkpoint(&self.final_params, &dir.join(FINETUNE_FINAL))?;
        self.report.write(dir, "finetune")
    }
}

fn check_model(mcfg: &ModelConfig, gcfg: &GraphConfig) -> Result<(), PipelineError> {
    mcfg.validate()?;
    gcfg.validate()?;
    if mcfg.edge_feat_dim != gcfg.basis.len() {
        return Err(PipelineError::InvalidConfig(format!(
            "edge_feat_dim is {} but the distance basis has {} functions",
            mcfg.edge_feat_dim,
            gcfg.basis.len()
        )));
    }
    Ok(())
}

fn apply_gradients(
    params: &mut ModelParams,
    adam: &mut AdamState,
    grads: &Gradients,
    vars: &[Var],
) -> Result<(), PipelineError> {
    let g: Vec<Option<&Tensor>> = vars.iter().map(|v| grads.get(*v)).collect();
    let mut tensors = params.tensors_mut();
    adam.step(&mut tensors, &g)
}

fn new_optimizer(params: &ModelParams, lr: f64) -> AdamState {
    AdamState::new(lr, params.named_tensors().into_iter().map(|(_, t)| t))
}

/// Loss of one batch of paired views on `tape`.
fn twin_loss(
    tape: &mut Tape,
    params: &ModelParams,
    trainable: bool,
    views: &[(CrystalGraph, CrystalGraph)],
    loss: &LossConfig,
) -> Result<(Var, Vec<Var>), PipelineError> {
    let a: Vec<&CrystalGraph> = views.iter().map(|v| &v.0).collect();
    let b: Vec<&CrystalGraph> = views.iter().map(|v| &v.1).collect();
    let batch_a = GraphBatch::new(&a, &params.config)?;
    let batch_b = GraphBatch::new(&b, &params.config)?;
    let bound = params.bind(tape, trainable);
    let la = encode(tape, &bound, &batch_a)?;
    let za = project(tape, &bound, la)?;
    let lb = encode(tape, &bound, &batch_b)?;
    let zb = project(tape, &bound, lb)?;
    let c = cross_correlation(tape, za, zb, loss.eps)?;
    let l = barlow_twins_loss(tape, c, loss)?;
    Ok((l, bound.vars()))
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().expect("losses are scalars")
}

/// Self-supervised pre-training. Labels, if any, are ignored.
pub fn pretrain(
    data: &Dataset,
    mcfg: &ModelConfig,
    gcfg: &GraphConfig,
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome, PipelineError> {
    let start = Instant::now();
    check_model(mcfg, gcfg)?;
    pcfg.validate()?;
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let seed = pcfg.seed;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let n_val = ((pcfg.val_fraction * n as f64 + 1e-9).floor() as usize).min(n);
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.len() < 2 {
        return Err(PipelineError::BatchTooSmall(train_idx.len()));
    }
    let entries = data.entries();

    let mut params = ModelParams::init_encoder(mcfg, &mut stream_rng(seed, Stream::EncoderInit))
        .with_projector(&mut stream_rng(seed, Stream::ProjectorInit));
    let mut adam = new_optimizer(&params, pcfg.lr);
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut aug_rng = stream_rng(seed, Stream::Augment);

    // validation views are drawn once so epochs are compared on the same pairs
    let mut val_rng = stream_rng(seed, Stream::ValAugment);
    let val_views = val_idx
        .iter()
        .map(|&i| make_views(&entries[i].structure, &pcfg.augment, gcfg, &mut val_rng))
        .collect::<Result<Vec<_>, _>>()?;

    let mut train = train_idx.to_vec();
    let mut records = Vec::with_capacity(pcfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=pcfg.epochs {
        train.shuffle(&mut shuffle_rng);
        let mut losses = Vec::new();
        for chunk in train.chunks(pcfg.batch).filter(|c| c.len() >= 2) {
            let views = chunk
                .iter()
                .map(|&i| make_views(&entries[i].structure, &pcfg.augment, gcfg, &mut aug_rng))
                .collect::<Result<Vec<_>, _>>()?;
            let mut tape = Tape::new();
            let (l, vars) = twin_loss(&mut tape, &params, true, &views, &pcfg.loss)?;
            losses.push(scalar(&tape, l));
            let grads = tape.backward(l)?;
            apply_gradients(&mut params, &mut adam, &grads, &vars)?;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !train_loss.is_finite() {
            return Err(PipelineError::Diverged(epoch));
        }

        let mut val_losses = Vec::new();
        for chunk in val_views.chunks(pcfg.batch).filter(|c| c.len() >= 2) {
            let mut tape = Tape::new();
            let (l, _) = twin_loss(&mut tape, &params, false, chunk, &pcfg.loss)?;
            val_losses.push(scalar(&tape, l));
        }
        let val_loss =
            (!val_losses.is_empty()).then(|| val_losses.iter().sum::<f64>() / val_losses.len() as f64);
        log::info!("pretrain epoch {epoch}: train {train_loss:.6} val {val_loss:?}");

        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, params.clone()));
            }
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_mae: None,
            val_mae: None,
        });
    }

    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (pcfg.epochs, params.clone()),
    };
    let report = RunReport {
        stage: Stage::Pretrain,
        seed,
        model: *mcfg,
        graph: *gcfg,
        pretrain: Some(pcfg.clone()),
        finetune: None,
        init_checkpoint: None,
        num_train: train_idx.len(),
        num_val: val_idx.len(),
        num_test: 0,
        epochs: records,
        best_epoch,
        test_mae: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(PretrainOutcome {
        final_params: params,
        best_params,
        report,
    })
}

fn graphs_of(data: &Dataset, gcfg: &GraphConfig) -> Result<Vec<CrystalGraph>, PipelineError> {
    data.entries()
        .iter()
        .map(|e| structure_to_graph(&e.structure, gcfg).map_err(PipelineError::from))
        .collect()
}

/// Predictions in label units, evaluated `chunk` graphs at a time.
pub fn predict_graphs(
    params: &ModelParams,
    graphs: &[CrystalGraph],
    chunk: usize,
) -> Result<Vec<f64>, PipelineError> {
    let mut out = Vec::with_capacity(graphs.len());
    for part in graphs.chunks(chunk.max(1)) {
        let refs: Vec<&CrystalGraph> = part.iter().collect();
        out.extend(params.predict(&refs)?);
    }
    Ok(out)
}

/// Fine-tuning; the encoder starts from `fcfg.init_checkpoint` when set.
pub fn finetune(
    data: &Dataset,
    mcfg: &ModelConfig,
    gcfg: &GraphConfig,
    fcfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, PipelineError> {
    let init = fcfg
        .init_checkpoint
        .as_deref()
        .map(load_checkpoint)
        .transpose()?;
    finetune_from(data, mcfg, gcfg, fcfg, init.as_ref())
}

/// Fine-tuning from in-memory encoder weights. The head is always freshly
/// initialized, from the same stream whether or not `init` is given.
pub fn finetune_from(
    data: &Dataset,
    mcfg: &ModelConfig,
    gcfg: &GraphConfig,
    fcfg: &FinetuneConfig,
    init: Option<&ModelParams>,
) -> Result<FinetuneOutcome, PipelineError> {
    let start = Instant::now();
    check_model(mcfg, gcfg)?;
    fcfg.validate()?;
    if data.kind() != DatasetKind::Labeled {
        return Err(PipelineError::UnlabeledDataset);
    }
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let seed = fcfg.seed;
    let split_seed: u64 = stream_rng(seed, Stream::Split).random();
    let (train, val, test) = split_dataset(data, &SplitSpec::new(fcfg.split, split_seed)?)?;
    if train.is_empty() {
        return Err(PipelineError::InvalidConfig("training split is empty".into()));
    }
    let labels = |d: &Dataset| d.labels().expect("labeled dataset");
    let (train_y, val_y, test_y) = (labels(&train), labels(&val), labels(&test));
    let train_g = graphs_of(&train, gcfg)?;
    let val_g = graphs_of(&val, gcfg)?;
    let test_g = graphs_of(&test, gcfg)?;
    let scaler = TargetScaler::fit(&train_y);
    let train_z: Vec<f64> = train_y.iter().map(|y| scaler.standardize(*y)).collect();

    let mut head_rng = stream_rng(seed, Stream::HeadInit);
    let mut params = match init {
        Some(p) => p.transfer_encoder(mcfg, &mut head_rng)?,
        None => ModelParams::init_encoder(mcfg, &mut stream_rng(seed, Stream::EncoderInit))
            .with_head(&mut head_rng),
    };
    params.target_scaler = Some(scaler);
    let mut adam = new_optimizer(&params, fcfg.lr);
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);

    let mut order: Vec<usize> = (0..train_g.len()).collect();
    let mut records = Vec::with_capacity(fcfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=fcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sse = 0.0;
        for chunk in order.chunks(fcfg.batch) {
            let graphs: Vec<&CrystalGraph> = chunk.iter().map(|&i| &train_g[i]).collect();
            let batch = GraphBatch::new(&graphs, mcfg)?;
            let target = Tensor::matrix(chunk.len(), 1, chunk.iter().map(|&i| train_z[i]).collect())?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let latent = encode(&mut tape, &bound, &batch)?;
            let pred = regress(&mut tape, &bound, latent)?;
            let target = tape.constant(target);
            let l = mse_loss(&mut tape, pred, target)?;
            sse += scalar(&tape, l) * chunk.len() as f64;
            let grads = tape.backward(l)?;
            apply_gradients(&mut params, &mut adam, &grads, &bound.vars())?;
        }
        let train_loss = sse / train_g.len() as f64;
        if !train_loss.is_finite() {
            return Err(PipelineError::Diverged(epoch));
        }

        let train_pred = predict_graphs(&params, &train_g, fcfg.batch)?;
        let train_mae = mae_metric(&train_pred, &train_y)?;
        let (val_loss, val_mae) = if val_g.is_empty() {
            (None, None)
        } else {
            let pred = predict_graphs(&params, &val_g, fcfg.batch)?;
            let mse = pred
                .iter()
                .zip(&val_y)
                .map(|(p, y)| (scaler.standardize(*p) - scaler.standardize(*y)).powi(2))
                .sum::<f64>()
                / pred.len() as f64;
            (Some(mse), Some(mae_metric(&pred, &val_y)?))
        };
        log::info!(
            "finetune epoch {epoch}: train {train_loss:.6} mae {train_mae:.6} val {val_loss:?}"
        );
        // without a validation split, selection falls back to the training loss
        let criterion = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| criterion < *b) {
            best = Some((criterion, epoch, params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_mae: Some(train_mae),
            val_mae,
        });
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let test_mae = if test_g.is_empty() {
        None
    } else {
        let pred = predict_graphs(&best_params, &test_g, fcfg.batch)?;
        Some(mae_metric(&pred, &test_y)?)
    };
    let report = RunReport {
        stage: Stage::Finetune,
        seed,
        model: *mcfg,
        graph: *gcfg,
        pretrain: None,
        finetune: Some(fcfg.clone()),
        init_checkpoint: fcfg
            .init_checkpoint
            .as_ref()
            .map(|p| p.display().to_string()),
        num_train: train.len(),
        num_val: val.len(),
        num_test: test.len(),
        epochs: records,
        best_epoch,
        test_mae,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(FinetuneOutcome {
        final_params: params,
        best_params,
        report,
    })
}

/// CSV of encoder latents, one row per entry in id order:
/// `id, z0 .. z{hidden-1}` and a trailing `label` column for labeled data.
pub fn export_embeddings(
    params: &ModelParams,
    data: &Dataset,
    gcfg: &GraphConfig,
) -> Result<String, PipelineError> {
    let mut entries: Vec<_> = data.entries().iter().collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let labeled = data.kind() == DatasetKind::Labeled;
    let h = params.config.hidden_dim;

    let mut out = String::from("id");
    for k in 0..h {
        out.push_str(&format!(",z{k}"));
    }
    if labeled {
        out.push_str(",label");
    }
    out.push('\n');
    for part in entries.chunks(64) {
        let graphs = part
            .iter()
            .map(|e| structure_to_graph(&e.structure, gcfg))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&CrystalGraph> = graphs.iter().collect();
        let latent = params.embed(&refs)?;
        for (r, e) in part.iter().enumerate() {
            out.push_str(&e.id);
            for v in latent.row(r) {
                out.push_str(&format!(",{v}"));
            }
            if let Some(y) = e.label.filter(|_| labeled) {
                out.push_str(&format!(",{y}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

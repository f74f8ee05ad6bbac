//! Flat `section.key = value` configuration. Later sources override earlier
//! ones: defaults, then the config file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use crystal_twins::augment::AugmentConfig;
use crystal_twins::featurize::{GaussianBasis, GraphConfig};
use crystal_twins::geometry::NeighborConfig;
use crystal_twins::loss::LossConfig;
use crystal_twins::model::ModelConfig;
use crystal_twins::pipeline::{AblationConfig, FinetuneConfig, PretrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub index_file: Option<PathBuf>,
    /// Unlabeled corpus for `ablate`; defaults to `data_root`.
    pub pretrain_root: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub neighbors: NeighborConfig,
    pub basis: GaussianBasis,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            index_file: None,
            pretrain_root: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            neighbors: NeighborConfig::default(),
            basis: GaussianBasis::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid config value for {key}: {value:?} ({e})"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "paths.data_root" => self.data_root = Some(PathBuf::from(v)),
            "paths.index_file" => self.index_file = Some(PathBuf::from(v)),
            "paths.pretrain_root" => self.pretrain_root = Some(PathBuf::from(v)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "paths.out_dir" => self.out_dir = PathBuf::from(v),

            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "model.n_conv" => self.model.n_conv = parse(key, v)?,
            "model.proj_dim" => self.model.proj_dim = parse(key, v)?,
            "model.head_hidden" => self.model.head_hidden = parse(key, v)?,

            "graph.cutoff" => self.neighbors.cutoff = parse(key, v)?,
            "graph.max_neighbors" => self.neighbors.max_neighbors = parse(key, v)?,
            "graph.d_min" => self.basis.d_min = parse(key, v)?,
            "graph.d_max" => self.basis.d_max = parse(key, v)?,
            "graph.step" => self.basis.step = parse(key, v)?,
            "graph.var" => self.basis.var = parse(key, v)?,

            "augment.perturb" => self.augment.enable_perturb = parse(key, v)?,
            "augment.atom_mask" => self.augment.enable_atom_mask = parse(key, v)?,
            "augment.edge_mask" => self.augment.enable_edge_mask = parse(key, v)?,
            "augment.max_displacement" => self.augment.max_displacement = parse(key, v)?,
            "augment.mask_fraction" => self.augment.mask_fraction = parse(key, v)?,

            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.eps" => self.loss.eps = parse(key, v)?,

            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.val_fraction" => self.pretrain.val_fraction = parse(key, v)?,

            "finetune.lr" => self.finetune.lr = parse(key, v)?,
            "finetune.batch" => self.finetune.batch = parse(key, v)?,
            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.split" => {
                let parts: Vec<f64> = parse_list(key, v)?;
                self.finetune.split = parts
                    .try_into()
                    .map_err(|_| anyhow!("invalid config value for {key}: expected three fractions"))?;
            }

            "ablation.seeds" => self.ablation.seeds = parse_list(key, v)?,
            "ablation.use_best_pretrain" => self.ablation.use_best_pretrain = parse(key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("{origin}:{}: duplicate config key {key:?}", n + 1);
            }
            self.set(key, value)
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not `key=value`"))?;
        self.set(key.trim(), value)
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            neighbors: self.neighbors,
            basis: self.basis,
        }
    }

    /// Model config with the edge feature width taken from the distance basis.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            edge_feat_dim: self.basis.len(),
            ..self.model
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            augment: self.augment,
            loss: self.loss,
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            init_checkpoint: self.checkpoint.clone(),
            ..self.finetune.clone()
        }
    }

    pub fn require_data_root(&self) -> Result<&Path> {
        let root = self
            .data_root
            .as_deref()
            .ok_or_else(|| anyhow!("missing config key \"paths.data_root\""))?;
        if !root.is_dir() {
            bail!("paths.data_root {} is not a directory", root.display());
        }
        Ok(root)
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        let path = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| anyhow!("missing config key \"paths.checkpoint\""))?;
        if !path.is_file() {
            bail!("paths.checkpoint {} does not exist", path.display());
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# pre-training\nseed = 7\npretrain.lr = 1e-4  # faster\n\nfinetune.split = 0.8, 0.1, 0.1\naugment.atom_mask = false\n",
            "test.cfg",
        )
        .unwrap();
        cfg.apply_override("pretrain.epochs=3").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain().lr, 1e-4);
        assert_eq!(cfg.pretrain().epochs, 3);
        assert_eq!(cfg.pretrain().seed, 7);
        assert_eq!(cfg.finetune.split, [0.8, 0.1, 0.1]);
        assert!(!cfg.pretrain().augment.enable_atom_mask);
        assert_eq!(cfg.model().edge_feat_dim, 41);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("pretrain.learning_rate = 1\n", "x.cfg").unwrap_err();
        assert!(format!("{err:#}").contains("pretrain.learning_rate"));
        let err = cfg.apply_override("model.hidden_dim=abc").unwrap_err();
        assert!(err.to_string().contains("model.hidden_dim"));
        assert!(cfg.apply_text("a = 1\na = 2", "x.cfg").is_err());
        assert!(cfg.apply_text("no equals sign", "x.cfg").is_err());
        assert!(cfg.set("finetune.split", "0.5,0.5").is_err());
    }
}

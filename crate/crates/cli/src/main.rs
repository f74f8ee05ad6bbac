mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crystal_twins::featurize::{graph_to_json_line, structure_to_graph};
use crystal_twins::loss::mae_metric;
use crystal_twins::model::load_checkpoint;
use crystal_twins::pipeline::{
    ablation_run, default_arms, export_embeddings, finetune, predict_graphs, pretrain,
};
use crystal_twins::structure_io::{load_dataset, Dataset, DatasetKind};
use crystal_twins::toy::{gen_toy, write_toy};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ct", version, about = "Crystal graph pre-training and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory of CIF files.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// `id,label` index; makes the dataset labeled.
    #[arg(long)]
    index_file: Option<PathBuf>,
    /// Model checkpoint to read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one JSON graph per structure to graphs.jsonl.
    Featurize(Common),
    /// Self-supervised pre-training.
    Pretrain(Common),
    /// Supervised fine-tuning, optionally from a pre-trained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint whose encoder initializes the model.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Predictions and MAE of a fine-tuned checkpoint.
    Evaluate(Common),
    /// Encoder latents as CSV.
    Embed(Common),
    /// Augmentation ablation: pre-train and fine-tune per arm and seed.
    Ablate(Common),
    /// Synthetic perovskite dataset.
    GenToy {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(p) = &common.data_root {
        cfg.data_root = Some(p.clone());
    }
    if let Some(p) = &common.index_file {
        cfg.index_file = Some(p.clone());
    }
    if let Some(p) = &common.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    Ok(cfg)
}

fn load(root: &Path, index: Option<&Path>) -> Result<Dataset> {
    if let Some(i) = index {
        if !i.is_file() {
            bail!("index file {} does not exist", i.display());
        }
    }
    load_dataset(root, index).with_context(|| format!("loading dataset from {}", root.display()))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    load(cfg.require_data_root()?, cfg.index_file.as_deref())
}

fn require_labeled(data: &Dataset) -> Result<()> {
    if data.kind() != DatasetKind::Labeled {
        bail!("this command needs labels; set paths.index_file");
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize(common) => {
            let cfg = resolve(&common)?;
            let data = load_data(&cfg)?;
            let graph_cfg = cfg.graph();
            let mut out = String::new();
            for e in data.entries() {
                let g = structure_to_graph(&e.structure, &graph_cfg)
                    .with_context(|| format!("featurizing {}", e.id))?;
                out.push_str(&graph_to_json_line(&e.id, &g));
                out.push('\n');
            }
            fs::write(out_dir(&cfg)?.join("graphs.jsonl"), out)?;
        }
        Command::Pretrain(common) => {
            let cfg = resolve(&common)?;
            let data = load_data(&cfg)?;
            let outcome = pretrain(&data, &cfg.model(), &cfg.graph(), &cfg.pretrain())?;
            outcome.write(out_dir(&cfg)?)?;
        }
        Command::Finetune {
            common,
            init_checkpoint,
        } => {
            let mut cfg = resolve(&common)?;
            if init_checkpoint.is_some() {
                cfg.checkpoint = init_checkpoint;
            }
            if cfg.checkpoint.is_some() {
                cfg.require_checkpoint()?;
            }
            let data = load_data(&cfg)?;
            require_labeled(&data)?;
            let outcome = finetune(&data, &cfg.model(), &cfg.graph(), &cfg.finetune())?;
            outcome.write(out_dir(&cfg)?)?;
        }
        Command::Evaluate(common) => {
            let cfg = resolve(&common)?;
            let params = load_checkpoint(cfg.require_checkpoint()?)?;
            if params.head.is_none() {
                bail!("checkpoint has no regression head");
            }
            let data = load_data(&cfg)?;
            require_labeled(&data)?;
            let graph_cfg = cfg.graph();
            let graphs = data
                .entries()
                .iter()
                .map(|e| structure_to_graph(&e.structure, &graph_cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let pred = predict_graphs(&params, &graphs, 128)?;
            let labels = data.labels().expect("labeled");
            let mae = mae_metric(&pred, &labels)?;
            let mut csv = String::from("id,label,prediction\n");
            for ((e, y), p) in data.entries().iter().zip(&labels).zip(&pred) {
                csv.push_str(&format!("{},{y},{p}\n", e.id));
            }
            let dir = out_dir(&cfg)?;
            fs::write(dir.join("predictions.csv"), csv)?;
            fs::write(
                dir.join("metrics.json"),
                format!("{{\n  \"n\": {},\n  \"mae\": {mae}\n}}\n", labels.len()),
            )?;
            println!("MAE {mae}");
        }
        Command::Embed(common) => {
            let cfg = resolve(&common)?;
            let params = load_checkpoint(cfg.require_checkpoint()?)?;
            let data = load_data(&cfg)?;
            let csv = export_embeddings(&params, &data, &cfg.graph())?;
            fs::write(out_dir(&cfg)?.join("embeddings.csv"), csv)?;
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common)?;
            let labeled = load_data(&cfg)?;
            require_labeled(&labeled)?;
            let corpus = match &cfg.pretrain_root {
                Some(root) => load(root, None)?,
                None => labeled.unlabeled(),
            };
            let table = ablation_run(
                &corpus,
                &labeled,
                &cfg.model(),
                &cfg.graph(),
                &cfg.pretrain(),
                &cfg.finetune(),
                &default_arms(&cfg.augment),
                &cfg.ablation,
            )?;
            let dir = out_dir(&cfg)?;
            fs::write(dir.join("ablation.csv"), table.to_csv())?;
            fs::write(dir.join("ablation_runs.csv"), table.runs_csv())?;
        }
        Command::GenToy { n, out, seed } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            write_toy(&gen_toy(n, seed)?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let level = std::env::var("CT_LOG_LEVEL").unwrap_or_else(|_| "error".into());
    env_logger::Builder::new().parse_filters(&level).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

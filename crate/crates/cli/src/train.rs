use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use tractfov::context::Normalization;
use tractfov::experiment::{contexts, dataset_labels};
use tractfov::net::{train, Model, ModelConfig};
use tractfov::Tractogram;

use crate::io::{at, create_dir, read_config, read_split, require_dir, write_json, CliResult, Failure, RESOLVED_CONFIG_FILE};

/// Context substreams of training and validation data.
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_VAL: u64 = 2;

/// Every model setting, each optional.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub n_points: Option<usize>,
    pub k_local: Option<usize>,
    pub k_global: Option<usize>,
    pub repr_dim: Option<usize>,
    pub head_widths: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub dropout: Option<f64>,
    pub batch_norm: Option<bool>,
    pub normalization: Option<Normalization>,
}

impl ModelOverrides {
    fn apply(&self, c: &mut ModelConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(n_points, k_local, k_global, repr_dim, head_widths, num_classes, learning_rate, batch_size, epochs, seed, dropout, batch_norm, normalization);
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training split, optionally augmented.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file of run settings, such as an earlier resolved config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train and validate on uncut tractograms only.
    #[arg(long)]
    pub no_fovca: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_local: Option<usize>,
    #[arg(long)]
    pub k_global: Option<usize>,
    #[arg(long)]
    pub repr_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub head_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
}

/// Train command settings. A resolved config written by an earlier run
/// parses as a complete set.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub no_fovca: Option<bool>,
    #[serde(default)]
    pub model: ModelOverrides,
}

#[derive(Serialize)]
struct Resolved<'a> {
    train: &'a Path,
    val: &'a Path,
    no_fovca: bool,
    model: &'a ModelConfig,
}

fn tractograms(named: Vec<(String, Tractogram)>) -> Vec<Tractogram> {
    named.into_iter().map(|(_, t)| t).collect()
}

pub fn run(args: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let run_file = match &args.config {
        Some(p) => read_config::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    let train_dir =
        args.train.clone().or(run_file.train).ok_or_else(|| Failure::usage("no training directory given"))?;
    let val_dir = args.val.clone().or(run_file.val).ok_or_else(|| Failure::usage("no validation directory given"))?;
    let no_fovca = args.no_fovca || run_file.no_fovca.unwrap_or(false);
    require_dir(&train_dir, "training")?;
    require_dir(&val_dir, "validation")?;
    let (classes, train_set) = read_split(&train_dir, no_fovca)?;
    let class_names =
        classes.ok_or_else(|| Failure::usage(format!("{} has no classes.json", train_dir.display())))?;
    let (_, val_set) = read_split(&val_dir, no_fovca)?;
    let train_set = tractograms(train_set);
    let val_set = tractograms(val_set);

    let file = run_file.model;
    let flags = ModelOverrides {
        k_local: args.k_local,
        k_global: args.k_global,
        repr_dim: args.repr_dim,
        head_widths: args.head_widths.clone(),
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed,
        dropout: args.dropout,
        batch_norm: args.batch_norm,
        ..ModelOverrides::default()
    };
    let mut config = ModelConfig::new(class_names.len());
    if let Some(n) = train_set.iter().find_map(|t| t.uniform_n_points()) {
        config.n_points = n;
    }
    file.apply(&mut config);
    flags.apply(&mut config);
    if file.normalization.is_none() {
        config.normalization = Normalization::fit(&train_set)?;
    }
    if config.num_classes != class_names.len() {
        return Err(Failure::usage(format!(
            "config sets {} classes, {} lists {}",
            config.num_classes,
            train_dir.display(),
            class_names.len()
        )));
    }
    config.validate()?;

    create_dir(&args.out)?;
    write_json(
        &args.out.join(RESOLVED_CONFIG_FILE),
        &Resolved { train: &train_dir, val: &val_dir, no_fovca, model: &config },
    )?;
    let train_data = contexts(&train_set, &config, STREAM_TRAIN)?;
    let val_data = contexts(&val_set, &config, STREAM_VAL)?;
    let train_labels = dataset_labels(&train_data)?;
    let val_labels = dataset_labels(&val_data)?;
    eprintln!("training on {} streamlines, validating on {}", train_data.len(), val_data.len());
    let outcome = train(&config, &train_data, &train_labels, Some((&val_data, val_labels.as_slice())))?;

    let mut log = String::new();
    for r in &outcome.log {
        eprintln!(
            "epoch {:>3}  loss {:.5}  train acc {:.4}  val acc {}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
        log.push_str(&serde_json::to_string(r).map_err(|e| Failure::Runtime(e.to_string()))?);
        log.push('\n');
    }
    let log_path = args.out.join("train_log.jsonl");
    at(&log_path, fs::write(&log_path, log))?;
    let model = |params| Model { config: config.clone(), class_names: class_names.clone(), params };
    at(&args.out, model(outcome.best).save(&args.out.join("model.json")))?;
    at(&args.out, model(outcome.final_params).save(&args.out.join("final.json")))?;
    eprintln!("kept epoch {} of {}", outcome.best_epoch, config.epochs);
    Ok(())
}

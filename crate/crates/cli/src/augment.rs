use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use tractfov::fovcut::{augment_training_set, DEFAULT_MIN_SURVIVING_POINTS, DEFAULT_PLANES_PER_SUBJECT};
use tractfov::Tractogram;

use crate::io::{
    create_dir, read_config, read_split, write_classes, write_json, write_tractogram, CliResult, Failure, IndexEntry,
    AUGMENT_INDEX_FILE, RESOLVED_CONFIG_FILE,
};

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Split directory of labeled JSONL tractograms.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file of augmentation settings, such as an earlier resolved config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cutting planes per subject [default: 10].
    #[arg(long)]
    pub planes: Option<usize>,
    /// Surviving runs shorter than this many points count as removed [default: 2].
    #[arg(long)]
    pub min_surviving_points: Option<usize>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub input: Option<PathBuf>,
    pub planes: Option<usize>,
    pub min_surviving_points: Option<usize>,
    pub seed: Option<u64>,
}

pub fn run(args: &AugmentArgs, seed: Option<u64>) -> CliResult<()> {
    let file = match &args.config {
        Some(p) => read_config::<AugmentConfig>(p)?,
        None => AugmentConfig::default(),
    };
    let input = args.input.clone().or(file.input).ok_or_else(|| Failure::usage("no input directory given"))?;
    let planes = args.planes.or(file.planes).unwrap_or(DEFAULT_PLANES_PER_SUBJECT);
    let min_points =
        args.min_surviving_points.or(file.min_surviving_points).unwrap_or(DEFAULT_MIN_SURVIVING_POINTS);
    let seed = seed.or(file.seed).unwrap_or(0);
    let resolved = AugmentConfig {
        input: Some(input.clone()),
        planes: Some(planes),
        min_surviving_points: Some(min_points),
        seed: Some(seed),
    };
    crate::io::require_dir(&input, "input")?;
    let (classes, named) = read_split(&input, true)?;
    let subjects: Vec<Tractogram> = named.iter().map(|(_, t)| t.clone()).collect();
    let set = augment_training_set(&subjects, planes, seed, min_points)?;
    create_dir(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    if let Some(c) = &classes {
        write_classes(&args.out, c)?;
    }
    let mut index = Vec::with_capacity(set.tractograms.len());
    for a in &set.tractograms {
        let base = &named[a.subject_index].0;
        let file = match a.plane_index {
            None => format!("{base}.jsonl"),
            Some(p) => format!("{base}_cut-{p:02}.jsonl"),
        };
        write_tractogram(&a.tractogram, &args.out.join(&file))?;
        index.push(IndexEntry {
            file,
            subject: a.tractogram.subject_id().to_string(),
            plane_index: a.plane_index,
        });
    }
    write_json(&args.out.join(AUGMENT_INDEX_FILE), &index)?;
    write_json(&args.out.join("report.json"), &set.report)?;
    eprintln!(
        "augmented {} subjects with {} planes each: cut fraction {:.4}, {} streamlines written",
        subjects.len(),
        planes,
        set.report.cut_fraction,
        set.report.total_output
    );
    Ok(())
}

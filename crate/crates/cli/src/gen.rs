use std::path::PathBuf;

use clap::Args;
use tractfov::synth::{default_spec, generate_atlas, generate_cohort, CohortSpec, Split};

use crate::io::{create_dir, read_config, write_classes, write_json, write_tractogram, CliResult, RESOLVED_CONFIG_FILE};

/// Jittered streamlines per bundle in the written atlas.
const ATLAS_STREAMLINES: usize = 40;

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Cohort spec JSON; the built-in eight-class cohort when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's subject count.
    #[arg(long)]
    pub subjects: Option<usize>,
}

pub fn run(args: &GenArgs, seed: Option<u64>) -> CliResult<()> {
    let mut spec: CohortSpec = match &args.spec {
        Some(p) => read_config(p)?,
        None => default_spec(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = args.subjects {
        spec.subjects = n;
    }
    let cohort = generate_cohort(&spec)?;
    create_dir(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG_FILE), &spec)?;
    write_json(&args.out.join("manifest.json"), &cohort.manifest)?;
    for split in Split::ALL {
        let dir = args.out.join(split.as_str());
        create_dir(&dir)?;
        write_classes(&dir, &cohort.manifest.class_names)?;
        for t in cohort.split(split) {
            write_tractogram(t, &dir.join(format!("{}.jsonl", t.subject_id())))?;
        }
    }
    write_tractogram(&generate_atlas(&spec, ATLAS_STREAMLINES)?, &args.out.join("atlas.jsonl"))?;
    eprintln!(
        "generated {} subjects ({} train, {} val, {} test) in {}",
        spec.subjects,
        cohort.train.len(),
        cohort.val.len(),
        cohort.test.len(),
        args.out.display()
    );
    Ok(())
}

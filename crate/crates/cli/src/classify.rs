use std::path::{Path, PathBuf};

use clap::Args;
use tractfov::eval::Parcellation;
use tractfov::experiment::contexts;
use tractfov::net::{predict, Model};
use tractfov::Tractogram;

use crate::io::{
    at, create_dir, list_files, read_tractogram, require_file, stem, write_classes, write_json, write_tractogram,
    CliResult, Failure,
};

/// Context substream of classified data.
pub const STREAM_CLASSIFY: u64 = 3;

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    /// Model manifest written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// A `.jsonl` or `.trk` tractogram, or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files = list_files(path, "jsonl")?;
        files.extend(list_files(path, "trk")?);
        files.sort();
        if files.is_empty() {
            return Err(Failure::usage(format!("{} holds no tractograms", path.display())));
        }
        Ok(files)
    } else {
        require_file(path, "input")?;
        Ok(vec![path.to_path_buf()])
    }
}

/// Labels every streamline of `t` with the model's prediction.
pub fn classify(model: &Model, t: &Tractogram) -> CliResult<(Tractogram, Vec<usize>)> {
    let n = model.config.n_points;
    let t = if t.uniform_n_points() == Some(n) || t.is_empty() { t.clone() } else { t.resampled(n)? };
    if t.is_empty() {
        return Ok((t, Vec::new()));
    }
    let data = contexts(std::slice::from_ref(&t), &model.config, STREAM_CLASSIFY)?;
    let pred = predict(&model.params, &data, None)?;
    let labeled = t.streamlines().iter().zip(&pred).map(|(s, &p)| s.clone().with_label(Some(p))).collect();
    let out = Tractogram::new(labeled, t.subject_id(), t.space_tag(), model.class_names.clone())?;
    Ok((out, pred))
}

pub fn run(args: &ClassifyArgs) -> CliResult<()> {
    require_file(&args.model, "model")?;
    let model = at(&args.model, Model::load(&args.model))?;
    let files = inputs(&args.input)?;
    create_dir(&args.out)?;
    write_classes(&args.out, &model.class_names)?;
    let parcel_root = args.out.join("parcels");
    for f in files {
        let t = read_tractogram(&f, None)?;
        let (labeled, pred) = classify(&model, &t)?;
        let name = stem(&f);
        write_tractogram(&labeled, &args.out.join(format!("{name}.jsonl")))?;
        let parcellation = Parcellation::from_predictions(labeled.subject_id(), &model.class_names, &pred)?;
        let dir = parcel_root.join(&name);
        create_dir(&dir)?;
        write_json(&dir.join("parcellation.json"), &parcellation)?;
        for (c, ids) in parcellation.parcels.iter().enumerate() {
            let members = ids.iter().map(|&i| labeled.streamlines()[i].clone()).collect();
            let parcel = labeled.derive(members)?;
            write_tractogram(&parcel, &dir.join(format!("{:02}_{}.jsonl", c, model.class_names[c])))?;
        }
        eprintln!("classified {} streamlines of {}", labeled.len(), f.display());
    }
    Ok(())
}

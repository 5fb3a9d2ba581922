use std::fs;
use std::path::PathBuf;

use clap::Args;
use tractfov::eval::{
    default_scope, evaluate, table_csv, Atlas, EvalOptions, SubjectEval, TableRow, DEFAULT_MIN_STREAMLINES,
};

use crate::io::{at, create_dir, list_files, read_classes, read_tractogram, require_dir, require_file, stem, write_json, CliResult, Failure};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted JSONL tractograms written by `classify`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of the same tractograms with true labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// Labeled atlas tractogram for the atlas-to-tract distance.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Tracts counted by the identification rate, as names or ids. Defaults
    /// to every class but the first.
    #[arg(long, value_delimiter = ',')]
    pub tracts: Option<Vec<String>>,
    #[arg(long, default_value_t = DEFAULT_MIN_STREAMLINES)]
    pub min_streamlines: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Row label in the CSV table.
    #[arg(long, default_value = "model")]
    pub method: String,
    /// The inputs are complete tractograms: fill the `original` columns.
    #[arg(long)]
    pub complete: bool,
}

fn resolve_tracts(names: &[String], list: &[String]) -> CliResult<Vec<usize>> {
    list.iter()
        .map(|s| {
            let s = s.trim();
            names
                .iter()
                .position(|n| n == s)
                .or_else(|| s.parse::<usize>().ok().filter(|&i| i < names.len()))
                .ok_or_else(|| Failure::usage(format!("unknown tract `{s}`")))
        })
        .collect()
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    require_dir(&args.pred, "prediction")?;
    require_dir(&args.truth, "truth")?;
    let names = match read_classes(&args.truth)? {
        Some(n) => n,
        None => read_classes(&args.pred)?
            .ok_or_else(|| Failure::usage("neither directory has a classes.json"))?,
    };
    let tir_tracts = match &args.tracts {
        Some(list) => resolve_tracts(&names, list)?,
        None => default_scope(names.len()),
    };
    let atlas = match &args.atlas {
        Some(p) => {
            require_file(p, "atlas")?;
            let t = read_tractogram(p, Some(&names))?;
            Some(Atlas::from_tractogram(&t, names.len())?)
        }
        None => None,
    };
    let mut pairs = Vec::new();
    for f in list_files(&args.truth, "jsonl")? {
        let p = args.pred.join(format!("{}.jsonl", stem(&f)));
        require_file(&p, "prediction")?;
        pairs.push((read_tractogram(&p, Some(&names))?, read_tractogram(&f, Some(&names))?));
    }
    if pairs.is_empty() {
        return Err(Failure::usage(format!("{} holds no tractograms", args.truth.display())));
    }
    let subjects: Vec<SubjectEval<'_>> = pairs.iter().map(|(p, t)| SubjectEval { pred: p, truth: t }).collect();
    let opts = EvalOptions {
        f1_scope: default_scope(names.len()),
        tir_tracts,
        min_streamlines: args.min_streamlines,
        atlas: atlas.as_ref(),
    };
    let report = evaluate(&names, &subjects, &opts)?;
    create_dir(&args.out)?;
    write_json(&args.out.join("eval_report.json"), &report)?;
    let row = if args.complete {
        TableRow { method: &args.method, original: Some(&report.metrics), cut: None }
    } else {
        TableRow { method: &args.method, original: None, cut: Some(&report.metrics) }
    };
    let csv_path = args.out.join("table.csv");
    at(&csv_path, fs::write(&csv_path, table_csv(&[row])))?;
    let m = &report.metrics;
    eprintln!(
        "accuracy {}  macro-F1 {}  cut {}  unaffected {}  TIR {:.4}",
        fmt(m.all.accuracy),
        fmt(m.all.macro_f1),
        fmt(m.cut.accuracy),
        fmt(m.unaffected.accuracy),
        report.mean_tir
    );
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

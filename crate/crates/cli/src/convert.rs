use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use tractfov::trk::{decode_trk, encode_trk, TrkHeader};

use crate::io::{at, read_tractogram, require_file, write_tractogram, CliResult, Failure};

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// `.trk` or `.jsonl`; the output takes the other format.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// `.trk` file whose header is reused when writing `.trk`.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

fn is_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e == ext)
}

pub fn run_convert(args: &ConvertArgs) -> CliResult<()> {
    require_file(&args.input, "input")?;
    let t = read_tractogram(&args.input, None)?;
    if is_ext(&args.output, "jsonl") {
        write_tractogram(&t, &args.output)?;
    } else if is_ext(&args.output, "trk") {
        let header = match &args.template {
            Some(p) => {
                require_file(p, "template")?;
                at(p, decode_trk(&at(p, fs::read(p))?))?.header
            }
            None => TrkHeader::identity(),
        };
        let bytes = at(&args.output, encode_trk(&header, &t))?;
        at(&args.output, fs::write(&args.output, bytes))?;
    } else {
        return Err(Failure::usage(format!("{}: output must end in .trk or .jsonl", args.output.display())));
    }
    eprintln!("wrote {} streamlines to {}", t.len(), args.output.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    pub path: PathBuf,
}

fn cstr(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

/// Prints a header dump and streamline statistics.
pub fn run_info(args: &InfoArgs) -> CliResult<()> {
    require_file(&args.path, "input")?;
    let t = if is_ext(&args.path, "jsonl") {
        read_tractogram(&args.path, None)?
    } else {
        let file = at(&args.path, decode_trk(&at(&args.path, fs::read(&args.path))?))?;
        let h = &file.header;
        println!("format: trk");
        println!("version: {}", h.version);
        println!("n_count: {}", h.n_count);
        println!("dim: {:?}", h.dim);
        println!("voxel_size: {:?}", h.voxel_size);
        println!("voxel_order: {}", cstr(&h.voxel_order));
        println!("n_scalars: {}", h.n_scalars);
        println!("n_properties: {}", h.n_properties);
        for row in &h.vox_to_ras {
            println!("vox_to_ras: {row:?}");
        }
        file.tractogram
    };
    println!("streamlines: {}", t.len());
    if !t.is_empty() {
        let counts: Vec<usize> = t.streamlines().iter().map(|s| s.n_points()).collect();
        let lengths: Vec<f64> = t.streamlines().iter().map(|s| s.arc_length()).collect();
        println!("points_per_streamline: min {} max {}", counts.iter().min().unwrap(), counts.iter().max().unwrap());
        println!(
            "length_mm: min {:.3} mean {:.3} max {:.3}",
            lengths.iter().copied().fold(f64::INFINITY, f64::min),
            lengths.iter().sum::<f64>() / lengths.len() as f64,
            lengths.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        );
        let (lo, hi) = t.bounding_box()?;
        println!("bounds_mm: [{:.3}, {:.3}, {:.3}] .. [{:.3}, {:.3}, {:.3}]", lo.x, lo.y, lo.z, hi.x, hi.y, hi.z);
    }
    Ok(())
}

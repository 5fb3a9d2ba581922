//! Files, directories and the error-to-exit-code contract.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tractfov::jsonl::{read_jsonl_path, write_jsonl_path};
use tractfov::trk::decode_trk;
use tractfov::{Error, Tractogram};

pub const CLASSES_FILE: &str = "classes.json";
pub const AUGMENT_INDEX_FILE: &str = "augmentation.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// A failed command. Usage failures exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Failure {
        Failure::Usage(msg.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::InvalidSpec(_) | Error::NotATrkFile => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Attaches `path` to an error message, keeping its exit class.
pub fn at<T>(path: &Path, r: std::result::Result<T, impl Into<Failure>>) -> CliResult<T> {
    r.map_err(|e| match e.into() {
        Failure::Usage(m) => Failure::Usage(format!("{}: {m}", path.display())),
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
    })
}

pub fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} directory {} does not exist", path.display())))
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{what} file {} does not exist", path.display())))
    }
}

/// Parses a JSON config. Errors are usage failures naming the offending key.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    require_file(path, "config")?;
    let bytes = fs::read(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let where_ = if key == "." { String::new() } else { format!(" at key `{key}`") };
        Failure::usage(format!("{}: invalid config{where_}: {}", path.display(), e.inner()))
    })
}

/// Reads a JSON artifact written by an earlier command.
pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = at(path, fs::read(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    at(path, fs::write(path, bytes))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    at(path, fs::create_dir_all(path))
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in at(dir, fs::read_dir(dir))? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_classes(dir: &Path) -> CliResult<Option<Vec<String>>> {
    let p = dir.join(CLASSES_FILE);
    if p.is_file() {
        read_artifact(&p).map(Some)
    } else {
        Ok(None)
    }
}

pub fn write_classes(dir: &Path, names: &[String]) -> CliResult<()> {
    write_json(&dir.join(CLASSES_FILE), &names)
}

/// One file of an augmented directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub file: String,
    pub subject: String,
    /// `None` for the original tractogram.
    pub plane_index: Option<usize>,
}

/// A tractogram file: `.jsonl`, or `.trk` (unlabeled, subject = file stem).
pub fn read_tractogram(path: &Path, classes: Option<&[String]>) -> CliResult<Tractogram> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return at(path, read_jsonl_path(path, classes));
    }
    let bytes = at(path, fs::read(path))?;
    let file = at(path, decode_trk(&bytes))?;
    let t = file.tractogram;
    at(
        path,
        Tractogram::new(t.streamlines().to_vec(), stem(path), t.space_tag(), classes.map(<[String]>::to_vec).unwrap_or_default()),
    )
}

pub fn write_tractogram(t: &Tractogram, path: &Path) -> CliResult<()> {
    at(path, write_jsonl_path(t, path))
}

/// Tractograms keyed by file stem.
pub type Named = Vec<(String, Tractogram)>;

/// The named tractograms of a split directory. In an augmented directory
/// `originals_only` keeps only the uncut files.
pub fn read_split(dir: &Path, originals_only: bool) -> CliResult<(Option<Vec<String>>, Named)> {
    let classes = read_classes(dir)?;
    let index_path = dir.join(AUGMENT_INDEX_FILE);
    let files: Vec<PathBuf> = if index_path.is_file() {
        let index: Vec<IndexEntry> = read_artifact(&index_path)?;
        index
            .into_iter()
            .filter(|e| !originals_only || e.plane_index.is_none())
            .map(|e| dir.join(e.file))
            .collect()
    } else {
        list_files(dir, "jsonl")?
    };
    if files.is_empty() {
        return Err(Failure::usage(format!("{} holds no tractograms", dir.display())));
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let t = read_tractogram(&f, classes.as_deref())?;
        out.push((stem(&f), t));
    }
    Ok((classes, out))
}

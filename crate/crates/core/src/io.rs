//! Line-delimited JSON artifacts. Every file opens with a header record that
//! names its kind, format version, config hash and seed.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
/// Environment variable naming the default artifact root.
pub const OUTPUT_ENV: &str = "CLUSTER_ALLOC_OUT";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub record: String,
    pub kind: String,
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl Header {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            record: "header".into(),
            kind: kind.into(),
            format_version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            seed,
        }
    }
}

pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Creates (truncating) `path` and writes the header line.
    pub fn create(path: &Path, header: &Header) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = Self { out: BufWriter::new(File::create(path)?) };
        w.write(header)?;
        Ok(w)
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads a file written by [`JsonlWriter`], checking the header.
pub fn read_jsonl(path: &Path) -> Result<(Header, Vec<serde_json::Value>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.record != "header" || header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported header {first}", path.display())));
    }
    let records = lines
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    Ok((header, records))
}

/// `explicit`, else `$CLUSTER_ALLOC_OUT`, else `./runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

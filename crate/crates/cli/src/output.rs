//! Staged output directories and small CSV/JSON writers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tms_core::error::{Error, Result};

/// Output files are written into `<root>/.<name>.tmp` and moved to
/// `<root>/<name>` only when the command succeeds.
pub struct Stage {
    tmp: PathBuf,
    target: PathBuf,
}

impl Stage {
    pub fn new(root: &Path, name: &str) -> Result<Self> {
        let tmp = root.join(format!(".{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Self {
            tmp,
            target: root.join(name),
        })
    }

    pub fn create(&self, file: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.tmp.join(file))?))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, file: &str, value: &T) -> Result<()> {
        let mut w = self.create(file)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes rows of string cells under `header`.
    pub fn write_rows(&self, file: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.create(file)?);
        w.write_record(header).map_err(csv_error)?;
        for r in rows {
            w.write_record(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Replaces the previous results of the command with the staged files.
    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.tmp, &self.target)?;
        Ok(self.target)
    }

    pub fn abort(self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

pub fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Fixed-precision float formatting so that outputs are stable across runs.
pub fn num(v: f64) -> String {
    format!("{v:.10e}")
}

/// File name stem for a condition label.
pub fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value;

/// Prints one JSON record per line to stdout.
pub fn emit(record: &Value) {
    println!("{record}");
}

/// JSON-lines log mirrored to stdout.
pub struct JsonLog {
    file: File,
}

impl JsonLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening log {}", path.display()))?;
        Ok(JsonLog { file })
    }

    pub fn write(&mut self, record: &Value) -> Result<()> {
        emit(record);
        writeln!(self.file, "{record}").context("writing log")?;
        self.file.flush().context("writing log")
    }
}

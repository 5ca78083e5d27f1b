//! Run directory: every file goes through [`RunDir`], which records it for
//! the manifest written at the end of the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gsqg::fields::Field2D;
use serde::Serialize;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageEntry {
    pub name: String,
    pub seconds: f64,
    pub ok: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    status: &'a str,
    exit_code: i32,
    config: &'a BTreeMap<String, String>,
    wall_time_seconds: f64,
    stages: &'a [StageEntry],
    files: &'a [FileEntry],
}

pub struct RunDir {
    root: PathBuf,
    files: Vec<FileEntry>,
    stages: Vec<StageEntry>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new(), stages: Vec::new(), started: Instant::now() })
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.root.join(name), text)?;
        match self.files.iter_mut().find(|f| f.name == name) {
            Some(f) => f.bytes = text.len() as u64,
            None => self.files.push(FileEntry { name: name.to_string(), bytes: text.len() as u64 }),
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_field(&mut self, name: &str, field: &Field2D<f64>) -> Result<(), CliError> {
        self.write_text(name, &gsqg::io::field_to_string(field))
    }

    /// Runs `f` as a named stage, recording its duration.
    pub fn stage<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R, CliError>) -> Result<R, CliError> {
        let t = Instant::now();
        let out = f(self);
        self.stages.push(StageEntry { name: name.to_string(), seconds: t.elapsed().as_secs_f64(), ok: out.is_ok() });
        out
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn finish(
        self,
        config: &BTreeMap<String, String>,
        command: &str,
        result: &Result<(), CliError>,
    ) -> Result<(), CliError> {
        let (status, exit_code) = match result {
            Ok(()) => ("ok".to_string(), 0),
            Err(e) => (e.to_string(), e.exit_code()),
        };
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            status: &status,
            exit_code,
            config,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            stages: &self.stages,
            files: &self.files,
        };
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.root.join(MANIFEST))?;
        Ok(())
    }
}

/// Short decimal tag of an `eps` value used in file names.
pub fn eps_tag(eps: f64) -> String {
    format!("eps{eps}")
}

/// CSV with a header; cells are written as given.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// Full-precision cell text.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stic_core::config::RunConfig;

use crate::CliResult;

/// Records a run: command, seed, overrides, resolved config and files.
#[derive(Debug)]
pub struct Manifest {
    dir: PathBuf,
    header: Vec<(String, String)>,
    config: Option<RunConfig>,
    files: Vec<String>,
}

impl Manifest {
    pub fn new(dir: &Path, command: &str, seed: u64, overrides: &[String]) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let mut header = vec![
            ("command".to_string(), command.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        header.extend(
            overrides
                .iter()
                .map(|o| ("override".to_string(), o.clone())),
        );
        Ok(Manifest {
            dir: dir.to_path_buf(),
            header,
            config: None,
            files: Vec::new(),
        })
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn set_config(&mut self, config: &RunConfig) {
        self.config = Some(config.clone());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `bytes` under the output directory and records the file.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes)?;
        self.record(name);
        Ok(p)
    }

    /// Records a file some other writer already produced.
    pub fn record(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(c) = &self.config {
            for (k, v) in c.entries() {
                let _ = writeln!(out, "config.{k} = {v}");
            }
        }
        for f in &self.files {
            let _ = writeln!(out, "file = {f}");
        }
        out
    }

    pub fn finish(self) -> CliResult<()> {
        fs::write(self.dir.join("manifest.txt"), self.render())?;
        Ok(())
    }
}

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Environment variable overriding the default output root.
pub const OUT_ROOT_ENV: &str = "QUALNET_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "runs";

pub fn out_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from),
    }
}

/// A run directory `<root>/<YYYYmmdd-HHMMSS>-seed<N>[-k]` with a log file.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

impl RunDir {
    pub fn create(root: &Path, seed: u64) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{stamp}-seed{seed}");
        fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
        let mut path = root.join(&base);
        let mut k = 1;
        // create_dir fails on existing names, so concurrent runs cannot collide
        while let Err(e) = fs::create_dir(&path) {
            if e.kind() != std::io::ErrorKind::AlreadyExists {
                return Err(e).with_context(|| format!("creating run directory {}", path.display()));
            }
            path = root.join(format!("{base}-{k}"));
            k += 1;
        }
        let log_path = path.join("run.log");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        Ok(Self { path, log })
    }

    /// Prints a line and appends it to `run.log`.
    pub fn say(&mut self, line: impl AsRef<str>) {
        let line = line.as_ref();
        println!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

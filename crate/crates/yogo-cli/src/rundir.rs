//! Per-run artifact directories: `<root>/<timestamp>-seed<seed>[-k]`.
//! The root comes from `YOGO_RUN_DIR` (default `./runs`); reruns never
//! overwrite an existing directory.

use std::path::{Path, PathBuf};

use yogo_core::{Error, Result};

pub fn run_root() -> PathBuf {
    std::env::var_os("YOGO_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn create_run_dir(label: &str, seed: u64) -> Result<PathBuf> {
    let root = run_root();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{label}-seed{seed}");
    for k in 0..10_000u32 {
        let name = if k == 0 {
            base.clone()
        } else {
            format!("{base}-{k}")
        };
        let dir = root.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    Err(Error::config("could not allocate a unique run directory"))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

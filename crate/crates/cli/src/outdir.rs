use std::fs;
use std::path::{Path, PathBuf};

use crate::commands::CliError;

pub const HOME_VAR: &str = "DITTO_FORGE_HOME";

/// Root for timestamped run directories.
pub fn home() -> PathBuf {
    match std::env::var_os(HOME_VAR) {
        Some(h) if !h.is_empty() => PathBuf::from(h),
        _ => std::env::var_os("HOME")
            .map(|h| PathBuf::from(h).join(".ditto-forge"))
            .unwrap_or_else(|| PathBuf::from(".ditto-forge")),
    }
}

/// An explicit directory must be empty or absent. Otherwise a fresh
/// `<stamp>-<kind>` directory is created under `fallback` or the home runs
/// directory, so earlier outputs are never touched.
pub fn prepare(
    explicit: Option<&Path>,
    fallback: Option<&Path>,
    kind: &str,
) -> Result<PathBuf, CliError> {
    if let Some(dir) = explicit {
        if dir.exists() {
            let mut entries = fs::read_dir(dir)
                .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
            if entries.next().is_some() {
                return Err(CliError::usage(format!(
                    "refusing to write into non-empty directory {}",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
        return Ok(dir.to_owned());
    }
    let root = fallback
        .map(Path::to_owned)
        .unwrap_or_else(|| home().join("runs"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 {
            format!("{stamp}-{kind}")
        } else {
            format!("{stamp}-{kind}-{n}")
        };
        let dir = root.join(name);
        if !dir.exists() {
            fs::create_dir_all(&dir)
                .map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
            return Ok(dir);
        }
    }
    unreachable!("unbounded search")
}

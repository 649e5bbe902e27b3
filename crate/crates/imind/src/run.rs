//! Append-only run directories `<out>/<command>-<UTC timestamp>[-k]`.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const VERBATIM: &str = "config.txt";
pub const RESOLVED: &str = "config.resolved.txt";
pub const SUMMARY: &str = "summary.json";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates a fresh directory; never reuses an existing one.
    pub fn create(out: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}");
        for k in 0.. {
            let name = if k == 0 {
                base.clone()
            } else {
                format!("{base}-{k}")
            };
            let path = out.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!("unbounded suffix search")
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.join(name);
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, v: &Value) -> CliResult<PathBuf> {
        self.write(name, serde_json::to_string_pretty(v)? + "\n")
    }

    pub fn echo_config(&self, verbatim: &str, cfg: &RunConfig) -> CliResult<()> {
        self.write(VERBATIM, verbatim)?;
        self.write(RESOLVED, cfg.render())?;
        Ok(())
    }

    pub fn write_summary(
        &self,
        command: &str,
        cfg: &RunConfig,
        outcome: &CliResult<Value>,
    ) -> CliResult<()> {
        let config: Map<String, Value> = cfg
            .pairs()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        let mut s = json!({
            "command": command,
            "seed": cfg.seed,
            "config": config,
        });
        match outcome {
            Ok(results) => {
                s["status"] = "ok".into();
                s["exit_code"] = 0.into();
                s["results"] = results.clone();
            }
            Err(e) => {
                s["status"] = "error".into();
                s["exit_code"] = e.exit_code().into();
                s["error"] = e.to_string().into();
            }
        }
        self.write_json(SUMMARY, &s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_reuses_a_directory() {
        let out = tempfile::tempdir().unwrap();
        let a = RunDir::create(out.path(), "synth").unwrap();
        let b = RunDir::create(out.path(), "synth").unwrap();
        assert_ne!(a.path, b.path);
        assert!(a.path.is_dir() && b.path.is_dir());
        let name = a.path.file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with("synth-") && name.ends_with('Z'), "{name}");
    }
}

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub args: serde_json::Value,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, args: serde_json::Value, config: &RunConfig) -> Self {
        Self {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            args,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records a file, or every file under a directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let label = path.display().to_string();
        if path.is_dir() {
            for (rel, full) in files_under(path)? {
                self.inputs.push(FileDigest {
                    path: format!("{label}/{rel}"),
                    sha256: sha256_file(&full)?,
                });
            }
        } else {
            self.inputs.push(FileDigest {
                path: label,
                sha256: sha256_file(path)?,
            });
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Relative paths (with `/` separators) of all files below `root`, sorted.
pub fn files_under(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("below root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push((rel, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// An output directory built under `<out>.partial` and moved into place
/// only when the command succeeds.
pub struct Staging {
    target: PathBuf,
    partial: PathBuf,
    done: bool,
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && std::fs::read_dir(target)?.next().is_none();
            if !empty && !force {
                bail!("output directory {} already exists (use --force to replace it)", target.display());
            }
        }
        let mut name = target
            .file_name()
            .with_context(|| format!("invalid output path {}", target.display()))?
            .to_os_string();
        name.push(".partial");
        let partial = target.with_file_name(name);
        if partial.exists() {
            std::fs::remove_dir_all(&partial)?;
        }
        std::fs::create_dir_all(&partial).with_context(|| format!("creating {}", partial.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            partial,
            done: false,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.partial.join(rel)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Hashes the staged files into the manifest, writes it, and moves the
    /// directory into place.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<PathBuf> {
        manifest.outputs = files_under(&self.partial)?
            .into_iter()
            .map(|(rel, full)| Ok(FileDigest { path: rel, sha256: sha256_file(&full)? }))
            .collect::<Result<_>>()?;
        self.write_json("manifest.json", &manifest)?;
        if self.target.exists() {
            std::fs::remove_dir_all(&self.target)?;
        }
        std::fs::rename(&self.partial, &self.target)
            .with_context(|| format!("moving output into {}", self.target.display()))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.partial);
        }
    }
}

/// Formats a CSV field, quoting when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_staging_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        {
            let s = Staging::new(&out, false).unwrap();
            s.write("a.csv", "x\n").unwrap();
        }
        assert!(!out.exists());
        assert!(!dir.path().join("run.partial").exists());
    }

    #[test]
    fn finished_staging_hashes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let s = Staging::new(&out, false).unwrap();
        s.write("sub/b.csv", "b\n").unwrap();
        s.write("a.csv", "a\n").unwrap();
        s.finish(Manifest::new("test", Some(1), serde_json::json!({}), &RunConfig::default())).unwrap();
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        let paths: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
        assert_eq!(paths, ["a.csv", "sub/b.csv"]);
        assert!(Staging::new(&out, false).is_err());
        assert!(Staging::new(&out, true).is_ok());
    }
}

//! Run directories and manifests for reproducible experiments.
//!
//! Every command that produces artifacts owns a run directory whose
//! name is content-addressed from the resolved configuration digest and
//! the seed, so repeating a run can never silently overwrite a
//! different one. Each directory contains exactly one `manifest.txt`
//! recording the command, the fully resolved configuration snapshot,
//! and the relative path of every artifact file. A tree of runs can be
//! audited with [`orphan_scan`]: a file is an orphan unless some
//! manifest in the tree references it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::{Error, Result};

/// File name of the per-run manifest.
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Crate version recorded in manifests.
pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Content-addressed run directory name: command, truncated digest of
/// the resolved configuration, and seed.
pub fn run_dir_name(command: &str, resolved: &Config, seed: u64) -> String {
    let digest = resolved.digest();
    format!("{command}-{}-s{seed}", &digest[..12.min(digest.len())])
}

/// Record of one command invocation and the artifacts it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time_secs: f64,
    /// Artifact role (e.g. `checkpoint`, `history`) to path relative to
    /// the manifest's directory.
    artifacts: BTreeMap<String, String>,
    /// Fully resolved configuration snapshot (file values merged with
    /// command-line overrides).
    pub resolved: Config,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config_path: impl Into<String>, resolved: Config, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.into(),
            seed,
            tool_version: tool_version().to_string(),
            wall_time_secs: 0.0,
            artifacts: BTreeMap::new(),
            resolved,
        }
    }

    /// Registers an artifact by role and manifest-relative path.
    pub fn add_artifact(&mut self, role: impl Into<String>, rel_path: impl Into<String>) {
        self.artifacts.insert(role.into(), rel_path.into());
    }

    pub fn artifact(&self, role: &str) -> Option<&str> {
        self.artifacts.get(role).map(String::as_str)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = (&str, &str)> {
        self.artifacts.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "command {}", self.command).expect("string write");
        writeln!(out, "config_path {}", self.config_path).expect("string write");
        writeln!(out, "seed {}", self.seed).expect("string write");
        writeln!(out, "tool_version {}", self.tool_version).expect("string write");
        writeln!(out, "wall_time_secs {:?}", self.wall_time_secs).expect("string write");
        for (role, path) in &self.artifacts {
            writeln!(out, "artifact {role} {path}").expect("string write");
        }
        for line in self.resolved.to_text().lines() {
            writeln!(out, "config {line}").expect("string write");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = RunManifest::new("", "", Config::new(), 0);
        let mut config_lines = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (directive, rest) = raw.split_once(' ').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("malformed manifest line {raw:?}"),
            })?;
            match directive {
                "command" => manifest.command = rest.to_string(),
                "config_path" => manifest.config_path = rest.to_string(),
                "seed" => {
                    manifest.seed = rest.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad seed {rest:?}"),
                    })?;
                }
                "tool_version" => manifest.tool_version = rest.to_string(),
                "wall_time_secs" => {
                    manifest.wall_time_secs = rest.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad wall time {rest:?}"),
                    })?;
                }
                "artifact" => {
                    let (role, path) = rest.split_once(' ').ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("malformed artifact line {raw:?}"),
                    })?;
                    manifest.add_artifact(role, path);
                }
                "config" => {
                    config_lines.push_str(rest);
                    config_lines.push('\n');
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown manifest directive {other:?}"),
                    });
                }
            }
        }
        if manifest.command.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "manifest lacks a command line".into(),
            });
        }
        manifest.resolved = Config::parse(&config_lines)?;
        Ok(manifest)
    }

    /// Writes the manifest into its run directory.
    pub fn write(&self, run_dir: &Path) -> Result<()> {
        std::fs::write(run_dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }
}

/// Creates a fresh run directory under `root` for the given command,
/// resolved configuration, and seed. Fails if the directory already
/// contains a manifest — reruns must either reuse identical content or
/// pick a different seed/config, never overwrite.
pub fn create_run_dir(root: &Path, command: &str, resolved: &Config, seed: u64) -> Result<PathBuf> {
    let dir = root.join(run_dir_name(command, resolved, seed));
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Contract(format!(
            "run directory {} already holds a completed run; \
             remove it or change the config/seed",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Scans a run tree and returns every file not reachable from a
/// manifest. Manifest files themselves are always reachable. Artifact
/// paths are resolved relative to their manifest's directory, so nested
/// sweep trees are covered by their child manifests.
pub fn orphan_scan(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut manifests = Vec::new();
    walk(root, &mut files, &mut manifests)?;

    let mut reachable: BTreeSet<PathBuf> = BTreeSet::new();
    for manifest_path in &manifests {
        reachable.insert(canonical(manifest_path)?);
        let manifest = RunManifest::read(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(root);
        for (_, rel) in manifest.artifacts() {
            let target = dir.join(rel);
            if target.exists() {
                reachable.insert(canonical(&target)?);
            }
        }
    }

    let mut orphans = Vec::new();
    for file in files {
        if !reachable.contains(&canonical(&file)?) {
            orphans.push(file);
        }
    }
    Ok(orphans)
}

fn canonical(path: &Path) -> Result<PathBuf> {
    Ok(path.canonicalize()?)
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>, manifests: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            walk(&path, files, manifests)?;
        } else {
            if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                manifests.push(path.clone());
            }
            files.push(path);
        }
    }
    Ok(())
}

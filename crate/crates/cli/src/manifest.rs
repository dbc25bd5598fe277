//! Run manifests and output-directory locking.
//!
//! Every run emits exactly one manifest listing the command line, config
//! hash, content hashes of its inputs, seeds, every artifact path, wall
//! clock and exit status. A rerun whose command/config/input hashes match a
//! sibling manifest is flagged as a reproduction of it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Content hash of a directory: file names plus file hashes, name-sorted.
pub fn hash_dir(path: &Path) -> Result<String> {
    let mut entries = Vec::new();
    collect_files(path, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.strip_prefix(path).unwrap_or(&e).to_string_lossy().as_bytes());
        h.update(std::fs::read(&e)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn hash_input(path: &Path) -> Result<String> {
    if path.is_dir() {
        hash_dir(path)
    } else {
        hash_file(path)
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RunManifest {
    pub run_id: String,
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub exit_status: i32,
    pub deterministic: bool,
    /// run_id of an earlier sibling manifest with identical hashes.
    pub reproduction_of: Option<String>,
}

pub struct ManifestBuilder {
    started: Instant,
    command_line: Vec<String>,
    config_hash: String,
    input_hashes: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
    artifacts: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(config_hash: impl Into<String>) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            command_line: std::env::args().collect(),
            config_hash: config_hash.into(),
            input_hashes: BTreeMap::new(),
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn with_command(mut self, argv: &[String]) -> Self {
        self.command_line = argv.to_vec();
        self
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.input_hashes.insert(label.to_string(), hash_input(path)?);
        Ok(())
    }

    pub fn seed(&mut self, label: &str, value: u64) {
        self.seeds.insert(label.to_string(), value);
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_string_lossy().into_owned());
    }

    /// Finalize and write `<name>` into `dir`, scanning sibling manifests
    /// for reproductions.
    pub fn write(self, dir: &Path, name: &str, exit_status: i32) -> Result<RunManifest> {
        let mut m = RunManifest {
            run_id: String::new(),
            command_line: self.command_line,
            config_hash: self.config_hash,
            input_hashes: self.input_hashes,
            seeds: self.seeds,
            artifacts: self.artifacts,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            exit_status,
            deterministic: deterministic_mode(),
            reproduction_of: None,
        };
        let core = serde_json::to_vec(&(
            &m.command_line[1..],
            &m.config_hash,
            &m.input_hashes,
            &m.seeds,
        ))?;
        m.run_id = sha256_hex(&core)[..16].to_string();
        m.reproduction_of = find_reproduction(dir, &m)?;
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_vec_pretty(&m)?)?;
        Ok(m)
    }
}

fn find_reproduction(dir: &Path, m: &RunManifest) -> Result<Option<String>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut sibling_dirs: Vec<PathBuf> = vec![dir.to_path_buf()];
    if let Some(parent) = dir.parent() {
        if let Ok(rd) = std::fs::read_dir(parent) {
            for p in rd.flatten().map(|e| e.path()) {
                if p.is_dir() && p != dir {
                    sibling_dirs.push(p);
                }
            }
        }
    }
    for d in sibling_dirs {
        // other runs may create or remove siblings concurrently; skip
        // anything that vanishes mid-scan
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        for p in rd.flatten().map(|e| e.path()) {
            let is_manifest = p
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with("run_manifest.json"))
                .unwrap_or(false);
            if !is_manifest {
                continue;
            }
            let Ok(bytes) = std::fs::read(&p) else { continue };
            if let Ok(prev) = serde_json::from_slice::<RunManifest>(&bytes) {
                if prev.config_hash == m.config_hash
                    && prev.input_hashes == m.input_hashes
                    && prev.command_line.get(1..) == m.command_line.get(1..)
                {
                    return Ok(Some(prev.run_id));
                }
            }
        }
    }
    Ok(None)
}

pub fn deterministic_mode() -> bool {
    std::env::var("CNC_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

/// Exclusive lock on an output location; released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(target: &Path) -> Result<OutputLock> {
        let name = format!(
            ".{}.lock",
            target.file_name().and_then(|s| s.to_str()).unwrap_or("out")
        );
        let path = target.parent().unwrap_or_else(|| Path::new(".")).join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output {} is locked by another run (lock file {}); remove it if stale",
                    target.display(),
                    path.display()
                )
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Quarantined scratch directory; promoted to the final path on success.
pub struct StagedDir {
    tmp: PathBuf,
    target: PathBuf,
    promoted: bool,
}

impl StagedDir {
    pub fn begin(target: &Path) -> Result<StagedDir> {
        if target.exists() {
            bail!("output directory {} already exists", target.display());
        }
        let parent = target.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(
            ".cnc-tmp-{}-{}",
            std::process::id(),
            target.file_name().and_then(|s| s.to_str()).unwrap_or("out")
        ));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        Ok(StagedDir { tmp, target: target.to_path_buf(), promoted: false })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn promote(mut self) -> Result<PathBuf> {
        std::fs::rename(&self.tmp, &self.target)
            .with_context(|| format!("promoting staged output to {}", self.target.display()))?;
        self.promoted = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.promoted {
            // leave failed artifacts quarantined for inspection
            eprintln!("run failed; partial artifacts quarantined in {}", self.tmp.display());
        }
    }
}

pub mod config;
pub mod recipes;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{parse_config, ConfigError, RunConfig};
pub use recipes::{Check, RecipeError, REGISTRY};

pub const VERSION: &str = concat!("varfric ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error("output: {0}")]
    Io(#[from] io::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub recipe: String,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    /// canonical config text; `varfric run` on it reproduces every artifact
    pub config_text: String,
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl RunManifest {
    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// DIR/<recipe>/<timestamp>, with a numeric suffix if two runs share a stamp.
fn fresh_dir(out: &Path, recipe: &str, stamp: &str) -> io::Result<PathBuf> {
    let base = out.join(recipe);
    fs::create_dir_all(&base)?;
    let mut k = 0;
    loop {
        let name = if k == 0 { stamp.to_string() } else { format!("{stamp}-{k}") };
        match fs::create_dir(base.join(&name)) {
            Ok(()) => return Ok(base.join(name)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => k += 1,
            Err(e) => return Err(e),
        }
    }
}

/// Runs the recipe, writes its artifacts and `manifest.json`, and returns the
/// manifest together with the run directory.
pub fn run(cfg: &RunConfig) -> Result<(RunManifest, PathBuf), RunError> {
    let started = Utc::now();
    let recipe = cfg.recipe();
    let output = match cfg.workers {
        Some(k) => rayon::ThreadPoolBuilder::new().num_threads(k).build()?.install(|| (recipe.run)(cfg))?,
        None => (recipe.run)(cfg)?,
    };
    let finished = Utc::now();
    let dir = fresh_dir(&cfg.out, recipe.name, &started.format("%Y%m%dT%H%M%S%.3fZ").to_string())?;

    let results = serde_json::to_string_pretty(&output.results).expect("results serialise") + "\n";
    let mut artifacts = Vec::new();
    for (name, body) in output.files.iter().map(|(n, b)| (n.as_str(), b.as_str())).chain([("results.json", results.as_str())]) {
        fs::write(dir.join(name), body)?;
        artifacts.push(Artifact { file: name.to_string(), sha256: sha256_hex(body.as_bytes()), bytes: body.len() });
    }
    let passed = output.checks.iter().all(|c| c.passed);
    let manifest = RunManifest {
        recipe: recipe.name.to_string(),
        version: VERSION.to_string(),
        seed: cfg.seed,
        started: started.to_rfc3339_opts(SecondsFormat::Millis, true),
        finished: finished.to_rfc3339_opts(SecondsFormat::Millis, true),
        config_text: cfg.to_text(),
        config: cfg.clone(),
        artifacts,
        checks: output.checks,
        passed,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n")?;
    Ok((manifest, dir))
}

/// Re-hashes every listed artifact in `dir`.
pub fn verify_digests(manifest: &RunManifest, dir: &Path) -> io::Result<bool> {
    for a in &manifest.artifacts {
        if sha256_hex(&fs::read(dir.join(&a.file))?) != a.sha256 {
            return Ok(false);
        }
    }
    Ok(true)
}

//! Persisted cloud state: `manifest.json`, `registry.json` and one
//! `models/v{N}.bin` blob per version.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use rads_core::cloud::{ModelRegistry, TrainingManifest};
use rads_core::detector::ToyDetectorParams;

pub fn model_path(dir: &Path, version: u64) -> std::path::PathBuf {
    dir.join("models").join(format!("v{version}.bin"))
}

pub fn save(
    dir: &Path,
    manifest: &TrainingManifest,
    registry: &ModelRegistry,
    models: &BTreeMap<u64, ToyDetectorParams>,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("models")).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    std::fs::write(dir.join("registry.json"), serde_json::to_string_pretty(registry)? + "\n")?;
    for (v, p) in models {
        std::fs::write(model_path(dir, *v), p.to_blob())?;
    }
    Ok(())
}

pub fn load_registry(dir: &Path) -> Result<ModelRegistry> {
    let path = dir.join("registry.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_manifest(dir: &Path) -> Result<TrainingManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_model(dir: &Path, version: u64) -> Result<ToyDetectorParams> {
    let path = model_path(dir, version);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let params = ToyDetectorParams::from_blob(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    if params.version != version {
        return Err(anyhow!("{} holds version {}", path.display(), params.version));
    }
    Ok(params)
}

/// Every model in the registry, oldest first.
pub fn load_models(dir: &Path) -> Result<BTreeMap<u64, ToyDetectorParams>> {
    let registry = load_registry(dir)?;
    registry.versions.keys().map(|&v| Ok((v, load_model(dir, v)?))).collect()
}

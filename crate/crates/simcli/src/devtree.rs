//! Device artifact trees on disk.
//!
//! A device directory holds `manifest.txt` plus the artifacts it lists.
//! Tampering keeps the original bytes under `.pristine/` so `restore` can
//! put them back.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use devintegrity::measure::{DirProvider, Manifest};

use crate::scenario::{TamperKind, ARTIFACTS};
use crate::{Result, SimError};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PRISTINE_DIR: &str = ".pristine";

/// Creates a device tree with random artifacts.
pub fn init_device(dir: &Path, software_id: &str, seed: u64) -> Result<Manifest> {
    let manifest = Manifest::new(software_id, ARTIFACTS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in manifest.artifact_paths() {
        let target = dir.join(p);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut bytes = vec![0u8; rng.gen_range(64..512)];
        rng.fill(&mut bytes[..]);
        fs::write(target, bytes)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.render())?;
    Ok(manifest)
}

pub fn load_device(dir: &Path) -> Result<(Manifest, DirProvider)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|_| SimError::UnknownDevice(dir.display().to_string()))?;
    Ok((Manifest::parse(&text)?, DirProvider::new(dir)))
}

fn backup(dir: &Path, path: &str) -> Result<PathBuf> {
    let saved = dir.join(PRISTINE_DIR).join(path);
    if !saved.exists() {
        if let Some(parent) = saved.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(dir.join(path), &saved)?;
    }
    Ok(saved)
}

/// Applies one tamper action and returns a short acknowledgment.
pub fn tamper(dir: &Path, kind: TamperKind, seed: u64) -> Result<String> {
    let (manifest, _) = load_device(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if kind == TamperKind::Restore {
        let pristine = dir.join(PRISTINE_DIR);
        let mut restored = 0;
        for p in manifest.artifact_paths() {
            let saved = pristine.join(p);
            if saved.exists() {
                fs::copy(&saved, dir.join(p))?;
                restored += 1;
            }
        }
        if pristine.exists() {
            fs::remove_dir_all(&pristine)?;
        }
        return Ok(format!("restored {restored} artifact(s)"));
    }
    let present: Vec<&String> = manifest
        .artifact_paths()
        .iter()
        .filter(|p| dir.join(p).is_file())
        .collect();
    if present.is_empty() {
        return Ok("no artifacts left to tamper with".into());
    }
    let path = present[rng.gen_range(0..present.len())];
    backup(dir, path)?;
    let target = dir.join(path);
    match kind {
        TamperKind::DeleteArtifact => {
            fs::remove_file(&target)?;
            Ok(format!("deleted {path}"))
        }
        _ => {
            let mut bytes = fs::read(&target)?;
            if bytes.is_empty() {
                bytes.push(0);
            }
            let at = rng.gen_range(0..bytes.len());
            bytes[at] ^= 1 << rng.gen_range(0..8);
            fs::write(&target, bytes)?;
            Ok(format!("modified {path} at byte {at}"))
        }
    }
}

//! Measurement of monitored software and firmware.
//!
//! Every integrity comparison in the system is made between 32-byte SHA-256
//! digests. A [`Manifest`] names the artifacts that make up one piece of
//! software; [`measure_manifest`] hashes each artifact and folds the
//! per-artifact digests into a single composite in canonical path order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest as _, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;

/// Length of every digest handled by the system.
pub const DIGEST_LEN: usize = 32;

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; DIGEST_LEN]>::try_from(bytes).ok().map(Digest)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != DIGEST_LEN * 2 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; DIGEST_LEN];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(pair, 16).ok()?;
        }
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl AsRef<[u8]> for Digest {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// SHA-256 of `content`.
pub fn hash_bytes(content: &[u8]) -> Digest {
    Digest(Sha256::digest(content).into())
}

/// SHA-256 over the concatenation of `parts`, without allocating the
/// concatenation.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Match,
    Mismatch,
}

impl Verdict {
    pub fn is_match(self) -> bool {
        self == Verdict::Match
    }
}

/// Constant-time equality of two digests.
pub fn compare(a: &Digest, b: &Digest) -> Verdict {
    if bool::from(a.0.ct_eq(&b.0)) {
        Verdict::Match
    } else {
        Verdict::Mismatch
    }
}

/// Digest substituted for a monitored artifact that could not be read.
///
/// Deleting a file must never make a measurement look clean, so the applet
/// reports this value as its current hash instead of skipping the scan.
pub fn missing_artifact_digest(path: &str) -> Digest {
    hash_parts([b"missing-artifact\0".as_slice(), path.as_bytes()])
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeasureError {
    #[error("invalid software id {0:?}")]
    InvalidSoftwareId(String),
    #[error("invalid artifact path {0:?}")]
    InvalidPath(String),
    #[error("duplicate artifact path {0:?}")]
    DuplicatePath(String),
    #[error("missing artifact {0:?}")]
    MissingArtifact(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("malformed measurement report: {0}")]
    MalformedReport(String),
}

pub const MAX_SOFTWARE_ID_LEN: usize = 64;

pub fn validate_software_id(id: &str) -> Result<(), MeasureError> {
    let ok = !id.is_empty()
        && id.len() <= MAX_SOFTWARE_ID_LEN
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(MeasureError::InvalidSoftwareId(id.to_owned()))
    }
}

/// Normalizes a relative artifact path: forward slashes, no empty or `.`
/// components. Absolute paths and `..` are rejected.
pub fn normalize_path(raw: &str) -> Result<String, MeasureError> {
    let unified = raw.trim().replace('\\', "/");
    if unified.starts_with('/') {
        return Err(MeasureError::InvalidPath(raw.to_owned()));
    }
    let mut parts = Vec::new();
    for comp in unified.split('/') {
        match comp {
            "" | "." => continue,
            ".." => return Err(MeasureError::InvalidPath(raw.to_owned())),
            c => parts.push(c),
        }
    }
    if parts.is_empty() {
        return Err(MeasureError::InvalidPath(raw.to_owned()));
    }
    Ok(parts.join("/"))
}

/// The set of artifacts measured for one software id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    software_id: String,
    artifact_paths: Vec<String>,
}

impl Manifest {
    /// Builds a manifest, normalizing and sorting paths. Input order does not
    /// matter; duplicates (after normalization) are rejected.
    pub fn new<I, S>(software_id: &str, paths: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        validate_software_id(software_id)?;
        let mut artifact_paths = paths
            .into_iter()
            .map(|p| normalize_path(p.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        artifact_paths.sort();
        if let Some(w) = artifact_paths.windows(2).find(|w| w[0] == w[1]) {
            return Err(MeasureError::DuplicatePath(w[0].clone()));
        }
        Ok(Manifest {
            software_id: software_id.to_owned(),
            artifact_paths,
        })
    }

    pub fn software_id(&self) -> &str {
        &self.software_id
    }

    pub fn artifact_paths(&self) -> &[String] {
        &self.artifact_paths
    }

    /// Parses the text manifest format:
    ///
    /// ```text
    /// software_id: robot-fw
    /// bin/controller
    /// etc/config.toml
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, MeasureError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| MeasureError::MalformedManifest("empty manifest".into()))?;
        let id = header
            .strip_prefix("software_id:")
            .ok_or_else(|| MeasureError::MalformedManifest("missing software_id header".into()))?
            .trim();
        Manifest::new(id, lines)
    }

    pub fn render(&self) -> String {
        let mut out = format!("software_id: {}\n", self.software_id);
        for p in &self.artifact_paths {
            out.push_str(p);
            out.push('\n');
        }
        out
    }
}

/// Source of artifact bytes, keyed by normalized path.
pub trait FileProvider {
    /// Returns `None` if the artifact does not exist.
    fn read(&self, path: &str) -> Option<Vec<u8>>;
}

impl FileProvider for BTreeMap<String, Vec<u8>> {
    fn read(&self, path: &str) -> Option<Vec<u8>> {
        self.get(path).cloned()
    }
}

impl<F: FileProvider + ?Sized> FileProvider for &F {
    fn read(&self, path: &str) -> Option<Vec<u8>> {
        (**self).read(path)
    }
}

/// Reads artifacts relative to a directory on disk.
#[derive(Debug, Clone)]
pub struct DirProvider {
    root: PathBuf,
}

impl DirProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirProvider { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl FileProvider for DirProvider {
    fn read(&self, path: &str) -> Option<Vec<u8>> {
        std::fs::read(self.root.join(path)).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementReport {
    pub software_id: String,
    pub per_artifact: Vec<(String, Digest)>,
    pub composite: Digest,
    pub measured_at: u64,
}

/// Composite digest: SHA-256 over the per-artifact digests concatenated in
/// canonical order.
pub fn composite_of<'a>(digests: impl IntoIterator<Item = &'a Digest>) -> Digest {
    hash_parts(digests.into_iter().map(|d| d.as_bytes().as_slice()))
}

/// Hashes every artifact in `manifest` and folds them into a composite.
///
/// A missing artifact is reported as [`MeasureError::MissingArtifact`];
/// callers treat it as an integrity anomaly.
pub fn measure_manifest(
    manifest: &Manifest,
    files: &impl FileProvider,
    measured_at: u64,
) -> Result<MeasurementReport, MeasureError> {
    let per_artifact = manifest
        .artifact_paths
        .iter()
        .map(|p| {
            files
                .read(p)
                .map(|bytes| (p.clone(), hash_bytes(&bytes)))
                .ok_or_else(|| MeasureError::MissingArtifact(p.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let composite = composite_of(per_artifact.iter().map(|(_, d)| d));
    Ok(MeasurementReport {
        software_id: manifest.software_id.clone(),
        per_artifact,
        composite,
        measured_at,
    })
}

impl MeasurementReport {
    /// Binary form carried in PROVISION_MEASUREMENT frames:
    /// `[u8 id_len][id][u64 measured_at][u32 count]{[u16 path_len][path][32 digest]}*[32 composite]`,
    /// all integers big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.per_artifact.len() * 64);
        out.push(self.software_id.len() as u8);
        out.extend_from_slice(self.software_id.as_bytes());
        out.extend_from_slice(&self.measured_at.to_be_bytes());
        out.extend_from_slice(&(self.per_artifact.len() as u32).to_be_bytes());
        for (path, digest) in &self.per_artifact {
            out.extend_from_slice(&(path.len() as u16).to_be_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(digest.as_bytes());
        }
        out.extend_from_slice(self.composite.as_bytes());
        out
    }

    /// Decodes and re-validates a report; the composite must match the
    /// per-artifact digests.
    pub fn decode(bytes: &[u8]) -> Result<Self, MeasureError> {
        let bad = |m: &str| MeasureError::MalformedReport(m.to_owned());
        let mut cur = crate::wire::Cursor::new(bytes);
        let id_len = cur.u8().map_err(|_| bad("truncated"))? as usize;
        let id = cur.take(id_len).map_err(|_| bad("truncated"))?;
        let software_id =
            String::from_utf8(id.to_vec()).map_err(|_| bad("software id is not utf-8"))?;
        validate_software_id(&software_id)?;
        let measured_at = cur.u64().map_err(|_| bad("truncated"))?;
        let count = cur.u32().map_err(|_| bad("truncated"))? as usize;
        // each artifact needs at least 2 + 1 + 32 bytes
        if count > cur.remaining() / 35 {
            return Err(bad("artifact count exceeds payload"));
        }
        let mut per_artifact = Vec::with_capacity(count);
        for _ in 0..count {
            let plen = cur.u16().map_err(|_| bad("truncated"))? as usize;
            let p = cur.take(plen).map_err(|_| bad("truncated"))?;
            let path = String::from_utf8(p.to_vec()).map_err(|_| bad("path is not utf-8"))?;
            let digest = cur.digest().map_err(|_| bad("truncated"))?;
            per_artifact.push((path, digest));
        }
        let composite = cur.digest().map_err(|_| bad("truncated"))?;
        if cur.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        if !per_artifact.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(bad("artifacts not in canonical order"));
        }
        if composite_of(per_artifact.iter().map(|(_, d)| d)) != composite {
            return Err(bad("composite does not match artifact digests"));
        }
        Ok(MeasurementReport {
            software_id,
            per_artifact,
            composite,
            measured_at,
        })
    }
}

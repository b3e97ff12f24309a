//! Tamper-evident append-only record store.
//!
//! Every record is hashed and folded into a running hash chain:
//!
//! ```text
//! record_hash[i] = H(canonical(record[i]))
//! chain_hash[i]  = H(chain_hash[i-1] || record_hash[i])    chain_hash[-1] = 0^32
//! ```
//!
//! On disk the store is a single file:
//!
//! ```text
//! "DIMS" 0x01
//! { [u32 BE len][canonical record, len bytes][chain_hash 32] }*
//! ```
//!
//! The file can be re-verified without any other state with [`audit_bytes`].

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::measure::{hash_bytes, hash_parts, Digest};
use crate::wire::Cursor;

pub const MAGIC: &[u8; 4] = b"DIMS";
pub const FORMAT_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 5;
pub const GENESIS: Digest = Digest::ZERO;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("key not found")]
    NotFound,
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
    #[error("store file is corrupt at entry {0}")]
    Corrupt(u64),
}

/// `<key, value, timestamp>`; for benchmarks the key is the software id and
/// the value a 32-byte digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Record {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub timestamp: u64,
}

impl Record {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>, timestamp: u64) -> Self {
        Record {
            key: key.into(),
            value: value.into(),
            timestamp,
        }
    }

    /// `[u32 key_len][key][u32 value_len][value][u64 timestamp]`, big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.key.len() + self.value.len());
        out.extend_from_slice(&(self.key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&(self.value.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.value);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Record> {
        let mut cur = Cursor::new(bytes);
        let klen = cur.u32().ok()? as usize;
        let key = cur.take(klen).ok()?.to_vec();
        let vlen = cur.u32().ok()? as usize;
        let value = cur.take(vlen).ok()?.to_vec();
        let timestamp = cur.u64().ok()?;
        cur.finish().ok()?;
        let record = Record {
            key,
            value,
            timestamp,
        };
        record.validate().ok()?;
        Some(record)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.key.is_empty() {
            return Err(StoreError::InvalidRecord("empty key"));
        }
        if self.key.len() > u32::MAX as usize || self.value.len() > u32::MAX as usize {
            return Err(StoreError::InvalidRecord("field too large"));
        }
        Ok(())
    }

    pub fn hash(&self) -> Digest {
        hash_bytes(&self.encode())
    }
}

/// One link of the chain rule.
pub fn chain_step(prev_chain_hash: &Digest, record_hash: &Digest) -> Digest {
    hash_parts([prev_chain_hash.as_bytes().as_slice(), record_hash.as_bytes()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainEntry {
    pub index: u64,
    pub record_hash: Digest,
    pub chain_hash: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RootDigest {
    pub head_index: u64,
    pub head_chain_hash: Digest,
}

/// Evidence that a record sits at `index` under a given root.
///
/// `prev_chain_hash` is the chain hash of entry `index - 1` (the genesis
/// constant for index 0); the chain rule is replayed from it through
/// `record_hash` and every later record hash up to the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusionProof {
    pub index: u64,
    pub prev_chain_hash: Digest,
    pub record_hash: Digest,
    pub suffix: Vec<Digest>,
    pub head_chain_hash: Digest,
}

impl InclusionProof {
    fn replay(&self) -> Digest {
        let first = chain_step(&self.prev_chain_hash, &self.record_hash);
        self.suffix.iter().fold(first, |acc, rh| chain_step(&acc, rh))
    }
}

/// True iff replaying the proof lands exactly on `root`.
pub fn verify_proof(proof: &InclusionProof, root: &RootDigest) -> bool {
    proof.index.checked_add(proof.suffix.len() as u64) == Some(root.head_index)
        && proof.head_chain_hash == root.head_chain_hash
        && proof.replay() == root.head_chain_hash
}

/// [`verify_proof`] plus a check that the proof is about `record`.
pub fn verify_inclusion(record: &Record, proof: &InclusionProof, root: &RootDigest) -> bool {
    record.hash() == proof.record_hash && verify_proof(proof, root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    /// `fsync` after every append.
    Fsync,
    /// Leave flushing to the OS; call [`Store::sync`] explicitly.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditVerdict {
    Ok { entries: u64 },
    /// First entry whose bytes or chain hash do not check out. Header damage
    /// is reported as index 0.
    Corruption { index: u64 },
    /// The file re-verifies on its own but disagrees with the in-memory head
    /// (for example a whole trailing entry was cut off).
    HeadMismatch { expected: Option<RootDigest>, found: Option<RootDigest> },
}

impl AuditVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, AuditVerdict::Ok { .. })
    }
}

struct Walk {
    records: Vec<Record>,
    chain: Vec<ChainEntry>,
}

fn walk(bytes: &[u8]) -> Result<Walk, u64> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC || bytes[4] != FORMAT_VERSION {
        return Err(0);
    }
    let mut cur = Cursor::new(&bytes[HEADER_LEN..]);
    let mut records = Vec::new();
    let mut chain: Vec<ChainEntry> = Vec::new();
    let mut prev = GENESIS;
    while cur.remaining() > 0 {
        let index = chain.len() as u64;
        let len = cur.u32().map_err(|_| index)? as usize;
        let body = cur.take(len).map_err(|_| index)?;
        let stored = cur.digest().map_err(|_| index)?;
        let record = Record::decode(body).ok_or(index)?;
        let record_hash = hash_bytes(body);
        let chain_hash = chain_step(&prev, &record_hash);
        if chain_hash != stored {
            return Err(index);
        }
        prev = chain_hash;
        records.push(record);
        chain.push(ChainEntry {
            index,
            record_hash,
            chain_hash,
        });
    }
    Ok(Walk { records, chain })
}

/// Re-verifies a complete store image.
pub fn audit_bytes(bytes: &[u8]) -> AuditVerdict {
    match walk(bytes) {
        Ok(w) => AuditVerdict::Ok {
            entries: w.chain.len() as u64,
        },
        Err(index) => AuditVerdict::Corruption { index },
    }
}

pub fn audit_file(path: &Path) -> io::Result<AuditVerdict> {
    Ok(audit_bytes(&std::fs::read(path)?))
}

fn header() -> Vec<u8> {
    let mut h = MAGIC.to_vec();
    h.push(FORMAT_VERSION);
    h
}

enum Backend {
    File { file: File, path: PathBuf },
    Memory(Vec<u8>),
}

/// Append-only verifiable store. Appends take `&mut self`; share behind a
/// lock for concurrent readers.
pub struct Store {
    backend: Backend,
    durability: Durability,
    records: Vec<Record>,
    chain: Vec<ChainEntry>,
    by_key: HashMap<Vec<u8>, Vec<usize>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("entries", &self.records.len())
            .field("durability", &self.durability)
            .finish()
    }
}

impl Store {
    /// Store held entirely in memory; the byte image follows the file format.
    pub fn in_memory() -> Self {
        Store {
            backend: Backend::Memory(header()),
            durability: Durability::Batch,
            records: Vec::new(),
            chain: Vec::new(),
            by_key: HashMap::new(),
        }
    }

    /// Opens `path`, creating it if absent. Existing contents are fully
    /// re-verified; a corrupt file is refused.
    pub fn open(path: impl AsRef<Path>, durability: Durability) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let existing = std::fs::read(&path)?;
        let mut store = Store {
            backend: Backend::Memory(Vec::new()),
            durability,
            records: Vec::new(),
            chain: Vec::new(),
            by_key: HashMap::new(),
        };
        if existing.is_empty() {
            file.write_all(&header())?;
            file.sync_all()?;
        } else {
            let w = walk(&existing).map_err(StoreError::Corrupt)?;
            for (i, r) in w.records.iter().enumerate() {
                store.by_key.entry(r.key.clone()).or_default().push(i);
            }
            store.records = w.records;
            store.chain = w.chain;
        }
        store.backend = Backend::File { file, path };
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File { path, .. } => Some(path),
            Backend::Memory(_) => None,
        }
    }

    pub fn durability(&self) -> Durability {
        self.durability
    }

    pub fn set_durability(&mut self, durability: Durability) {
        self.durability = durability;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> Option<RootDigest> {
        self.chain.last().map(|e| RootDigest {
            head_index: e.index,
            head_chain_hash: e.chain_hash,
        })
    }

    pub fn chain(&self) -> &[ChainEntry] {
        &self.chain
    }

    pub fn record(&self, index: u64) -> Option<&Record> {
        self.records.get(index as usize)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Appends a record; durable before returning when the store runs in
    /// [`Durability::Fsync`] mode.
    pub fn append(&mut self, record: Record) -> Result<(u64, RootDigest), StoreError> {
        record.validate()?;
        let body = record.encode();
        let record_hash = hash_bytes(&body);
        let prev = self.chain.last().map_or(GENESIS, |e| e.chain_hash);
        let chain_hash = chain_step(&prev, &record_hash);

        let mut entry = Vec::with_capacity(4 + body.len() + 32);
        entry.extend_from_slice(&(body.len() as u32).to_be_bytes());
        entry.extend_from_slice(&body);
        entry.extend_from_slice(chain_hash.as_bytes());
        match &mut self.backend {
            Backend::File { file, .. } => {
                file.write_all(&entry)?;
                if self.durability == Durability::Fsync {
                    file.sync_data()?;
                }
            }
            Backend::Memory(buf) => buf.extend_from_slice(&entry),
        }

        let index = self.chain.len() as u64;
        self.chain.push(ChainEntry {
            index,
            record_hash,
            chain_hash,
        });
        self.by_key
            .entry(record.key.clone())
            .or_default()
            .push(index as usize);
        self.records.push(record);
        Ok((
            index,
            RootDigest {
                head_index: index,
                head_chain_hash: chain_hash,
            },
        ))
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        if let Backend::File { file, .. } = &mut self.backend {
            file.sync_data()?;
        }
        Ok(())
    }

    /// Proof for the entry at `index` against the current head.
    pub fn prove(&self, index: u64) -> Option<InclusionProof> {
        let i = index as usize;
        let entry = self.chain.get(i)?;
        let prev_chain_hash = if i == 0 {
            GENESIS
        } else {
            self.chain[i - 1].chain_hash
        };
        Some(InclusionProof {
            index,
            prev_chain_hash,
            record_hash: entry.record_hash,
            suffix: self.chain[i + 1..].iter().map(|e| e.record_hash).collect(),
            head_chain_hash: self.chain.last()?.chain_hash,
        })
    }

    /// Highest-index record for `key` with a proof against the current root.
    pub fn get_latest(&self, key: &[u8]) -> Result<(Record, InclusionProof), StoreError> {
        let &i = self
            .by_key
            .get(key)
            .and_then(|v| v.last())
            .ok_or(StoreError::NotFound)?;
        let proof = self.prove(i as u64).expect("indexed entry exists");
        Ok((self.records[i].clone(), proof))
    }

    pub fn latest_value(&self, key: &[u8]) -> Option<&[u8]> {
        let &i = self.by_key.get(key)?.last()?;
        Some(&self.records[i].value)
    }

    /// All records for `key`, oldest first.
    pub fn history(&self, key: &[u8]) -> Vec<Record> {
        self.by_key
            .get(key)
            .map(|ix| ix.iter().map(|&i| self.records[i].clone()).collect())
            .unwrap_or_default()
    }

    pub fn count_key(&self, key: &[u8]) -> usize {
        self.by_key.get(key).map_or(0, Vec::len)
    }

    pub fn keys(&self) -> impl Iterator<Item = &[u8]> {
        self.by_key.keys().map(Vec::as_slice)
    }

    /// The persisted byte image (re-read from disk for file-backed stores).
    pub fn persisted_bytes(&self) -> io::Result<Vec<u8>> {
        match &self.backend {
            Backend::File { path, .. } => std::fs::read(path),
            Backend::Memory(buf) => Ok(buf.clone()),
        }
    }

    /// Re-walks the persisted bytes and checks them against the head this
    /// handle holds in memory.
    pub fn audit_chain(&self) -> Result<AuditVerdict, StoreError> {
        let bytes = self.persisted_bytes()?;
        Ok(match walk(&bytes) {
            Err(index) => AuditVerdict::Corruption { index },
            Ok(w) => {
                let found = w.chain.last().map(|e| RootDigest {
                    head_index: e.index,
                    head_chain_hash: e.chain_hash,
                });
                if found == self.root() {
                    AuditVerdict::Ok {
                        entries: w.chain.len() as u64,
                    }
                } else {
                    AuditVerdict::HeadMismatch {
                        expected: self.root(),
                        found,
                    }
                }
            }
        })
    }

    #[cfg(test)]
    pub(crate) fn memory_image_mut(&mut self) -> &mut Vec<u8> {
        match &mut self.backend {
            Backend::Memory(buf) => buf,
            Backend::File { .. } => panic!("file-backed store"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(key: &str, value: &[u8], ts: u64) -> Record {
        Record::new(key.as_bytes(), value, ts)
    }

    #[test]
    fn genesis_and_growth() {
        let mut s = Store::in_memory();
        assert_eq!(s.root(), None);
        let (i0, r0) = s.append(rec("fw", b"v1", 1)).unwrap();
        let (i1, r1) = s.append(rec("fw", b"v2", 2)).unwrap();
        assert_eq!((i0, i1), (0, 1));
        assert_ne!(r0, r1);
        assert_eq!(r0.head_chain_hash, chain_step(&GENESIS, &rec("fw", b"v1", 1).hash()));
    }

    #[test]
    fn empty_key_rejected() {
        let mut s = Store::in_memory();
        assert!(matches!(
            s.append(rec("", b"v", 1)),
            Err(StoreError::InvalidRecord(_))
        ));
        assert!(s.is_empty());
    }

    #[test]
    fn latest_history_and_proofs() {
        let mut s = Store::in_memory();
        for i in 0..10u64 {
            let key = if i == 2 || i == 7 { "a" } else { "b" };
            s.append(rec(key, &i.to_be_bytes(), i)).unwrap();
        }
        let (r, proof) = s.get_latest(b"a").unwrap();
        assert_eq!(proof.index, 7);
        assert_eq!(r.timestamp, 7);
        let root = s.root().unwrap();
        assert!(verify_inclusion(&r, &proof, &root));
        assert_eq!(s.history(b"a").len(), 2);
        assert_eq!(s.history(b"a").last(), Some(&r));
        assert!(s.history(b"zz").is_empty());
        assert!(matches!(s.get_latest(b"zz"), Err(StoreError::NotFound)));

        let mut forged = proof.clone();
        forged.suffix[0] = hash_bytes(b"forged");
        assert!(!verify_proof(&forged, &root));

        s.append(rec("c", b"later", 11)).unwrap();
        let newer = s.root().unwrap();
        assert!(!verify_proof(&proof, &newer));
        assert!(verify_proof(&s.get_latest(b"a").unwrap().1, &newer));
        // a newer proof does not verify against the older root either
        assert!(!verify_proof(&s.get_latest(b"a").unwrap().1, &root));
    }

    #[test]
    fn audit_detects_memory_image_damage() {
        let mut s = Store::in_memory();
        for i in 0..5u64 {
            s.append(rec("k", &[i as u8; 32], i)).unwrap();
        }
        assert_eq!(s.audit_chain().unwrap(), AuditVerdict::Ok { entries: 5 });
        let at = HEADER_LEN + 10;
        s.memory_image_mut()[at] ^= 1;
        assert_eq!(
            s.audit_chain().unwrap(),
            AuditVerdict::Corruption { index: 0 }
        );
    }

    #[test]
    fn header_damage_is_index_zero() {
        let mut img = header();
        img[0] = b'X';
        assert_eq!(audit_bytes(&img), AuditVerdict::Corruption { index: 0 });
        assert_eq!(audit_bytes(&header()), AuditVerdict::Ok { entries: 0 });
        assert_eq!(audit_bytes(&[]), AuditVerdict::Corruption { index: 0 });
    }

    #[test]
    fn file_store_reopens_and_refuses_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.dims");
        {
            let mut s = Store::open(&path, Durability::Fsync).unwrap();
            s.append(rec("fw", b"v1", 1)).unwrap();
            s.append(rec("fw", b"v2", 2)).unwrap();
        }
        let s = Store::open(&path, Durability::Batch).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.latest_value(b"fw"), Some(b"v2".as_slice()));
        drop(s);

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Store::open(&path, Durability::Batch),
            Err(StoreError::Corrupt(1))
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.dims");
        let mut s = Store::open(&path, Durability::Batch).unwrap();
        for i in 0..3u64 {
            s.append(rec("fw", &[1; 32], i)).unwrap();
        }
        let bytes = std::fs::read(&path).unwrap();
        let entry_len = 4 + rec("fw", &[1; 32], 0).encode().len() + 32;
        // cut a whole entry: the file alone still verifies, the head does not
        std::fs::write(&path, &bytes[..bytes.len() - entry_len]).unwrap();
        assert!(matches!(
            s.audit_chain().unwrap(),
            AuditVerdict::HeadMismatch { .. }
        ));
        // cut mid-entry: structural corruption
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert_eq!(
            s.audit_chain().unwrap(),
            AuditVerdict::Corruption { index: 2 }
        );
    }

    #[test]
    fn record_codec_is_injective_on_boundaries() {
        let a = rec("ab", b"c", 0);
        let b = rec("a", b"bc", 0);
        assert_ne!(a.encode(), b.encode());
        assert_eq!(Record::decode(&a.encode()), Some(a));
        assert_eq!(Record::decode(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]), None);
    }
}

//! Minimal permissioned ledger.
//!
//! A fixed consortium of participants admits contract records (benchmark
//! registrations, SLA references, software-update executions) one block at a
//! time. A block is accepted when at least ⌈2n/3⌉ of the n registered
//! participants have signed its body with Ed25519. Blocks are hash-linked and
//! persisted with the same framing as the record store:
//!
//! ```text
//! "DIMP" 0x01 [u16 n]{[u8 id_len][id][role][pubkey 32]}* [H(header) 32]
//! { [u32 BE len][block, len bytes][block_hash 32] }*
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ring::signature::{Ed25519KeyPair, KeyPair, UnparsedPublicKey, ED25519};
use thiserror::Error;

use crate::measure::{hash_bytes, validate_software_id, Digest};
use crate::wire::Cursor;

pub const MAGIC: &[u8; 4] = b"DIMP";
pub const FORMAT_VERSION: u8 = 0x01;
pub const SIGNATURE_LEN: usize = 64;
pub const PUBLIC_KEY_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum PdlError {
    #[error("signer {0:?} is not a registered participant")]
    UnknownSigner(String),
    #[error("participant {0:?} is not registered")]
    UnknownParticipant(String),
    #[error("signature by {0:?} does not verify")]
    BadSignature(String),
    #[error("quorum not met: {have} of {need} required signatures")]
    QuorumNotMet { have: usize, need: usize },
    #[error("confirmation receipt missing or invalid")]
    BadConfirmation,
    #[error("participant {id:?} has role {actual:?}, expected {expected:?}")]
    WrongRole {
        id: String,
        actual: Role,
        expected: Role,
    },
    #[error("invalid participant set: {0}")]
    InvalidParticipants(&'static str),
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
    #[error("no contract found")]
    NotFound,
    #[error("ledger file is corrupt: {0}")]
    Corrupt(LedgerVerdict),
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Role {
    SolutionProvider = 1,
    DeviceVendor = 2,
    ServiceProvider = 3,
}

impl TryFrom<u8> for Role {
    type Error = ();

    fn try_from(b: u8) -> Result<Self, ()> {
        match b {
            1 => Ok(Role::SolutionProvider),
            2 => Ok(Role::DeviceVendor),
            3 => Ok(Role::ServiceProvider),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Participant {
    pub id: String,
    pub role: Role,
    pub public_key: [u8; PUBLIC_KEY_LEN],
}

impl Participant {
    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        UnparsedPublicKey::new(&ED25519, &self.public_key)
            .verify(message, signature)
            .is_ok()
    }
}

/// A participant's private signing key.
pub struct Signer {
    id: String,
    role: Role,
    key: Ed25519KeyPair,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer")
            .field("id", &self.id)
            .field("role", &self.role)
            .finish_non_exhaustive()
    }
}

impl Signer {
    /// Deterministic key from a 32-byte seed.
    pub fn from_seed(id: &str, role: Role, seed: &[u8; 32]) -> Self {
        let key = Ed25519KeyPair::from_seed_unchecked(seed).expect("any 32-byte seed is valid");
        Signer {
            id: id.to_owned(),
            role,
            key,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn participant(&self) -> Participant {
        let mut public_key = [0u8; PUBLIC_KEY_LEN];
        public_key.copy_from_slice(self.key.public_key().as_ref());
        Participant {
            id: self.id.clone(),
            role: self.role,
            public_key,
        }
    }

    pub fn sign(&self, message: &[u8]) -> [u8; SIGNATURE_LEN] {
        let mut sig = [0u8; SIGNATURE_LEN];
        sig.copy_from_slice(self.key.sign(message).as_ref());
        sig
    }

    pub fn endorse(&self, message: &[u8]) -> Endorsement {
        Endorsement {
            signer: self.id.clone(),
            signature: self.sign(message),
        }
    }

    /// Solution-provider confirmation that `digest` is the agreed hash for
    /// `software_id`.
    pub fn confirm(&self, software_id: &str, digest: &Digest) -> Receipt {
        Receipt {
            provider: self.id.clone(),
            digest: *digest,
            signature: self.sign(&receipt_message(software_id, digest)),
        }
    }
}

/// `(participant id, signature over a block body)`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsement {
    pub signer: String,
    pub signature: [u8; SIGNATURE_LEN],
}

/// Confirmation receipt issued by a solution provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub provider: String,
    pub digest: Digest,
    pub signature: [u8; SIGNATURE_LEN],
}

/// Bytes a solution provider signs to confirm an update hash.
pub fn receipt_message(software_id: &str, digest: &Digest) -> Vec<u8> {
    let mut m = b"update-confirmation\0".to_vec();
    m.push(software_id.len() as u8);
    m.extend_from_slice(software_id.as_bytes());
    m.extend_from_slice(digest.as_bytes());
    m
}

impl Receipt {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.provider.len() as u8];
        out.extend_from_slice(self.provider.as_bytes());
        out.extend_from_slice(self.digest.as_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub(crate) fn read(cur: &mut Cursor<'_>) -> Option<Receipt> {
        let provider = read_str(cur)?;
        let digest = cur.digest().ok()?;
        let signature = cur.take(SIGNATURE_LEN).ok()?.try_into().ok()?;
        Some(Receipt {
            provider,
            digest,
            signature,
        })
    }

    pub fn decode(bytes: &[u8]) -> Option<Receipt> {
        let mut cur = Cursor::new(bytes);
        let r = Self::read(&mut cur)?;
        cur.finish().ok()?;
        Some(r)
    }
}

fn read_str(cur: &mut Cursor<'_>) -> Option<String> {
    let len = cur.u8().ok()? as usize;
    String::from_utf8(cur.take(len).ok()?.to_vec()).ok()
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.push(s.len() as u8);
    out.extend_from_slice(s.as_bytes());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ContractKind {
    BenchmarkRegistration = 1,
    SlaReference = 2,
    SoftwareUpdateExecution = 3,
}

impl TryFrom<u8> for ContractKind {
    type Error = ();

    fn try_from(b: u8) -> Result<Self, ()> {
        match b {
            1 => Ok(ContractKind::BenchmarkRegistration),
            2 => Ok(ContractKind::SlaReference),
            3 => Ok(ContractKind::SoftwareUpdateExecution),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractRecord {
    pub kind: ContractKind,
    pub software_id: String,
    pub payload_hash: Digest,
    pub confirmation: Option<Receipt>,
    pub submitted_by: String,
}

impl ContractRecord {
    pub fn benchmark(software_id: &str, hash: Digest, submitted_by: &str) -> Self {
        ContractRecord {
            kind: ContractKind::BenchmarkRegistration,
            software_id: software_id.to_owned(),
            payload_hash: hash,
            confirmation: None,
            submitted_by: submitted_by.to_owned(),
        }
    }

    pub fn software_update(
        software_id: &str,
        new_hash: Digest,
        confirmation: Option<Receipt>,
        submitted_by: &str,
    ) -> Self {
        ContractRecord {
            kind: ContractKind::SoftwareUpdateExecution,
            software_id: software_id.to_owned(),
            payload_hash: new_hash,
            confirmation,
            submitted_by: submitted_by.to_owned(),
        }
    }

    /// `[kind][id][payload 32][0 | 1 receipt][submitted_by]`, strings u8-length-prefixed.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.kind as u8];
        push_str(&mut out, &self.software_id);
        out.extend_from_slice(self.payload_hash.as_bytes());
        match &self.confirmation {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.encode());
            }
        }
        push_str(&mut out, &self.submitted_by);
        out
    }

    fn read(cur: &mut Cursor<'_>) -> Option<ContractRecord> {
        let kind = ContractKind::try_from(cur.u8().ok()?).ok()?;
        let software_id = read_str(cur)?;
        let payload_hash = cur.digest().ok()?;
        let confirmation = match cur.u8().ok()? {
            0 => None,
            1 => Some(Receipt::read(cur)?),
            _ => return None,
        };
        let submitted_by = read_str(cur)?;
        Some(ContractRecord {
            kind,
            software_id,
            payload_hash,
            confirmation,
            submitted_by,
        })
    }

    fn supplies_benchmark(&self) -> bool {
        matches!(
            self.kind,
            ContractKind::BenchmarkRegistration | ContractKind::SoftwareUpdateExecution
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_block_hash: Digest,
    pub records: Vec<ContractRecord>,
    pub signatures: Vec<Endorsement>,
}

/// The bytes participants sign: `[u64 height][prev 32][u32 n][records]`.
pub fn block_body(height: u64, prev_block_hash: &Digest, records: &[ContractRecord]) -> Vec<u8> {
    let mut out = height.to_be_bytes().to_vec();
    out.extend_from_slice(prev_block_hash.as_bytes());
    out.extend_from_slice(&(records.len() as u32).to_be_bytes());
    for r in records {
        out.extend_from_slice(&r.encode());
    }
    out
}

impl Block {
    pub fn body(&self) -> Vec<u8> {
        block_body(self.height, &self.prev_block_hash, &self.records)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&(self.signatures.len() as u16).to_be_bytes());
        for e in &self.signatures {
            push_str(&mut out, &e.signer);
            out.extend_from_slice(&e.signature);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Block> {
        let mut cur = Cursor::new(bytes);
        let height = cur.u64().ok()?;
        let prev_block_hash = cur.digest().ok()?;
        let n = cur.u32().ok()? as usize;
        if n > cur.remaining() {
            return None;
        }
        let records = (0..n)
            .map(|_| ContractRecord::read(&mut cur))
            .collect::<Option<Vec<_>>>()?;
        let s = cur.u16().ok()? as usize;
        let signatures = (0..s)
            .map(|_| {
                let signer = read_str(&mut cur)?;
                let signature = cur.take(SIGNATURE_LEN).ok()?.try_into().ok()?;
                Some(Endorsement { signer, signature })
            })
            .collect::<Option<Vec<_>>>()?;
        cur.finish().ok()?;
        Some(Block {
            height,
            prev_block_hash,
            records,
            signatures,
        })
    }

    pub fn hash(&self) -> Digest {
        hash_bytes(&self.encode())
    }
}

/// ⌈2n/3⌉ signatures out of `n` registered participants.
pub fn quorum_threshold(participants: usize) -> usize {
    (2 * participants).div_ceil(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerVerdict {
    Ok { blocks: u64 },
    HeaderCorrupt,
    Corruption { height: u64 },
    HeadMismatch,
}

impl LedgerVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, LedgerVerdict::Ok { .. })
    }
}

impl fmt::Display for LedgerVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LedgerVerdict::Ok { blocks } => write!(f, "ok ({blocks} blocks)"),
            LedgerVerdict::HeaderCorrupt => f.write_str("participant header corrupt"),
            LedgerVerdict::Corruption { height } => write!(f, "corruption at height {height}"),
            LedgerVerdict::HeadMismatch => f.write_str("persisted head differs from memory"),
        }
    }
}

/// Registered participants, keyed by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    by_id: BTreeMap<String, Participant>,
}

impl Registry {
    pub fn new(participants: Vec<Participant>) -> Result<Self, PdlError> {
        if participants.is_empty() {
            return Err(PdlError::InvalidParticipants("at least one participant required"));
        }
        let mut by_id = BTreeMap::new();
        for p in participants {
            if p.id.is_empty() || p.id.len() > u8::MAX as usize {
                return Err(PdlError::InvalidParticipants("participant id length"));
            }
            if by_id.insert(p.id.clone(), p).is_some() {
                return Err(PdlError::InvalidParticipants("duplicate participant id"));
            }
        }
        Ok(Registry { by_id })
    }

    pub fn get(&self, id: &str) -> Option<&Participant> {
        self.by_id.get(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Participant> {
        self.by_id.values()
    }

    pub fn quorum(&self) -> usize {
        quorum_threshold(self.len())
    }

    /// Checks a solution-provider receipt for `software_id`/`digest`.
    pub fn check_receipt(&self, software_id: &str, digest: &Digest, receipt: &Receipt) -> bool {
        self.get(&receipt.provider).is_some_and(|p| {
            p.role == Role::SolutionProvider
                && receipt.digest == *digest
                && p.verify(&receipt_message(software_id, digest), &receipt.signature)
        })
    }

    fn check_record(&self, r: &ContractRecord) -> Result<(), PdlError> {
        validate_software_id(&r.software_id)
            .map_err(|_| PdlError::InvalidRecord("software id"))?;
        if self.get(&r.submitted_by).is_none() {
            return Err(PdlError::UnknownParticipant(r.submitted_by.clone()));
        }
        if r.kind == ContractKind::SoftwareUpdateExecution {
            match &r.confirmation {
                Some(c) if self.check_receipt(&r.software_id, &r.payload_hash, c) => {}
                _ => return Err(PdlError::BadConfirmation),
            }
        }
        Ok(())
    }

    /// Verifies every endorsement over `body` and counts distinct signers.
    fn check_quorum(&self, body: &[u8], sigs: &[Endorsement]) -> Result<(), PdlError> {
        let mut signers = BTreeSet::new();
        for e in sigs {
            let p = self
                .get(&e.signer)
                .ok_or_else(|| PdlError::UnknownSigner(e.signer.clone()))?;
            if !p.verify(body, &e.signature) {
                return Err(PdlError::BadSignature(e.signer.clone()));
            }
            signers.insert(e.signer.as_str());
        }
        let need = self.quorum();
        if signers.len() < need {
            return Err(PdlError::QuorumNotMet {
                have: signers.len(),
                need,
            });
        }
        Ok(())
    }

    fn encode_header(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.by_id.len() as u16).to_be_bytes());
        for p in self.by_id.values() {
            push_str(&mut out, &p.id);
            out.push(p.role as u8);
            out.extend_from_slice(&p.public_key);
        }
        let h = hash_bytes(&out);
        out.extend_from_slice(h.as_bytes());
        out
    }

    fn read_header(cur: &mut Cursor<'_>) -> Option<Registry> {
        let start = cur.take(5).ok()?;
        if &start[..4] != MAGIC || start[4] != FORMAT_VERSION {
            return None;
        }
        let mut header = start.to_vec();
        let n_bytes = cur.take(2).ok()?;
        header.extend_from_slice(n_bytes);
        let n = u16::from_be_bytes([n_bytes[0], n_bytes[1]]) as usize;
        let mut participants = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = cur.u8().ok()?;
            let id = cur.take(len as usize).ok()?;
            let role = cur.u8().ok()?;
            let key = cur.take(PUBLIC_KEY_LEN).ok()?;
            header.push(len);
            header.extend_from_slice(id);
            header.push(role);
            header.extend_from_slice(key);
            participants.push(Participant {
                id: String::from_utf8(id.to_vec()).ok()?,
                role: Role::try_from(role).ok()?,
                public_key: key.try_into().ok()?,
            });
        }
        if cur.digest().ok()? != hash_bytes(&header) {
            return None;
        }
        Registry::new(participants).ok()
    }
}

enum Backend {
    File { file: File, path: PathBuf },
    Memory(Vec<u8>),
}

/// The ledger: a single sequencer admitting one block per accepted record.
pub struct Ledger {
    registry: Registry,
    blocks: Vec<Block>,
    hashes: Vec<Digest>,
    backend: Backend,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("participants", &self.registry.len())
            .field("blocks", &self.blocks.len())
            .finish()
    }
}

struct Replay {
    registry: Registry,
    blocks: Vec<Block>,
    hashes: Vec<Digest>,
}

fn replay(bytes: &[u8]) -> Result<Replay, LedgerVerdict> {
    let mut cur = Cursor::new(bytes);
    let registry = Registry::read_header(&mut cur).ok_or(LedgerVerdict::HeaderCorrupt)?;
    let mut blocks: Vec<Block> = Vec::new();
    let mut hashes: Vec<Digest> = Vec::new();
    while cur.remaining() > 0 {
        let height = blocks.len() as u64;
        let bad = LedgerVerdict::Corruption { height };
        let len = cur.u32().map_err(|_| bad)? as usize;
        let raw = cur.take(len).map_err(|_| bad)?;
        let stored = cur.digest().map_err(|_| bad)?;
        let block = Block::decode(raw).ok_or(bad)?;
        let prev = hashes.last().copied().unwrap_or(Digest::ZERO);
        let valid = hash_bytes(raw) == stored
            && block.height == height
            && block.prev_block_hash == prev
            && !block.records.is_empty()
            && block.records.iter().all(|r| registry.check_record(r).is_ok())
            && registry.check_quorum(&block.body(), &block.signatures).is_ok();
        if !valid {
            return Err(bad);
        }
        blocks.push(block);
        hashes.push(stored);
    }
    Ok(Replay {
        registry,
        blocks,
        hashes,
    })
}

/// Re-verifies a complete ledger image: header, hash links and quorums.
pub fn verify_ledger_bytes(bytes: &[u8]) -> LedgerVerdict {
    match replay(bytes) {
        Ok(r) => LedgerVerdict::Ok {
            blocks: r.blocks.len() as u64,
        },
        Err(v) => v,
    }
}

pub fn verify_ledger_file(path: &Path) -> io::Result<LedgerVerdict> {
    Ok(verify_ledger_bytes(&std::fs::read(path)?))
}

impl Ledger {
    pub fn in_memory(participants: Vec<Participant>) -> Result<Self, PdlError> {
        let registry = Registry::new(participants)?;
        let image = registry.encode_header();
        Ok(Ledger {
            registry,
            blocks: Vec::new(),
            hashes: Vec::new(),
            backend: Backend::Memory(image),
        })
    }

    /// Creates a new ledger file; fails if `path` already exists.
    pub fn create(path: impl AsRef<Path>, participants: Vec<Participant>) -> Result<Self, PdlError> {
        let registry = Registry::new(participants)?;
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(&path)?;
        file.write_all(&registry.encode_header())?;
        file.sync_all()?;
        Ok(Ledger {
            registry,
            blocks: Vec::new(),
            hashes: Vec::new(),
            backend: Backend::File { file, path },
        })
    }

    /// Opens and fully re-verifies an existing ledger file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PdlError> {
        let path = path.as_ref().to_path_buf();
        let bytes = std::fs::read(&path)?;
        let r = replay(&bytes).map_err(PdlError::Corrupt)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        Ok(Ledger {
            registry: r.registry,
            blocks: r.blocks,
            hashes: r.hashes,
            backend: Backend::File { file, path },
        })
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn head_hash(&self) -> Digest {
        self.hashes.last().copied().unwrap_or(Digest::ZERO)
    }

    /// Body of the next block if it were to carry `records`; this is what
    /// participants endorse.
    pub fn next_block_body(&self, records: &[ContractRecord]) -> Vec<u8> {
        block_body(self.height(), &self.head_hash(), records)
    }

    /// Admits `record` as the next block if the endorsements reach quorum.
    pub fn submit_contract(
        &mut self,
        record: ContractRecord,
        signatures: Vec<Endorsement>,
    ) -> Result<&Block, PdlError> {
        self.registry.check_record(&record)?;
        let block = Block {
            height: self.height(),
            prev_block_hash: self.head_hash(),
            records: vec![record],
            signatures,
        };
        self.registry
            .check_quorum(&block.body(), &block.signatures)?;

        let raw = block.encode();
        let hash = hash_bytes(&raw);
        let mut entry = (raw.len() as u32).to_be_bytes().to_vec();
        entry.extend_from_slice(&raw);
        entry.extend_from_slice(hash.as_bytes());
        match &mut self.backend {
            Backend::File { file, .. } => {
                file.write_all(&entry)?;
                file.sync_data()?;
            }
            Backend::Memory(buf) => buf.extend_from_slice(&entry),
        }
        self.blocks.push(block);
        self.hashes.push(hash);
        Ok(self.blocks.last().unwrap())
    }

    /// A device vendor records an agreed software update, carrying the
    /// solution provider's confirmation receipt.
    pub fn execute_update_contract(
        &mut self,
        record: ContractRecord,
        signatures: Vec<Endorsement>,
    ) -> Result<&Block, PdlError> {
        if record.kind != ContractKind::SoftwareUpdateExecution {
            return Err(PdlError::InvalidRecord("not a software update"));
        }
        let submitter = self
            .registry
            .get(&record.submitted_by)
            .ok_or_else(|| PdlError::UnknownParticipant(record.submitted_by.clone()))?;
        if submitter.role != Role::DeviceVendor {
            return Err(PdlError::WrongRole {
                id: submitter.id.clone(),
                actual: submitter.role,
                expected: Role::DeviceVendor,
            });
        }
        self.submit_contract(record, signatures)
    }

    fn benchmark_in(blocks: &[Block], software_id: &str) -> Option<Digest> {
        blocks
            .iter()
            .rev()
            .flat_map(|b| b.records.iter().rev())
            .find(|r| r.software_id == software_id && r.supplies_benchmark())
            .map(|r| r.payload_hash)
    }

    /// Latest registered or updated hash for `software_id`.
    pub fn query_benchmark(&self, software_id: &str) -> Result<Digest, PdlError> {
        Self::benchmark_in(&self.blocks, software_id).ok_or(PdlError::NotFound)
    }

    /// [`Ledger::query_benchmark`] as of the first `height` blocks.
    pub fn query_benchmark_at(&self, software_id: &str, height: u64) -> Result<Digest, PdlError> {
        let h = (height as usize).min(self.blocks.len());
        Self::benchmark_in(&self.blocks[..h], software_id).ok_or(PdlError::NotFound)
    }

    /// Height of the block holding an executed update to `new_hash`, if any.
    pub fn query_update_contract(&self, software_id: &str, new_hash: &Digest) -> Option<u64> {
        self.blocks.iter().find_map(|b| {
            b.records
                .iter()
                .any(|r| {
                    r.kind == ContractKind::SoftwareUpdateExecution
                        && r.software_id == software_id
                        && r.payload_hash == *new_hash
                })
                .then_some(b.height)
        })
    }

    pub fn persisted_bytes(&self) -> io::Result<Vec<u8>> {
        match &self.backend {
            Backend::File { path, .. } => std::fs::read(path),
            Backend::Memory(buf) => Ok(buf.clone()),
        }
    }

    /// Re-walks the persisted image and compares its head with memory.
    pub fn verify_ledger(&self) -> Result<LedgerVerdict, PdlError> {
        let bytes = self.persisted_bytes()?;
        Ok(match replay(&bytes) {
            Err(v) => v,
            Ok(r) if r.hashes.last() != self.hashes.last() => LedgerVerdict::HeadMismatch,
            Ok(r) => LedgerVerdict::Ok {
                blocks: r.blocks.len() as u64,
            },
        })
    }

    #[cfg(test)]
    pub(crate) fn memory_image_mut(&mut self) -> &mut Vec<u8> {
        match &mut self.backend {
            Backend::Memory(buf) => buf,
            Backend::File { .. } => panic!("file-backed ledger"),
        }
    }
}

/// Human-readable listing of a ledger image.
pub fn dump(bytes: &[u8]) -> Result<String, LedgerVerdict> {
    use std::fmt::Write as _;
    let r = replay(bytes)?;
    let mut out = String::new();
    writeln!(out, "participants ({}), quorum {}", r.registry.len(), r.registry.quorum()).unwrap();
    for p in r.registry.iter() {
        writeln!(out, "  {} {:?}", p.id, p.role).unwrap();
    }
    for (b, h) in r.blocks.iter().zip(&r.hashes) {
        writeln!(out, "block {} hash {} prev {}", b.height, h, b.prev_block_hash).unwrap();
        for rec in &b.records {
            writeln!(
                out,
                "  {:?} {} {} by {}{}",
                rec.kind,
                rec.software_id,
                rec.payload_hash,
                rec.submitted_by,
                rec.confirmation
                    .as_ref()
                    .map(|c| format!(" confirmed by {}", c.provider))
                    .unwrap_or_default()
            )
            .unwrap();
        }
        let signers: Vec<_> = b.signatures.iter().map(|e| e.signer.as_str()).collect();
        writeln!(out, "  signed by {}", signers.join(", ")).unwrap();
    }
    Ok(out)
}

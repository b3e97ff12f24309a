//! The remote verifier.
//!
//! Holds the known-good hash for every software id in an [`immustore::Store`]
//! and adjudicates disputes raised by applets: a disputed hash equal to the
//! store's latest value for that software is a legitimate update the applet
//! has not heard about yet; anything else is acted upon.
//!
//! Every decision is appended to the store before it is returned.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::applet::{decode_archive, decode_provision, LogEntry};
use crate::immustore::{RootDigest, Store, StoreError};
use crate::measure::{compare, hash_bytes, validate_software_id, Digest};
use crate::pdl::{Ledger, PdlError, Receipt};
use crate::wire::{
    decode_dispute, encode_dispute, ActionCode, Cursor, DecisionKind, DisputePacket, Frame,
    MsgType, WireError,
};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("store unavailable: {0}")]
    StoreUnavailable(#[source] StoreError),
    #[error("confirmation receipt does not verify")]
    BadReceipt,
    #[error("no executed update contract for this hash")]
    NoMatchingContract,
    #[error("no benchmark registered in the ledger for {0:?}")]
    NoBenchmark(String),
    #[error("measured hash does not match the vendor's registered benchmark")]
    BenchmarkMismatch,
    #[error("malformed archive batch: {0}")]
    MalformedBatch(&'static str),
    #[error("invalid software id {0:?}")]
    InvalidSoftwareId(String),
    #[error("verifiers disagree")]
    NoQuorum,
    #[error("missing vote from verifier {0:?}")]
    IncompleteVote(String),
    #[error("vote from unconfigured verifier {0:?}")]
    UnknownVoter(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl VerifierError {
    /// Error class name used on the wire and on the command line.
    pub fn class(&self) -> &'static str {
        match self {
            VerifierError::UnknownDevice(_) => "UnknownDevice",
            VerifierError::StoreUnavailable(_) => "StoreUnavailable",
            VerifierError::BadReceipt => "BadReceipt",
            VerifierError::NoMatchingContract => "NoMatchingContract",
            VerifierError::NoBenchmark(_) => "NoBenchmark",
            VerifierError::BenchmarkMismatch => "BenchmarkMismatch",
            VerifierError::MalformedBatch(_) => "MalformedBatch",
            VerifierError::InvalidSoftwareId(_) => "InvalidSoftwareId",
            VerifierError::NoQuorum => "NoQuorum",
            VerifierError::IncompleteVote(_) => "IncompleteVote",
            VerifierError::UnknownVoter(_) => "UnknownVoter",
            VerifierError::Wire(_) => "MalformedMessage",
        }
    }
}

fn store_err(e: StoreError) -> VerifierError {
    VerifierError::StoreUnavailable(e)
}

pub fn display_id(id: &[u8]) -> String {
    String::from_utf8_lossy(id).into_owned()
}

/// Source of wall-clock microseconds.
pub trait Clock: Send + Sync {
    fn now_micros(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_micros(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_micros() as u64)
    }
}

/// Clock advanced explicitly, for simulations.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        ManualClock(AtomicU64::new(start))
    }

    pub fn set(&self, micros: u64) {
        self.0.store(micros, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_micros(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DisputeDecision {
    pub kind: DecisionKind,
    /// SHA-256 of the encoded dispute packet that triggered the decision.
    pub dispute_ref: Digest,
    pub decided_at: u64,
}

impl DisputeDecision {
    /// Store value: DISPUTE_RESPONSE payload followed by the dispute reference.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.kind.encode();
        out.extend_from_slice(self.dispute_ref.as_bytes());
        out
    }
}

/// Hash of the encoded packet.
pub fn dispute_ref(packet: &DisputePacket) -> Result<Digest, WireError> {
    Ok(hash_bytes(&encode_dispute(packet)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateNotification {
    pub software_id: String,
    pub new_hash: Digest,
    pub receipt: Receipt,
}

impl UpdateNotification {
    /// UPDATE_NOTIFY payload: `[len][software_id][new_hash 32][receipt]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.software_id.len() as u8];
        out.extend_from_slice(self.software_id.as_bytes());
        out.extend_from_slice(self.new_hash.as_bytes());
        out.extend_from_slice(&self.receipt.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut cur = Cursor::new(bytes);
        let len = cur.u8()? as usize;
        let software_id = String::from_utf8(cur.take(len)?.to_vec())
            .map_err(|_| WireError::InvalidField("software id"))?;
        let new_hash = cur.digest()?;
        let rest = cur.take(cur.remaining())?;
        let receipt = Receipt::decode(rest).ok_or(WireError::InvalidField("receipt"))?;
        Ok(UpdateNotification {
            software_id,
            new_hash,
            receipt,
        })
    }
}

pub fn decision_key(device_id: &[u8]) -> Vec<u8> {
    [b"decision:".as_slice(), device_id].concat()
}

pub fn device_key(device_id: &[u8]) -> Vec<u8> {
    [b"device:".as_slice(), device_id].concat()
}

pub fn log_key(device_id: &[u8]) -> Vec<u8> {
    [b"log:".as_slice(), device_id].concat()
}

pub fn encode_root(root: &RootDigest) -> Vec<u8> {
    let mut out = root.head_index.to_be_bytes().to_vec();
    out.extend_from_slice(root.head_chain_hash.as_bytes());
    out
}

pub fn decode_root(bytes: &[u8]) -> Result<RootDigest, WireError> {
    let mut cur = Cursor::new(bytes);
    let head_index = cur.u64()?;
    let head_chain_hash = cur.digest()?;
    cur.finish()?;
    Ok(RootDigest {
        head_index,
        head_chain_hash,
    })
}

#[derive(Debug)]
pub struct Verifier {
    id: String,
    default_action: ActionCode,
    store: Store,
    devices: HashMap<Vec<u8>, String>,
}

impl Verifier {
    pub fn new(id: &str, store: Store) -> Self {
        Verifier {
            id: id.to_owned(),
            default_action: ActionCode::RevokeDevice,
            store,
            devices: HashMap::new(),
        }
    }

    /// Rebuilds the device registry from `device:` records in `store`.
    pub fn open(id: &str, store: Store) -> Self {
        let mut v = Verifier::new(id, store);
        for r in v.store.records() {
            if let Some(dev) = r.key.strip_prefix(b"device:".as_slice()) {
                v.devices
                    .insert(dev.to_vec(), String::from_utf8_lossy(&r.value).into_owned());
            }
        }
        v
    }

    pub fn with_default_action(mut self, action: ActionCode) -> Self {
        self.default_action = action;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn software_of(&self, device_id: &[u8]) -> Option<&str> {
        self.devices.get(device_id).map(String::as_str)
    }

    /// Devices registered as running `software_id`, sorted.
    pub fn devices_running(&self, software_id: &str) -> Vec<Vec<u8>> {
        let mut v: Vec<_> = self
            .devices
            .iter()
            .filter(|(_, s)| s.as_str() == software_id)
            .map(|(d, _)| d.clone())
            .collect();
        v.sort();
        v
    }

    pub fn latest_hash(&self, software_id: &str) -> Option<Digest> {
        self.store
            .latest_value(software_id.as_bytes())
            .and_then(Digest::from_slice)
    }

    /// Maps a device to its software and makes sure the store holds the
    /// confirmed benchmark as that software's latest hash.
    pub fn register_device(
        &mut self,
        device_id: &[u8],
        software_id: &str,
        benchmark: Digest,
        now: u64,
    ) -> Result<(), VerifierError> {
        validate_software_id(software_id)
            .map_err(|_| VerifierError::InvalidSoftwareId(software_id.to_owned()))?;
        crate::wire::check_id(device_id, "device_id length")?;
        if self.latest_hash(software_id) != Some(benchmark) {
            self.store
                .append(crate::immustore::Record::new(
                    software_id.as_bytes(),
                    benchmark.as_bytes().as_slice(),
                    now,
                ))
                .map_err(store_err)?;
        }
        if self.software_of(device_id) != Some(software_id) {
            self.store
                .append(crate::immustore::Record::new(
                    device_key(device_id),
                    software_id.as_bytes(),
                    now,
                ))
                .map_err(store_err)?;
            self.devices
                .insert(device_id.to_vec(), software_id.to_owned());
        }
        Ok(())
    }

    /// Solution-provider check during provisioning: the measured composite
    /// must equal the vendor's benchmark in the ledger. On success the
    /// device is registered and the receipt digest returned.
    pub fn provision_device(
        &mut self,
        device_id: &[u8],
        report_software_id: &str,
        measured: Digest,
        ledger: &Ledger,
        now: u64,
    ) -> Result<Digest, VerifierError> {
        let vendor = match ledger.query_benchmark(report_software_id) {
            Ok(d) => d,
            Err(_) => return Err(VerifierError::NoBenchmark(report_software_id.to_owned())),
        };
        if !compare(&vendor, &measured).is_match() {
            return Err(VerifierError::BenchmarkMismatch);
        }
        self.register_device(device_id, report_software_id, measured, now)?;
        Ok(measured)
    }

    /// Decides on a dispute, records the decision, then returns it.
    pub fn handle_dispute(
        &mut self,
        packet: &DisputePacket,
        now: u64,
    ) -> Result<DisputeDecision, VerifierError> {
        let dispute_ref = dispute_ref(packet)?;
        let software_id = self
            .devices
            .get(&packet.device_id)
            .ok_or_else(|| VerifierError::UnknownDevice(display_id(&packet.device_id)))?;
        let kind = match self.latest_hash(software_id) {
            Some(latest) if compare(&latest, &packet.current_hash).is_match() => {
                DecisionKind::UpdateBenchmark(latest)
            }
            _ => DecisionKind::Action(self.default_action),
        };
        let decision = DisputeDecision {
            kind,
            dispute_ref,
            decided_at: now,
        };
        self.store
            .append(crate::immustore::Record::new(
                decision_key(&packet.device_id),
                decision.encode(),
                now,
            ))
            .map_err(store_err)?;
        Ok(decision)
    }

    /// Records a vendor update once the solution provider's receipt and the
    /// executed ledger contract both check out.
    pub fn record_software_update(
        &mut self,
        n: &UpdateNotification,
        ledger: &Ledger,
        now: u64,
    ) -> Result<(u64, RootDigest), VerifierError> {
        if !ledger
            .registry()
            .check_receipt(&n.software_id, &n.new_hash, &n.receipt)
        {
            return Err(VerifierError::BadReceipt);
        }
        if ledger
            .query_update_contract(&n.software_id, &n.new_hash)
            .is_none()
        {
            return Err(VerifierError::NoMatchingContract);
        }
        self.store
            .append(crate::immustore::Record::new(
                n.software_id.as_bytes(),
                n.new_hash.as_bytes().as_slice(),
                now,
            ))
            .map_err(store_err)
    }

    /// Stores an archived applet log under `log:<device_id>`.
    pub fn ingest_archive(
        &mut self,
        device_id: &[u8],
        batch: &[LogEntry],
    ) -> Result<(usize, RootDigest), VerifierError> {
        if batch.is_empty() {
            return Err(VerifierError::MalformedBatch("empty batch"));
        }
        if batch.windows(2).any(|w| w[1].t_s < w[0].t_s) {
            return Err(VerifierError::MalformedBatch("timestamps out of order"));
        }
        let key = log_key(device_id);
        let mut root = None;
        for e in batch {
            let (_, r) = self
                .store
                .append(crate::immustore::Record::new(key.clone(), e.encode(), e.t_s))
                .map_err(store_err)?;
            root = Some(r);
        }
        Ok((batch.len(), root.expect("nonempty batch")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuorumConfig {
    pub verifier_ids: Vec<String>,
}

impl QuorumConfig {
    pub fn new(verifier_ids: Vec<String>) -> Result<Self, &'static str> {
        if verifier_ids.is_empty() {
            return Err("at least one verifier required");
        }
        let mut sorted = verifier_ids.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != verifier_ids.len() {
            return Err("duplicate verifier id");
        }
        Ok(QuorumConfig { verifier_ids })
    }

    pub fn single(id: &str) -> Self {
        QuorumConfig {
            verifier_ids: vec![id.to_owned()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub verifier_id: String,
    pub decision: DisputeDecision,
}

/// Unanimity across every configured verifier. Decisions agree when kind,
/// payload and dispute reference are identical; decision times may differ.
pub fn quorum_decide(
    config: &QuorumConfig,
    votes: &[Vote],
) -> Result<DisputeDecision, VerifierError> {
    if let Some(v) = votes
        .iter()
        .find(|v| !config.verifier_ids.contains(&v.verifier_id))
    {
        return Err(VerifierError::UnknownVoter(v.verifier_id.clone()));
    }
    let mut decisions = Vec::with_capacity(config.verifier_ids.len());
    for id in &config.verifier_ids {
        let vote = votes
            .iter()
            .find(|v| &v.verifier_id == id)
            .ok_or_else(|| VerifierError::IncompleteVote(id.clone()))?;
        decisions.push(vote.decision);
    }
    let first = decisions[0];
    if decisions
        .iter()
        .all(|d| d.kind == first.kind && d.dispute_ref == first.dispute_ref)
    {
        Ok(first)
    } else {
        Err(VerifierError::NoQuorum)
    }
}

/// Frame-level front end shared by the in-process transport and the TCP
/// server. Store writes are serialized through the verifier lock.
pub struct VerifierService {
    verifier: Mutex<Verifier>,
    ledger: Arc<RwLock<Ledger>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for VerifierService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VerifierService").finish_non_exhaustive()
    }
}

impl VerifierService {
    pub fn new(verifier: Verifier, ledger: Arc<RwLock<Ledger>>, clock: Arc<dyn Clock>) -> Self {
        VerifierService {
            verifier: Mutex::new(verifier),
            ledger,
            clock,
        }
    }

    pub fn with_verifier<R>(&self, f: impl FnOnce(&mut Verifier) -> R) -> R {
        f(&mut self.verifier.lock().expect("verifier lock poisoned"))
    }

    pub fn ledger(&self) -> &Arc<RwLock<Ledger>> {
        &self.ledger
    }

    /// One request frame in, one response frame out.
    pub fn handle_frame(&self, request: &Frame) -> Frame {
        match self.dispatch(request) {
            Ok(f) => f,
            Err(e) => Frame::error(e.class(), &e),
        }
    }

    fn dispatch(&self, request: &Frame) -> Result<Frame, VerifierError> {
        let now = self.clock.now_micros();
        match request.msg_type {
            MsgType::Dispute => {
                let packet = decode_dispute(&request.payload)?;
                let d = self.with_verifier(|v| v.handle_dispute(&packet, now))?;
                Ok(Frame::new(MsgType::DisputeResponse, d.kind.encode()))
            }
            MsgType::LogArchive => {
                let (device_id, entries) = decode_archive(&request.payload)?;
                let (count, root) = self.with_verifier(|v| v.ingest_archive(&device_id, &entries))?;
                let mut payload = (count as u32).to_be_bytes().to_vec();
                payload.extend_from_slice(&encode_root(&root));
                Ok(Frame::new(MsgType::LogArchive, payload))
            }
            MsgType::UpdateNotify => {
                let n = UpdateNotification::decode(&request.payload)?;
                let ledger = self.ledger.read().expect("ledger lock poisoned");
                let (_, root) = self.with_verifier(|v| v.record_software_update(&n, &ledger, now))?;
                Ok(Frame::new(MsgType::UpdateNotify, encode_root(&root)))
            }
            MsgType::ProvisionMeasurement => {
                let (device_id, report) = decode_provision(&request.payload)?;
                let ledger = self.ledger.read().expect("ledger lock poisoned");
                let receipt = self.with_verifier(|v| {
                    v.provision_device(&device_id, &report.software_id, report.composite, &ledger, now)
                })?;
                Ok(Frame::new(
                    MsgType::ProvisionConfirm,
                    receipt.as_bytes().to_vec(),
                ))
            }
            other => Err(WireError::UnknownMsgType(other as u8).into()),
        }
    }
}

fn serve_connection(stream: TcpStream, service: &VerifierService) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(request) = Frame::read_from(&mut reader)? {
        service.handle_frame(&request).write_to(&mut writer)?;
    }
    Ok(())
}

/// Handle to a running TCP verifier.
#[derive(Debug)]
pub struct Server {
    addr: SocketAddr,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

/// Accepts connections on `listener` in a background thread, one thread per
/// connection.
pub fn spawn_server(listener: TcpListener, service: Arc<VerifierService>) -> std::io::Result<Server> {
    let addr = listener.local_addr()?;
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let service = Arc::clone(&service);
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                let _ = serve_connection(stream, &service);
            });
        }
    });
    Ok(Server { addr })
}

/// Serves on the calling thread until the listener fails.
pub fn serve_forever(listener: TcpListener, service: Arc<VerifierService>) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let service = Arc::clone(&service);
        thread::spawn(move || {
            let _ = serve_connection(stream, &service);
        });
    }
    Ok(())
}

/// Blocking client for one verifier connection.
#[derive(Debug)]
pub struct TcpClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpClient {
    pub fn connect(addr: SocketAddr) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn exchange(&mut self, request: &Frame) -> std::io::Result<Frame> {
        request.write_to(&mut self.writer)?;
        Frame::read_from(&mut self.reader)?
            .ok_or_else(|| std::io::ErrorKind::UnexpectedEof.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub verifier_id: String,
    pub listen: String,
    pub store_path: String,
    pub ledger_path: String,
    pub default_action: ActionCode,
    pub quorum_peers: Vec<String>,
}

impl ServiceConfig {
    /// `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, String> {
        let kv = crate::config::parse_kv(text)?;
        let get = |k: &str| kv.get(k).cloned();
        let default_action = match get("default_action") {
            None => ActionCode::RevokeDevice,
            Some(v) => {
                let n = crate::config::parse_u8(&v)?;
                ActionCode::try_from(n).map_err(|e| e.to_string())?
            }
        };
        Ok(ServiceConfig {
            verifier_id: get("verifier_id").unwrap_or_else(|| "verifier-1".into()),
            listen: get("listen").unwrap_or_else(|| "127.0.0.1:7070".into()),
            store_path: get("store_path").ok_or("store_path is required")?,
            ledger_path: get("ledger_path").ok_or("ledger_path is required")?,
            default_action,
            quorum_peers: get("quorum_peers")
                .map(|v| {
                    v.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default(),
        })
    }
}

impl From<PdlError> for VerifierError {
    fn from(_: PdlError) -> Self {
        VerifierError::NoMatchingContract
    }
}

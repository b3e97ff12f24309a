//! The attestation applet running inside the (simulated) secure element.
//!
//! The applet is a single-threaded state machine:
//!
//! ```text
//! Unprovisioned --submit--> AwaitingConfirmation --confirm--> Active <--> Blocked
//! ```
//!
//! While `Active` it is fed one [`MeasurementReport`] per scan epoch, compares
//! it with the confirmed benchmark, writes a [`LogEntry`] and, on mismatch,
//! emits a [`DisputePacket`] for the remote verifier. Time is always passed in
//! by the caller.

use std::fmt;

use thiserror::Error;

use crate::measure::{compare, missing_artifact_digest, Digest, MeasurementReport};
use crate::wire::{
    self, check_id, ActionCode, ApduCommand, ApduResponse, DecisionKind, DisputePacket, Frame,
    MsgType, WireError, CLA_PROPRIETARY, INS_GET_LOG_ENTRY, INS_GET_STATE, INS_MATCH_HASHES,
    INS_SET_BENCHMARK, SW_CLA_NOT_SUPPORTED, SW_CONDITIONS_NOT_SATISFIED, SW_INS_NOT_SUPPORTED,
    SW_NOT_FOUND, SW_WRONG_DATA,
};

/// Number of entries the in-element log can hold before it must be archived.
pub const LOG_CAPACITY: usize = 125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Mode {
    Unprovisioned = 0,
    AwaitingConfirmation = 1,
    Active = 2,
    Blocked = 3,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppletError {
    #[error("{op} not allowed in mode {mode}")]
    WrongState { op: &'static str, mode: Mode },
    #[error("receipt digest does not match the pending measurement")]
    ReceiptMismatch,
    #[error("timestamp {got} precedes last log entry at {last}")]
    NonMonotoneTimestamp { last: u64, got: u64 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("unexpected inbound frame {0:?}")]
    UnexpectedFrame(MsgType),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    /// Consecutive mismatches after which the applet blocks on its own.
    pub alarm_block_threshold: u32,
    pub autonomous_block: bool,
    /// Scan period in microseconds.
    pub scan_period: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            alarm_block_threshold: 3,
            autonomous_block: true,
            scan_period: 1_000_000,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), AppletError> {
        if self.alarm_block_threshold == 0 {
            return Err(AppletError::InvalidPolicy("alarm_block_threshold must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LogEntry {
    pub t_s: u64,
    pub current_hash: Digest,
    pub previous_hash: Digest,
    pub action_taken: ActionCode,
}

pub const LOG_ENTRY_MAX_LEN: usize = 1 + wire::TIMESTAMP_MAX_LEN + 32 + 32 + 1;

impl LogEntry {
    /// `[ts_len][timestamp][current 32][previous 32][action]`
    pub fn encode(&self) -> Vec<u8> {
        let ts = wire::encode_timestamp(self.t_s);
        let mut out = Vec::with_capacity(1 + ts.len() + 65);
        out.push(ts.len() as u8);
        out.extend_from_slice(&ts);
        out.extend_from_slice(self.current_hash.as_bytes());
        out.extend_from_slice(self.previous_hash.as_bytes());
        out.push(self.action_taken.id());
        out
    }

    fn read(cur: &mut wire::Cursor<'_>) -> Result<Self, WireError> {
        let ts_len = cur.u8()? as usize;
        let t_s = wire::decode_timestamp(cur.take(ts_len)?)?;
        let current_hash = cur.digest()?;
        let previous_hash = cur.digest()?;
        let action_taken = ActionCode::try_from(cur.u8()?)?;
        Ok(LogEntry {
            t_s,
            current_hash,
            previous_hash,
            action_taken,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut cur = wire::Cursor::new(bytes);
        let entry = Self::read(&mut cur)?;
        cur.finish()?;
        Ok(entry)
    }
}

/// LOG_ARCHIVE payload: `[len][device_id][u32 count][entries...]`.
pub fn encode_archive(device_id: &[u8], entries: &[LogEntry]) -> Result<Vec<u8>, WireError> {
    check_id(device_id, "device_id length")?;
    let mut out = Vec::with_capacity(5 + device_id.len() + entries.len() * LOG_ENTRY_MAX_LEN);
    out.push(device_id.len() as u8);
    out.extend_from_slice(device_id);
    out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for e in entries {
        out.extend_from_slice(&e.encode());
    }
    Ok(out)
}

pub fn decode_archive(bytes: &[u8]) -> Result<(Vec<u8>, Vec<LogEntry>), WireError> {
    let mut cur = wire::Cursor::new(bytes);
    let device_id = read_device_prefix(&mut cur)?;
    let count = cur.u32()? as usize;
    // smallest entry is 1 + 7 + 65 bytes
    if count > cur.remaining() / 73 {
        return Err(WireError::Truncated);
    }
    let entries = (0..count)
        .map(|_| LogEntry::read(&mut cur))
        .collect::<Result<Vec<_>, _>>()?;
    cur.finish()?;
    Ok((device_id, entries))
}

fn read_device_prefix(cur: &mut wire::Cursor<'_>) -> Result<Vec<u8>, WireError> {
    let len = cur.u8()? as usize;
    let id = cur.take(len)?.to_vec();
    check_id(&id, "device_id length")?;
    Ok(id)
}

/// PROVISION_MEASUREMENT payload: `[len][device_id][encoded report]`.
pub fn encode_provision(device_id: &[u8], report: &MeasurementReport) -> Result<Vec<u8>, WireError> {
    check_id(device_id, "device_id length")?;
    let mut out = vec![device_id.len() as u8];
    out.extend_from_slice(device_id);
    out.extend_from_slice(&report.encode());
    Ok(out)
}

pub fn decode_provision(bytes: &[u8]) -> Result<(Vec<u8>, MeasurementReport), WireError> {
    let mut cur = wire::Cursor::new(bytes);
    let device_id = read_device_prefix(&mut cur)?;
    let rest = cur.take(cur.remaining())?;
    let report = MeasurementReport::decode(rest)
        .map_err(|_| WireError::InvalidField("measurement report"))?;
    Ok((device_id, report))
}

/// Bounded audit log kept inside the secure element.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LogRing {
    entries: Vec<LogEntry>,
}

impl LogRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&LogEntry> {
        self.entries.get(index)
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    /// Appends `entry`. When the ring is already full, the whole ring is
    /// returned as an archive batch and cleared first.
    pub fn append(&mut self, entry: LogEntry) -> Result<Option<Vec<LogEntry>>, AppletError> {
        self.check_monotone(entry.t_s)?;
        let archived = if self.entries.len() == LOG_CAPACITY {
            Some(std::mem::take(&mut self.entries))
        } else {
            None
        };
        self.entries.push(entry);
        Ok(archived)
    }

    fn check_monotone(&self, t_s: u64) -> Result<(), AppletError> {
        match self.entries.last() {
            Some(last) if t_s < last.t_s => Err(AppletError::NonMonotoneTimestamp {
                last: last.t_s,
                got: t_s,
            }),
            _ => Ok(()),
        }
    }
}

/// What one scan epoch produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOutcome {
    pub entry: LogEntry,
    pub dispute: Option<DisputePacket>,
    /// Action the applet took on its own authority (blocking).
    pub autonomous_action: Option<ActionCode>,
    /// Full log ring flushed by this epoch's append.
    pub archive: Option<Vec<LogEntry>>,
}

impl ScanOutcome {
    pub fn matched(&self) -> bool {
        self.dispute.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Applet {
    device_id: Vec<u8>,
    applet_id: Vec<u8>,
    policy: PolicyConfig,
    mode: Mode,
    benchmark: Option<Digest>,
    pending: Option<MeasurementReport>,
    consecutive_alarms: u32,
    /// Current hash of the previous epoch (benchmark before the first scan).
    last_hash: Option<Digest>,
    log: LogRing,
}

impl Applet {
    pub fn new(device_id: &[u8], applet_id: &[u8], policy: PolicyConfig) -> Result<Self, AppletError> {
        check_id(device_id, "device_id length")?;
        check_id(applet_id, "applet_id length")?;
        policy.validate()?;
        Ok(Applet {
            device_id: device_id.to_vec(),
            applet_id: applet_id.to_vec(),
            policy,
            mode: Mode::Unprovisioned,
            benchmark: None,
            pending: None,
            consecutive_alarms: 0,
            last_hash: None,
            log: LogRing::new(),
        })
    }

    pub fn device_id(&self) -> &[u8] {
        &self.device_id
    }

    pub fn applet_id(&self) -> &[u8] {
        &self.applet_id
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn benchmark(&self) -> Option<Digest> {
        self.benchmark
    }

    pub fn pending_measurement(&self) -> Option<&MeasurementReport> {
        self.pending.as_ref()
    }

    pub fn consecutive_alarms(&self) -> u32 {
        self.consecutive_alarms
    }

    pub fn log(&self) -> &LogRing {
        &self.log
    }

    fn require(&self, op: &'static str, allowed: &[Mode]) -> Result<(), AppletError> {
        if allowed.contains(&self.mode) {
            Ok(())
        } else {
            Err(AppletError::WrongState {
                op,
                mode: self.mode,
            })
        }
    }

    /// Checks the state invariants; used by tests after every transition.
    pub fn check_invariants(&self) -> Result<(), String> {
        let has_bench = self.benchmark.is_some();
        let bench_expected = matches!(self.mode, Mode::Active | Mode::Blocked);
        if has_bench != bench_expected {
            return Err(format!("benchmark presence {has_bench} in mode {}", self.mode));
        }
        if self.pending.is_some() != (self.mode == Mode::AwaitingConfirmation) {
            return Err(format!("pending measurement mismatch in mode {}", self.mode));
        }
        if self.log.len() > LOG_CAPACITY {
            return Err(format!("log holds {} entries", self.log.len()));
        }
        if let Some(last) = self.log.last() {
            if last.action_taken == ActionCode::Null && self.consecutive_alarms != 0 {
                return Err("alarms nonzero after a matching scan".into());
            }
        }
        Ok(())
    }

    /// Records the first measurement and returns the PROVISION_MEASUREMENT
    /// frame for the solution provider. Re-submitting before confirmation
    /// replaces the pending report.
    pub fn submit_initial_measurement(
        &mut self,
        report: MeasurementReport,
    ) -> Result<Frame, AppletError> {
        self.require(
            "submit_initial_measurement",
            &[Mode::Unprovisioned, Mode::AwaitingConfirmation],
        )?;
        let payload = encode_provision(&self.device_id, &report)?;
        self.pending = Some(report);
        self.mode = Mode::AwaitingConfirmation;
        Ok(Frame::new(MsgType::ProvisionMeasurement, payload))
    }

    /// Stores the pending composite as the benchmark once the solution
    /// provider's receipt names it.
    pub fn confirm_benchmark(&mut self, receipt: &Digest) -> Result<(), AppletError> {
        self.require("confirm_benchmark", &[Mode::AwaitingConfirmation])?;
        let pending = self.pending.as_ref().expect("pending set while awaiting confirmation");
        if !compare(&pending.composite, receipt).is_match() {
            return Err(AppletError::ReceiptMismatch);
        }
        self.benchmark = Some(pending.composite);
        self.last_hash = Some(pending.composite);
        self.pending = None;
        self.consecutive_alarms = 0;
        self.mode = Mode::Active;
        Ok(())
    }

    /// One periodic scan against the benchmark.
    pub fn scan_epoch(
        &mut self,
        report: &MeasurementReport,
        now: u64,
    ) -> Result<ScanOutcome, AppletError> {
        self.scan_digest(report.composite, now)
    }

    /// Scan in which a monitored artifact could not be read. Always treated
    /// as a mismatch.
    pub fn scan_missing_artifact(&mut self, path: &str, now: u64) -> Result<ScanOutcome, AppletError> {
        self.scan_digest(missing_artifact_digest(path), now)
    }

    fn scan_digest(&mut self, current: Digest, now: u64) -> Result<ScanOutcome, AppletError> {
        self.require("scan_epoch", &[Mode::Active])?;
        self.log.check_monotone(now)?;
        let benchmark = self.benchmark.expect("benchmark set while active");
        let previous = self.last_hash.unwrap_or(benchmark);

        let outcome = if compare(&current, &benchmark).is_match() {
            self.consecutive_alarms = 0;
            let entry = LogEntry {
                t_s: now,
                current_hash: current,
                previous_hash: current,
                action_taken: ActionCode::Null,
            };
            ScanOutcome {
                entry,
                dispute: None,
                autonomous_action: None,
                archive: None,
            }
        } else {
            self.consecutive_alarms = self.consecutive_alarms.saturating_add(1);
            let block = self.policy.autonomous_block
                && self.consecutive_alarms >= self.policy.alarm_block_threshold;
            let action = if block {
                self.mode = Mode::Blocked;
                ActionCode::RevokeDevice
            } else {
                ActionCode::InitiateInvestigation
            };
            let entry = LogEntry {
                t_s: now,
                current_hash: current,
                previous_hash: previous,
                action_taken: action,
            };
            let dispute = DisputePacket {
                device_id: self.device_id.clone(),
                applet_id: self.applet_id.clone(),
                timestamp: now,
                current_hash: current,
                previous_hash: previous,
                action_taken: action,
            };
            ScanOutcome {
                entry,
                dispute: Some(dispute),
                autonomous_action: block.then_some(action),
                archive: None,
            }
        };
        self.last_hash = Some(current);
        let archive = self.log.append(outcome.entry)?;
        Ok(ScanOutcome { archive, ..outcome })
    }

    /// Applies the remote verifier's verdict on a dispute.
    pub fn handle_verifier_response(&mut self, decision: &DecisionKind) -> Result<(), AppletError> {
        self.require("handle_verifier_response", &[Mode::Active, Mode::Blocked])?;
        match *decision {
            DecisionKind::UpdateBenchmark(d) => {
                self.benchmark = Some(d);
                self.consecutive_alarms = 0;
                self.mode = Mode::Active;
            }
            DecisionKind::Action(code) if code.blocks_device() => self.mode = Mode::Blocked,
            DecisionKind::Action(_) => {}
        }
        Ok(())
    }

    /// Dispatches an inbound transport frame.
    pub fn handle_frame(&mut self, frame: &Frame) -> Result<(), AppletError> {
        match frame.msg_type {
            MsgType::ProvisionConfirm => {
                let receipt = Digest::from_slice(&frame.payload)
                    .ok_or(WireError::InvalidField("receipt digest"))?;
                self.confirm_benchmark(&receipt)
            }
            MsgType::DisputeResponse => {
                let decision = DecisionKind::decode(&frame.payload)?;
                self.handle_verifier_response(&decision)
            }
            MsgType::ControlAction => {
                let [code] = frame.payload[..] else {
                    return Err(WireError::InvalidField("control action payload").into());
                };
                self.handle_verifier_response(&DecisionKind::Action(ActionCode::try_from(code)?))
            }
            other => Err(AppletError::UnexpectedFrame(other)),
        }
    }

    /// Card-side command processing. Errors are reported as status words.
    pub fn handle_apdu(&mut self, cmd: &ApduCommand) -> ApduResponse {
        if cmd.cla != CLA_PROPRIETARY {
            return ApduResponse::status(SW_CLA_NOT_SUPPORTED);
        }
        match cmd.ins {
            INS_MATCH_HASHES => {
                let Some(candidate) = Digest::from_slice(&cmd.data) else {
                    return ApduResponse::status(SW_WRONG_DATA);
                };
                if self.mode != Mode::Active {
                    return ApduResponse::status(SW_CONDITIONS_NOT_SATISFIED);
                }
                let benchmark = self.benchmark.expect("benchmark set while active");
                ApduResponse::ok(vec![compare(&candidate, &benchmark).is_match() as u8])
            }
            INS_GET_LOG_ENTRY => match self.log.get(cmd.p1p2() as usize) {
                Some(entry) => ApduResponse::ok(entry.encode()),
                None => ApduResponse::status(SW_NOT_FOUND),
            },
            INS_SET_BENCHMARK => {
                let Some(receipt) = Digest::from_slice(&cmd.data) else {
                    return ApduResponse::status(SW_WRONG_DATA);
                };
                match self.confirm_benchmark(&receipt) {
                    Ok(()) => ApduResponse::ok(Vec::new()),
                    Err(AppletError::ReceiptMismatch) => ApduResponse::status(SW_WRONG_DATA),
                    Err(_) => ApduResponse::status(SW_CONDITIONS_NOT_SATISFIED),
                }
            }
            INS_GET_STATE => ApduResponse::ok(vec![self.mode as u8]),
            _ => ApduResponse::status(SW_INS_NOT_SUPPORTED),
        }
    }
}

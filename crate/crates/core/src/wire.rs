//! Byte-exact codecs for everything that crosses a boundary: dispute packets,
//! transport frames, action codes and ISO 7816 short APDUs.
//!
//! Decoders are total: any input yields either a value or a [`WireError`].

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::measure::{Digest, DIGEST_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("Lc mismatch: declared {declared}, {available} bytes follow the header")]
    LcMismatch { declared: usize, available: usize },
    #[error("unknown action code 0x{0:02x}")]
    UnknownCode(u8),
    #[error("unsupported frame version 0x{0:02x}")]
    UnsupportedVersion(u8),
    #[error("unknown frame type 0x{0:02x}")]
    UnknownMsgType(u8),
    #[error("frame payload of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
}

/// Forward-only reader over a byte slice.
#[derive(Debug)]
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn digest(&mut self) -> Result<Digest, WireError> {
        Ok(Digest::from_slice(self.take(DIGEST_LEN)?).unwrap())
    }

    pub(crate) fn finish(self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

/// The eight device actions an applet or verifier can order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ActionCode {
    Null = 0x00,
    InitiateInvestigation = 0x01,
    RestrictExecution = 0x02,
    IsolateDevice = 0x03,
    ContainDevice = 0x04,
    RevokeDevice = 0x05,
    QuarantineFile = 0x06,
    DeeperInvestigation = 0x07,
}

impl ActionCode {
    pub const ALL: [ActionCode; 8] = [
        ActionCode::Null,
        ActionCode::InitiateInvestigation,
        ActionCode::RestrictExecution,
        ActionCode::IsolateDevice,
        ActionCode::ContainDevice,
        ActionCode::RevokeDevice,
        ActionCode::QuarantineFile,
        ActionCode::DeeperInvestigation,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn label(self) -> &'static str {
        match self {
            ActionCode::Null => "null",
            ActionCode::InitiateInvestigation => "Initiate investigation",
            ActionCode::RestrictExecution => "Restrict application or software execution",
            ActionCode::IsolateDevice => "Isolate device",
            ActionCode::ContainDevice => "Contain device",
            ActionCode::RevokeDevice => "Revoke device",
            ActionCode::QuarantineFile => "Stop and quarantine a file",
            ActionCode::DeeperInvestigation => "Request deeper investigation",
        }
    }

    /// Actions that take the device out of service.
    pub fn blocks_device(self) -> bool {
        matches!(
            self,
            ActionCode::IsolateDevice | ActionCode::ContainDevice | ActionCode::RevokeDevice
        )
    }
}

impl TryFrom<u8> for ActionCode {
    type Error = WireError;

    fn try_from(id: u8) -> Result<Self, WireError> {
        ActionCode::ALL
            .get(id as usize)
            .copied()
            .ok_or(WireError::UnknownCode(id))
    }
}

impl fmt::Display for ActionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02x} {}", self.id(), self.label())
    }
}

/// Label for a raw action byte.
pub fn action_name(code: u8) -> Result<&'static str, WireError> {
    ActionCode::try_from(code).map(ActionCode::label)
}

pub const ID_MIN_LEN: usize = 5;
pub const ID_MAX_LEN: usize = 7;
pub const TIMESTAMP_MIN_LEN: usize = 7;
pub const TIMESTAMP_MAX_LEN: usize = 13;
pub const ACTION_FIELD_LEN: usize = 32;
pub const DISPUTE_MIN_LEN: usize = 2 + 2 * ID_MIN_LEN + TIMESTAMP_MIN_LEN + 3 * 32;
pub const DISPUTE_MAX_LEN: usize = 2 + 2 * ID_MAX_LEN + TIMESTAMP_MAX_LEN + 3 * 32;

/// Anomaly report sent by an applet when a scan does not match its benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DisputePacket {
    pub device_id: Vec<u8>,
    pub applet_id: Vec<u8>,
    /// Microseconds since the Unix epoch.
    pub timestamp: u64,
    pub current_hash: Digest,
    pub previous_hash: Digest,
    pub action_taken: ActionCode,
}

pub(crate) fn check_id(id: &[u8], field: &'static str) -> Result<(), WireError> {
    if (ID_MIN_LEN..=ID_MAX_LEN).contains(&id.len()) {
        Ok(())
    } else {
        Err(WireError::InvalidField(field))
    }
}

/// Big-endian, minimal length, left-padded with zeros to at least 7 bytes.
pub(crate) fn encode_timestamp(ts: u64) -> Vec<u8> {
    let be = ts.to_be_bytes();
    let skip = be.iter().take_while(|&&b| b == 0).count();
    let minimal = &be[skip..];
    let mut out = vec![0u8; TIMESTAMP_MIN_LEN.saturating_sub(minimal.len())];
    out.extend_from_slice(minimal);
    out
}

/// Accepts only the canonical form produced by [`encode_timestamp`], so that
/// every packet has exactly one encoding.
pub(crate) fn decode_timestamp(bytes: &[u8]) -> Result<u64, WireError> {
    if !(TIMESTAMP_MIN_LEN..=TIMESTAMP_MAX_LEN).contains(&bytes.len()) {
        return Err(WireError::InvalidField("timestamp length"));
    }
    let skip = bytes.iter().take_while(|&&b| b == 0).count();
    let significant = &bytes[skip..];
    if significant.len() > 8 {
        return Err(WireError::InvalidField("timestamp exceeds 64 bits"));
    }
    let mut be = [0u8; 8];
    be[8 - significant.len()..].copy_from_slice(significant);
    let ts = u64::from_be_bytes(be);
    if encode_timestamp(ts).len() != bytes.len() {
        return Err(WireError::InvalidField("timestamp not canonical"));
    }
    Ok(ts)
}

impl DisputePacket {
    pub fn validate(&self) -> Result<(), WireError> {
        check_id(&self.device_id, "device_id length")?;
        check_id(&self.applet_id, "applet_id length")
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.device_id.len()
            + self.applet_id.len()
            + encode_timestamp(self.timestamp).len()
            + 3 * 32
    }
}

/// Layout:
///
/// ```text
/// [len][device_id] [ts_len << 4 | len][applet_id] [timestamp]
/// [current_hash 32] [previous_hash 32] [action_taken 32]
/// ```
///
/// The timestamp length (7..=13) rides in the high nibble of the applet id
/// length byte, so the packet is self-delimiting with two bytes of framing
/// and every encoding is 115..=125 bytes long.
pub fn encode_dispute(packet: &DisputePacket) -> Result<Vec<u8>, WireError> {
    packet.validate()?;
    let ts = encode_timestamp(packet.timestamp);
    let mut out = Vec::with_capacity(packet.encoded_len());
    out.push(packet.device_id.len() as u8);
    out.extend_from_slice(&packet.device_id);
    out.push(((ts.len() as u8) << 4) | packet.applet_id.len() as u8);
    out.extend_from_slice(&packet.applet_id);
    out.extend_from_slice(&ts);
    out.extend_from_slice(packet.current_hash.as_bytes());
    out.extend_from_slice(packet.previous_hash.as_bytes());
    let mut action = [0u8; ACTION_FIELD_LEN];
    action[0] = packet.action_taken.id();
    out.extend_from_slice(&action);
    Ok(out)
}

pub fn decode_dispute(bytes: &[u8]) -> Result<DisputePacket, WireError> {
    let mut cur = Cursor::new(bytes);
    let device_len = cur.u8()? as usize;
    if !(ID_MIN_LEN..=ID_MAX_LEN).contains(&device_len) {
        return Err(WireError::InvalidField("device_id length"));
    }
    let device_id = cur.take(device_len)?.to_vec();
    let packed = cur.u8()?;
    let (ts_len, applet_len) = ((packed >> 4) as usize, (packed & 0x0f) as usize);
    if !(ID_MIN_LEN..=ID_MAX_LEN).contains(&applet_len) {
        return Err(WireError::InvalidField("applet_id length"));
    }
    if !(TIMESTAMP_MIN_LEN..=TIMESTAMP_MAX_LEN).contains(&ts_len) {
        return Err(WireError::InvalidField("timestamp length"));
    }
    let applet_id = cur.take(applet_len)?.to_vec();
    let timestamp = decode_timestamp(cur.take(ts_len)?)?;
    let current_hash = cur.digest()?;
    let previous_hash = cur.digest()?;
    let action = cur.take(ACTION_FIELD_LEN)?;
    if action[1..].iter().any(|&b| b != 0) {
        return Err(WireError::InvalidField("action_taken reserved bytes"));
    }
    let action_taken =
        ActionCode::try_from(action[0]).map_err(|_| WireError::InvalidField("action code"))?;
    cur.finish()?;
    Ok(DisputePacket {
        device_id,
        applet_id,
        timestamp,
        current_hash,
        previous_hash,
        action_taken,
    })
}

/// Transport message types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Dispute = 0x01,
    DisputeResponse = 0x02,
    LogArchive = 0x03,
    UpdateNotify = 0x04,
    ProvisionMeasurement = 0x05,
    ProvisionConfirm = 0x06,
    ControlAction = 0x07,
    /// Error reply; payload is a UTF-8 message whose first word names the
    /// error class.
    Error = 0x7f,
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x01 => MsgType::Dispute,
            0x02 => MsgType::DisputeResponse,
            0x03 => MsgType::LogArchive,
            0x04 => MsgType::UpdateNotify,
            0x05 => MsgType::ProvisionMeasurement,
            0x06 => MsgType::ProvisionConfirm,
            0x07 => MsgType::ControlAction,
            0x7f => MsgType::Error,
            other => return Err(WireError::UnknownMsgType(other)),
        })
    }
}

pub const FRAME_VERSION: u8 = 0x01;
pub const FRAME_HEADER_LEN: usize = 6;
pub const MAX_FRAME_PAYLOAD: usize = 1 << 20;

/// `[version][msg_type][u32 BE payload length][payload]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }

    pub fn error(class: &str, detail: impl fmt::Display) -> Self {
        Frame::new(MsgType::Error, format!("{class}: {detail}").into_bytes())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.push(FRAME_VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        let mut cur = Cursor::new(bytes);
        let (msg_type, len) = parse_header(cur.take(FRAME_HEADER_LEN)?)?;
        let payload = cur.take(len)?.to_vec();
        cur.finish()?;
        Ok(Frame { msg_type, payload })
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Reads exactly one frame. Returns `Ok(None)` on a clean EOF before the
    /// first header byte.
    pub fn read_from(r: &mut impl Read) -> io::Result<Option<Frame>> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        let mut got = 0;
        while got < header.len() {
            match r.read(&mut header[got..])? {
                0 if got == 0 => return Ok(None),
                0 => return Err(io::ErrorKind::UnexpectedEof.into()),
                n => got += n,
            }
        }
        let (msg_type, len) = parse_header(&header)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Some(Frame { msg_type, payload }))
    }
}

fn parse_header(h: &[u8]) -> Result<(MsgType, usize), WireError> {
    if h[0] != FRAME_VERSION {
        return Err(WireError::UnsupportedVersion(h[0]));
    }
    let msg_type = MsgType::try_from(h[1])?;
    let len = u32::from_be_bytes(h[2..6].try_into().unwrap()) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(WireError::FrameTooLarge(len));
    }
    Ok((msg_type, len))
}

/// What the verifier tells an applet after a dispute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionKind {
    UpdateBenchmark(Digest),
    Action(ActionCode),
}

impl DecisionKind {
    /// DISPUTE_RESPONSE payload: `0x01 + digest` or `0x02 + action code`.
    pub fn encode(&self) -> Vec<u8> {
        match self {
            DecisionKind::UpdateBenchmark(d) => {
                let mut v = vec![0x01];
                v.extend_from_slice(d.as_bytes());
                v
            }
            DecisionKind::Action(code) => vec![0x02, code.id()],
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut cur = Cursor::new(bytes);
        let kind = match cur.u8()? {
            0x01 => DecisionKind::UpdateBenchmark(cur.digest()?),
            0x02 => DecisionKind::Action(ActionCode::try_from(cur.u8()?)?),
            _ => return Err(WireError::InvalidField("decision kind")),
        };
        cur.finish()?;
        Ok(kind)
    }
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecisionKind::UpdateBenchmark(d) => write!(f, "UpdateBenchmark({})", d.to_hex()),
            DecisionKind::Action(code) => write!(f, "Action(0x{:02x})", code.id()),
        }
    }
}

/// Proprietary class byte used by every applet command.
pub const CLA_PROPRIETARY: u8 = 0x80;
pub const INS_MATCH_HASHES: u8 = 0x10;
pub const INS_GET_LOG_ENTRY: u8 = 0x20;
pub const INS_SET_BENCHMARK: u8 = 0x30;
pub const INS_GET_STATE: u8 = 0x40;

pub const SW_OK: u16 = 0x9000;
pub const SW_WRONG_DATA: u16 = 0x6A80;
pub const SW_CONDITIONS_NOT_SATISFIED: u16 = 0x6985;
pub const SW_NOT_FOUND: u16 = 0x6A82;
pub const SW_INS_NOT_SUPPORTED: u16 = 0x6D00;
pub const SW_CLA_NOT_SUPPORTED: u16 = 0x6E00;

pub const APDU_MAX_DATA: usize = 255;

/// ISO 7816-4 short command APDU.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ApduCommand {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    pub le: Option<u8>,
}

impl ApduCommand {
    pub fn new(cla: u8, ins: u8, p1: u8, p2: u8, data: Vec<u8>) -> Self {
        ApduCommand {
            cla,
            ins,
            p1,
            p2,
            data,
            le: None,
        }
    }

    pub fn with_le(mut self, le: u8) -> Self {
        self.le = Some(le);
        self
    }

    pub fn match_hashes(digest: &Digest) -> Self {
        Self::new(CLA_PROPRIETARY, INS_MATCH_HASHES, 0, 0, digest.as_bytes().to_vec())
    }

    pub fn get_log_entry(index: u16) -> Self {
        let [p1, p2] = index.to_be_bytes();
        Self::new(CLA_PROPRIETARY, INS_GET_LOG_ENTRY, p1, p2, Vec::new())
    }

    pub fn set_benchmark(receipt: &Digest) -> Self {
        Self::new(CLA_PROPRIETARY, INS_SET_BENCHMARK, 0, 0, receipt.as_bytes().to_vec())
    }

    pub fn get_state() -> Self {
        Self::new(CLA_PROPRIETARY, INS_GET_STATE, 0, 0, Vec::new())
    }

    pub fn p1p2(&self) -> u16 {
        u16::from_be_bytes([self.p1, self.p2])
    }
}

/// `CLA INS P1 P2 [Lc data] [Le]` (cases 1 through 4, short form).
pub fn encode_apdu(cmd: &ApduCommand) -> Result<Vec<u8>, WireError> {
    if cmd.data.len() > APDU_MAX_DATA {
        return Err(WireError::InvalidField("APDU data longer than 255 bytes"));
    }
    let mut out = Vec::with_capacity(6 + cmd.data.len());
    out.extend_from_slice(&[cmd.cla, cmd.ins, cmd.p1, cmd.p2]);
    if !cmd.data.is_empty() {
        out.push(cmd.data.len() as u8);
        out.extend_from_slice(&cmd.data);
    }
    if let Some(le) = cmd.le {
        out.push(le);
    }
    Ok(out)
}

/// Case disambiguation: 4 bytes is case 1, 5 bytes is case 2 (the fifth byte
/// is Le). Longer input reads byte 4 as a nonzero Lc and must be followed by
/// exactly Lc data bytes (case 3) or Lc data bytes plus Le (case 4).
pub fn decode_apdu(bytes: &[u8]) -> Result<ApduCommand, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let mut cmd = ApduCommand::new(bytes[0], bytes[1], bytes[2], bytes[3], Vec::new());
    let body = &bytes[4..];
    match body.len() {
        0 => {}
        1 => cmd.le = Some(body[0]),
        _ => {
            let lc = body[0] as usize;
            let rest = &body[1..];
            if lc == 0 {
                return Err(WireError::LcMismatch {
                    declared: 0,
                    available: rest.len(),
                });
            }
            if rest.len() == lc {
                cmd.data = rest.to_vec();
            } else if rest.len() == lc + 1 {
                cmd.data = rest[..lc].to_vec();
                cmd.le = Some(rest[lc]);
            } else if rest.len() < lc {
                return Err(WireError::Truncated);
            } else {
                return Err(WireError::LcMismatch {
                    declared: lc,
                    available: rest.len(),
                });
            }
        }
    }
    Ok(cmd)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduResponse {
    pub data: Vec<u8>,
    pub sw1: u8,
    pub sw2: u8,
}

impl ApduResponse {
    pub fn new(data: Vec<u8>, sw: u16) -> Self {
        let [sw1, sw2] = sw.to_be_bytes();
        ApduResponse { data, sw1, sw2 }
    }

    pub fn status(sw: u16) -> Self {
        Self::new(Vec::new(), sw)
    }

    pub fn ok(data: Vec<u8>) -> Self {
        Self::new(data, SW_OK)
    }

    pub fn sw(&self) -> u16 {
        u16::from_be_bytes([self.sw1, self.sw2])
    }

    pub fn is_ok(&self) -> bool {
        self.sw() == SW_OK
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.data.clone();
        out.push(self.sw1);
        out.push(self.sw2);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < 2 {
            return Err(WireError::Truncated);
        }
        let (data, sw) = bytes.split_at(bytes.len() - 2);
        Ok(ApduResponse {
            data: data.to_vec(),
            sw1: sw[0],
            sw2: sw[1],
        })
    }
}

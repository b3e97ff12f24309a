//! Multi-device scenarios driven epoch by epoch on a simulated clock.
//!
//! Each epoch first applies that epoch's events (tampering, vendor
//! updates) and then scans every active device in index order. Disputes go
//! to every configured verifier and the unanimous decision, if any, is sent
//! back to the applet.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use devintegrity::applet::{encode_archive, Applet, Mode, PolicyConfig};
use devintegrity::config::{parse_bool, parse_kv_multi, parse_u8};
use devintegrity::immustore::{RootDigest, Store};
use devintegrity::measure::{composite_of, hash_bytes, measure_manifest, Digest, Manifest, MeasureError};
use devintegrity::pdl::Ledger;
use devintegrity::verifier::{
    decision_key, dispute_ref, quorum_decide, DisputeDecision, ManualClock, QuorumConfig, Verifier,
    VerifierService, Vote,
};
use devintegrity::wire::{encode_dispute, ActionCode, DecisionKind, Frame, MsgType};

use crate::consortium::{provision, Consortium, Transcript};
use crate::transport::{remote_error, InProcess, Tcp, Transport};
use crate::{Result, SimError};

/// Simulated wall clock at provisioning, in microseconds.
pub const BASE_TIME: u64 = 1_700_000_000_000_000;

pub const ARTIFACTS: [&str; 4] = ["bin/agent", "bin/firmware.img", "etc/device.conf", "lib/libcore.so"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TamperKind {
    ModifyArtifact,
    DeleteArtifact,
    Restore,
}

impl TamperKind {
    pub fn name(self) -> &'static str {
        match self {
            TamperKind::ModifyArtifact => "modify_artifact",
            TamperKind::DeleteArtifact => "delete_artifact",
            TamperKind::Restore => "restore",
        }
    }
}

impl fmt::Display for TamperKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TamperKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modify_artifact" | "modify" => Ok(TamperKind::ModifyArtifact),
            "delete_artifact" | "delete" => Ok(TamperKind::DeleteArtifact),
            "restore" => Ok(TamperKind::Restore),
            other => Err(SimError::ConfigInvalid(format!("unknown tamper kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Tamper(TamperKind),
    /// The vendor ships a new build of the device's software and installs
    /// it on that device.
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioEvent {
    pub device: usize,
    pub epoch: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::InProcess => "inprocess",
            TransportKind::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioConfig {
    pub device_count: usize,
    pub epochs: u64,
    /// Simulated microseconds between scans.
    pub scan_period: u64,
    pub events: Vec<ScenarioEvent>,
    pub policy: PolicyConfig,
    pub quorum: QuorumConfig,
    pub seed: u64,
    pub transport: TransportKind,
    /// All devices run one software id instead of one each.
    pub shared_software: bool,
    /// After an update the verifier side pushes the new benchmark to every
    /// active device registered for that software.
    pub push_updates: bool,
    pub default_action: ActionCode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            device_count: 1,
            epochs: 10,
            scan_period: 1_000_000,
            events: Vec::new(),
            policy: PolicyConfig::default(),
            quorum: QuorumConfig::single("verifier-1"),
            seed: 0,
            transport: TransportKind::InProcess,
            shared_software: false,
            push_updates: true,
            default_action: ActionCode::RevokeDevice,
        }
    }
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ConfigInvalid(msg.into())
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: not a number: {v:?}")))
}

/// `dev@epoch` or `dev@epoch:kind`.
fn parse_event(key: &str, v: &str) -> Result<ScenarioEvent> {
    let (target, kind) = match v.split_once(':') {
        Some((t, k)) => (t, Some(k.trim())),
        None => (v, None),
    };
    let (dev, epoch) = target
        .split_once('@')
        .ok_or_else(|| invalid(format!("{key}: expected device@epoch, got {v:?}")))?;
    let kind = match (key, kind) {
        ("tamper", Some(k)) => EventKind::Tamper(k.parse()?),
        ("tamper", None) => EventKind::Tamper(TamperKind::ModifyArtifact),
        ("update", None) => EventKind::Update,
        _ => return Err(invalid(format!("{key}: unexpected kind in {v:?}"))),
    };
    Ok(ScenarioEvent {
        device: parse_num(key, dev.trim())?,
        epoch: parse_num(key, epoch.trim())?,
        kind,
    })
}

pub fn verifier_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("verifier-{i}")).collect()
}

impl ScenarioConfig {
    /// Reads `key = value` text. `tamper` and `update` may repeat.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        for (k, v) in parse_kv_multi(text).map_err(invalid)? {
            let v = v.as_str();
            match k.as_str() {
                "devices" => cfg.device_count = parse_num(&k, v)?,
                "epochs" => cfg.epochs = parse_num(&k, v)?,
                "scan_period" => cfg.scan_period = parse_num(&k, v)?,
                "seed" => cfg.seed = parse_num(&k, v)?,
                "alarm_block_threshold" => cfg.policy.alarm_block_threshold = parse_num(&k, v)?,
                "autonomous_block" => cfg.policy.autonomous_block = parse_bool(v).map_err(invalid)?,
                "verifiers" => {
                    let n: usize = parse_num(&k, v)?;
                    cfg.quorum = QuorumConfig::new(verifier_ids(n)).map_err(invalid)?;
                }
                "transport" => {
                    cfg.transport = match v {
                        "inprocess" => TransportKind::InProcess,
                        "tcp" => TransportKind::Tcp,
                        other => return Err(invalid(format!("unknown transport {other:?}"))),
                    }
                }
                "shared_software" => cfg.shared_software = parse_bool(v).map_err(invalid)?,
                "push_updates" => cfg.push_updates = parse_bool(v).map_err(invalid)?,
                "default_action" => {
                    let code = parse_u8(v).map_err(invalid)?;
                    cfg.default_action = ActionCode::try_from(code).map_err(|e| invalid(e.to_string()))?;
                }
                "tamper" | "update" => cfg.events.push(parse_event(&k, v)?),
                other => return Err(invalid(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=999).contains(&self.device_count) {
            return Err(invalid("devices must be between 1 and 999"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be positive"));
        }
        if self.scan_period == 0 {
            return Err(invalid("scan_period must be positive"));
        }
        self.policy.validate().map_err(|e| invalid(e.to_string()))?;
        QuorumConfig::new(self.quorum.verifier_ids.clone()).map_err(invalid)?;
        for e in &self.events {
            if e.epoch >= self.epochs {
                return Err(invalid(format!("event epoch {} not below epochs {}", e.epoch, self.epochs)));
            }
            if e.device >= self.device_count {
                return Err(invalid(format!("event device {} out of range", e.device)));
            }
        }
        Ok(())
    }

    fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            scan_period: self.scan_period,
            ..self.policy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSummary {
    pub device_id: String,
    pub software_id: String,
    pub mode: Mode,
    pub scans: u64,
    pub disputes: u64,
    pub packets: u64,
    pub log_len: usize,
    pub archived: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Detection {
    Detected { epoch: u64, decision: String, packets: u64 },
    /// Undone by a restore or an update before any scan saw it.
    Reverted { epoch: u64 },
    Missed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionRecord {
    pub device_id: String,
    pub tamper_epoch: u64,
    pub kind: TamperKind,
    pub outcome: Detection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisputeRecord {
    pub device_id: String,
    pub epoch: u64,
    pub decision: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub seed: u64,
    pub device_count: usize,
    pub epochs: u64,
    pub verifiers: usize,
    pub devices: Vec<DeviceSummary>,
    pub detections: Vec<DetectionRecord>,
    pub disputes: Vec<DisputeRecord>,
    pub false_positives: u64,
    pub false_negatives: u64,
    /// Decision records per verifier store.
    pub decision_records: Vec<usize>,
    pub store_audit_ok: bool,
    pub ledger_audit_ok: bool,
    pub store_roots: Vec<Option<RootDigest>>,
    pub ledger_head: Digest,
}

impl DetectionReport {
    /// Line-oriented text form.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "devices {}", self.device_count);
        let _ = writeln!(s, "epochs {}", self.epochs);
        let _ = writeln!(s, "verifiers {}", self.verifiers);
        for d in &self.devices {
            let _ = writeln!(
                s,
                "device {} software {} mode {:?} scans {} disputes {} packets {} log {} archived {}",
                d.device_id, d.software_id, d.mode, d.scans, d.disputes, d.packets, d.log_len, d.archived
            );
        }
        for t in &self.detections {
            let outcome = match &t.outcome {
                Detection::Detected { epoch, decision, packets } => {
                    format!("detected {epoch} decision {decision} packets {packets}")
                }
                Detection::Reverted { epoch } => format!("reverted {epoch}"),
                Detection::Missed => "missed".into(),
            };
            let _ = writeln!(s, "tamper {} epoch {} {} {}", t.device_id, t.tamper_epoch, t.kind, outcome);
        }
        for d in &self.disputes {
            let _ = writeln!(s, "dispute {} epoch {} decision {}", d.device_id, d.epoch, d.decision);
        }
        let _ = writeln!(s, "false_positives {}", self.false_positives);
        let _ = writeln!(s, "false_negatives {}", self.false_negatives);
        let counts: Vec<_> = self.decision_records.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "decision_records {}", counts.join(" "));
        let _ = writeln!(s, "store_audit {}", if self.store_audit_ok { "ok" } else { "FAILED" });
        let _ = writeln!(s, "ledger_audit {}", if self.ledger_audit_ok { "ok" } else { "FAILED" });
        for (i, r) in self.store_roots.iter().enumerate() {
            match r {
                Some(r) => {
                    let _ = writeln!(s, "store_root {} {} {}", i + 1, r.head_index, r.head_chain_hash);
                }
                None => {
                    let _ = writeln!(s, "store_root {} empty", i + 1);
                }
            }
        }
        let _ = writeln!(s, "ledger_head {}", self.ledger_head);
        s
    }

    /// Tab-separated detection records. Columns: device, tamper_epoch,
    /// kind, outcome (detected|reverted|missed), epoch, decision, packets;
    /// `-` where not applicable.
    pub fn render_tsv(&self) -> String {
        let mut s = String::from("device\ttamper_epoch\tkind\toutcome\tepoch\tdecision\tpackets\n");
        for t in &self.detections {
            let (outcome, epoch, decision, packets) = match &t.outcome {
                Detection::Detected { epoch, decision, packets } => {
                    ("detected", epoch.to_string(), decision.clone(), packets.to_string())
                }
                Detection::Reverted { epoch } => ("reverted", epoch.to_string(), "-".into(), "-".into()),
                Detection::Missed => ("missed", "-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.device_id, t.tamper_epoch, t.kind, outcome, epoch, decision, packets
            );
        }
        s
    }

    pub fn total_disputes(&self) -> u64 {
        self.devices.iter().map(|d| d.disputes).sum()
    }
}

type Tree = BTreeMap<String, Vec<u8>>;

struct Device {
    id: Vec<u8>,
    software_id: String,
    manifest: Manifest,
    files: Tree,
    /// What the vendor last installed on this device.
    installed: Tree,
    applet: Applet,
    scans: u64,
    disputes: u64,
    packets: u64,
    archived: u64,
    /// Indices into the detection list still waiting for a dispute.
    pending: Vec<usize>,
}

fn random_tree(rng: &mut ChaCha8Rng) -> Tree {
    ARTIFACTS
        .iter()
        .map(|p| {
            let len = rng.gen_range(64..512);
            let mut bytes = vec![0u8; len];
            rng.fill(&mut bytes[..]);
            (p.to_string(), bytes)
        })
        .collect()
}

pub fn device_id(index: usize) -> Vec<u8> {
    format!("DEV{:03}", index + 1).into_bytes()
}

fn applet_id(index: usize) -> Vec<u8> {
    format!("AAP{:03}", index + 1).into_bytes()
}

fn tree_digest(tree: &Tree) -> Digest {
    composite_of(tree.values().map(|b| hash_bytes(b)).collect::<Vec<_>>().iter())
}

/// Builds the verifier services for a scenario. All verifiers share one
/// ledger and one simulated clock.
pub fn build_services(
    quorum: &QuorumConfig,
    default_action: ActionCode,
    ledger: Arc<RwLock<Ledger>>,
    clock: Arc<ManualClock>,
) -> Vec<(String, Arc<VerifierService>)> {
    quorum
        .verifier_ids
        .iter()
        .map(|id| {
            let v = Verifier::new(id, Store::in_memory()).with_default_action(default_action);
            (id.clone(), Arc::new(VerifierService::new(v, Arc::clone(&ledger), clock.clone())))
        })
        .collect()
}

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha8Rng,
    consortium: Consortium,
    ledger: Arc<RwLock<Ledger>>,
    clock: Arc<ManualClock>,
    services: Vec<(String, Arc<VerifierService>)>,
    transport: Box<dyn Transport>,
    devices: Vec<Device>,
    /// Latest vendor-approved tree per software id.
    approved: BTreeMap<String, Tree>,
    detections: Vec<DetectionRecord>,
    disputes: Vec<DisputeRecord>,
    false_positives: u64,
}

impl Run<'_> {
    fn send_all(&mut self, frame: &Frame) -> Result<Vec<Frame>> {
        (0..self.transport.verifier_count())
            .map(|i| self.transport.exchange(i, frame))
            .collect()
    }

    fn apply_event(&mut self, ev: &ScenarioEvent, epoch: u64) -> Result<()> {
        match ev.kind {
            EventKind::Tamper(TamperKind::Restore) => {
                let dev = &mut self.devices[ev.device];
                dev.files = dev.installed.clone();
                for i in dev.pending.drain(..) {
                    self.detections[i].outcome = Detection::Reverted { epoch };
                }
            }
            EventKind::Tamper(kind) => {
                let dev = &mut self.devices[ev.device];
                let paths: Vec<String> = dev.files.keys().cloned().collect();
                if !paths.is_empty() {
                    let path = &paths[self.rng.gen_range(0..paths.len())];
                    if kind == TamperKind::DeleteArtifact {
                        dev.files.remove(path);
                    } else {
                        let bytes = dev.files.get_mut(path).expect("path listed");
                        let at = self.rng.gen_range(0..bytes.len());
                        bytes[at] ^= 1 << self.rng.gen_range(0..8);
                    }
                }
                dev.pending.push(self.detections.len());
                self.detections.push(DetectionRecord {
                    device_id: String::from_utf8_lossy(&dev.id).into_owned(),
                    tamper_epoch: ev.epoch,
                    kind,
                    outcome: Detection::Missed,
                });
            }
            EventKind::Update => self.ship_update(ev.device, epoch)?,
        }
        Ok(())
    }

    fn ship_update(&mut self, index: usize, epoch: u64) -> Result<()> {
        let software_id = self.devices[index].software_id.clone();
        let mut tree = self.approved[&software_id].clone();
        let firmware = tree.get_mut("bin/firmware.img").expect("firmware artifact");
        firmware.extend_from_slice(format!("build-{epoch}").as_bytes());
        let new_hash = tree_digest(&tree);

        let notification = {
            let mut ledger = self.ledger.write().expect("ledger lock");
            self.consortium.ship_update(&mut ledger, &software_id, new_hash)?
        };
        let request = Frame::new(MsgType::UpdateNotify, notification.encode());
        for reply in self.send_all(&request)? {
            if reply.msg_type != MsgType::UpdateNotify {
                return Err(remote_error(&reply));
            }
        }

        let dev = &mut self.devices[index];
        dev.files = tree.clone();
        dev.installed = tree.clone();
        for i in dev.pending.drain(..) {
            self.detections[i].outcome = Detection::Reverted { epoch };
        }
        self.approved.insert(software_id.clone(), tree);

        if self.cfg.push_updates {
            let push = Frame::new(MsgType::DisputeResponse, DecisionKind::UpdateBenchmark(new_hash).encode());
            let targets = self.services[0].1.with_verifier(|v| v.devices_running(&software_id));
            for dev in &mut self.devices {
                if targets.contains(&dev.id) && dev.applet.mode() == Mode::Active {
                    dev.applet.handle_frame(&push)?;
                }
            }
        }
        Ok(())
    }

    fn scan(&mut self, index: usize, epoch: u64, now: u64) -> Result<()> {
        let dev = &mut self.devices[index];
        if dev.applet.mode() != Mode::Active {
            return Ok(());
        }
        dev.scans += 1;
        let outcome = match measure_manifest(&dev.manifest, &dev.files, now) {
            Ok(report) => dev.applet.scan_epoch(&report, now)?,
            Err(MeasureError::MissingArtifact(path)) => dev.applet.scan_missing_artifact(&path, now)?,
            Err(e) => return Err(e.into()),
        };
        let id = dev.id.clone();

        if let Some(batch) = &outcome.archive {
            let frame = Frame::new(MsgType::LogArchive, encode_archive(&id, batch)?);
            for reply in self.send_all(&frame)? {
                if reply.msg_type != MsgType::LogArchive {
                    return Err(remote_error(&reply));
                }
            }
            let dev = &mut self.devices[index];
            dev.archived += batch.len() as u64;
            dev.packets += 2 * self.transport.verifier_count() as u64;
        }

        let Some(packet) = outcome.dispute else {
            return Ok(());
        };
        let request = Frame::new(MsgType::Dispute, encode_dispute(&packet)?);
        let replies = self.send_all(&request)?;
        let packets = 2 * replies.len() as u64;
        let reference = dispute_ref(&packet)?;
        let mut votes = Vec::with_capacity(replies.len());
        for (i, reply) in replies.iter().enumerate() {
            if reply.msg_type != MsgType::DisputeResponse {
                return Err(remote_error(reply));
            }
            votes.push(Vote {
                verifier_id: self.transport.verifier_id(i).to_owned(),
                decision: DisputeDecision {
                    kind: DecisionKind::decode(&reply.payload)?,
                    dispute_ref: reference,
                    decided_at: now,
                },
            });
        }
        let decided = quorum_decide(&self.cfg.quorum, &votes);

        let dev = &mut self.devices[index];
        dev.disputes += 1;
        dev.packets += packets;
        let decision = match &decided {
            Ok(d) => {
                let reply = Frame::new(MsgType::DisputeResponse, d.kind.encode());
                dev.applet.handle_frame(&reply)?;
                d.kind.to_string()
            }
            Err(e) => e.class().to_owned(),
        };
        let blocking = outcome.autonomous_action.is_some()
            || matches!(&decided, Ok(d) if matches!(d.kind, DecisionKind::Action(a) if a.blocks_device()));
        let clean = dev.files == self.approved[&dev.software_id];
        if clean && blocking {
            self.false_positives += 1;
        }
        for i in dev.pending.drain(..) {
            self.detections[i].outcome = Detection::Detected {
                epoch,
                decision: decision.clone(),
                packets,
            };
        }
        self.disputes.push(DisputeRecord {
            device_id: String::from_utf8_lossy(&id).into_owned(),
            epoch,
            decision,
        });
        Ok(())
    }
}

/// Provisions the fleet and runs every epoch. Deterministic for a fixed
/// configuration.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<DetectionReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let consortium = Consortium::new(cfg.seed);
    let ledger = Arc::new(RwLock::new(consortium.new_ledger()?));
    let clock = Arc::new(ManualClock::new(BASE_TIME));
    let services = build_services(&cfg.quorum, cfg.default_action, Arc::clone(&ledger), Arc::clone(&clock));
    let mut transport: Box<dyn Transport> = match cfg.transport {
        TransportKind::InProcess => Box::new(InProcess::new(services.clone())),
        TransportKind::Tcp => Box::new(Tcp::start(services.clone())?),
    };

    let mut approved = BTreeMap::new();
    let mut devices = Vec::with_capacity(cfg.device_count);
    for index in 0..cfg.device_count {
        let id = device_id(index);
        let software_id = if cfg.shared_software {
            "fw-fleet".to_owned()
        } else {
            format!("fw-{}", String::from_utf8_lossy(&id).to_lowercase())
        };
        if !approved.contains_key(&software_id) {
            let tree = random_tree(&mut rng);
            let mut l = ledger.write().expect("ledger lock");
            consortium.register_benchmark(&mut l, &software_id, tree_digest(&tree))?;
            approved.insert(software_id.clone(), tree);
        }
        let tree: Tree = approved[&software_id].clone();
        let manifest = Manifest::new(&software_id, ARTIFACTS)?;
        let mut applet = Applet::new(&id, &applet_id(index), cfg.policy())?;
        let report = measure_manifest(&manifest, &tree, BASE_TIME)?;
        provision(&mut applet, report, transport.as_mut(), &mut Transcript::default())?;
        devices.push(Device {
            id,
            software_id,
            manifest,
            files: tree.clone(),
            installed: tree,
            applet,
            scans: 0,
            disputes: 0,
            packets: 0,
            archived: 0,
            pending: Vec::new(),
        });
    }

    let mut run = Run {
        cfg,
        rng,
        consortium,
        ledger: Arc::clone(&ledger),
        clock: Arc::clone(&clock),
        services,
        transport,
        devices,
        approved,
        detections: Vec::new(),
        disputes: Vec::new(),
        false_positives: 0,
    };

    for epoch in 0..cfg.epochs {
        let now = BASE_TIME + (epoch + 1) * cfg.scan_period;
        run.clock.set(now);
        for ev in cfg.events.iter().filter(|e| e.epoch == epoch) {
            run.apply_event(ev, epoch)?;
        }
        for index in 0..run.devices.len() {
            run.scan(index, epoch, now)?;
        }
    }

    finish(run)
}

fn finish(run: Run<'_>) -> Result<DetectionReport> {
    let cfg = run.cfg;
    let mut store_audit_ok = true;
    let mut decision_records = Vec::new();
    let mut store_roots = Vec::new();
    for (_, svc) in &run.services {
        svc.with_verifier(|v| -> Result<()> {
            let store = v.store();
            store_audit_ok &= store
                .audit_chain()
                .map_err(devintegrity::verifier::VerifierError::StoreUnavailable)?
                .is_ok();
            decision_records.push(
                run.devices
                    .iter()
                    .map(|d| store.count_key(&decision_key(&d.id)))
                    .sum(),
            );
            store_roots.push(store.root());
            Ok(())
        })?;
    }
    let ledger = run.ledger.read().expect("ledger lock");
    let ledger_audit_ok = ledger.verify_ledger()?.is_ok();
    let false_negatives = run
        .detections
        .iter()
        .filter(|d| d.outcome == Detection::Missed)
        .count() as u64;
    Ok(DetectionReport {
        seed: cfg.seed,
        device_count: cfg.device_count,
        epochs: cfg.epochs,
        verifiers: cfg.quorum.verifier_ids.len(),
        devices: run
            .devices
            .iter()
            .map(|d| DeviceSummary {
                device_id: String::from_utf8_lossy(&d.id).into_owned(),
                software_id: d.software_id.clone(),
                mode: d.applet.mode(),
                scans: d.scans,
                disputes: d.disputes,
                packets: d.packets,
                log_len: d.applet.log().len(),
                archived: d.archived,
            })
            .collect(),
        detections: run.detections.clone(),
        disputes: run.disputes.clone(),
        false_positives: run.false_positives,
        false_negatives,
        decision_records,
        store_audit_ok,
        ledger_audit_ok,
        store_roots,
        ledger_head: ledger.head_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ScenarioConfig {
        ScenarioConfig::parse(text).unwrap()
    }

    #[test]
    fn parse_config() {
        let c = cfg("devices = 3\nepochs = 20\nseed = 7\nverifiers = 2\ntamper = 1@4:delete_artifact\nupdate = 2@5\ntransport = tcp\n");
        assert_eq!(c.device_count, 3);
        assert_eq!(c.quorum.verifier_ids, vec!["verifier-1", "verifier-2"]);
        assert_eq!(
            c.events,
            vec![
                ScenarioEvent { device: 1, epoch: 4, kind: EventKind::Tamper(TamperKind::DeleteArtifact) },
                ScenarioEvent { device: 2, epoch: 5, kind: EventKind::Update },
            ]
        );
        assert_eq!(c.transport, TransportKind::Tcp);
        for bad in ["epochs = 5\ntamper = 0@5:modify\n", "devices = 2\ntamper = 2@1\n", "bogus = 1\n", "tamper = 0@1:melt\n", "verifiers = 0\n"] {
            assert!(matches!(ScenarioConfig::parse(bad), Err(SimError::ConfigInvalid(_))), "{bad}");
        }
    }

    #[test]
    fn null_scenario() {
        let r = run_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(r.total_disputes(), 0);
        assert_eq!(r.devices[0].scans, 10);
        assert_eq!(r.devices[0].log_len, 10);
        assert!(r.store_audit_ok && r.ledger_audit_ok);
    }

    #[test]
    fn tamper_detected_same_epoch() {
        let r = run_scenario(&cfg("epochs = 10\ntamper = 0@4:modify_artifact\n")).unwrap();
        assert_eq!(
            r.detections[0].outcome,
            Detection::Detected { epoch: 4, decision: "Action(0x05)".into(), packets: 2 }
        );
        assert_eq!(r.devices[0].mode, Mode::Blocked);
        assert_eq!(r.false_negatives, 0);
        assert_eq!(r.decision_records, vec![1]);
    }

    #[test]
    fn deletion_is_an_anomaly() {
        let r = run_scenario(&cfg("epochs = 3\ntamper = 0@1:delete_artifact\n")).unwrap();
        assert!(matches!(r.detections[0].outcome, Detection::Detected { epoch: 1, .. }));
    }

    #[test]
    fn restore_before_scan_reverts() {
        let r = run_scenario(&cfg("epochs = 5\ndefault_action = 0x01\nautonomous_block = false\ntamper = 0@1\ntamper = 0@2:restore\n")).unwrap();
        assert!(matches!(r.detections[0].outcome, Detection::Detected { epoch: 1, .. }));
        assert_eq!(r.devices[0].disputes, 1);
        assert_eq!(r.devices[0].mode, Mode::Active);
    }

    #[test]
    fn update_with_push_raises_no_dispute() {
        let r = run_scenario(&cfg("epochs = 6\nupdate = 0@2\n")).unwrap();
        assert_eq!(r.total_disputes(), 0);
        assert_eq!(r.false_positives, 0);
    }

    #[test]
    fn unpushed_update_takes_the_update_branch() {
        let r = run_scenario(&cfg("epochs = 6\npush_updates = false\ntamper = 0@2\nupdate = 0@2\n")).unwrap();
        assert_eq!(r.disputes.len(), 1);
        assert!(r.disputes[0].decision.starts_with("UpdateBenchmark("));
        assert_eq!(r.false_positives, 0);
        assert_eq!(r.devices[0].mode, Mode::Active);
        assert_eq!(r.devices[0].disputes, 1);
    }

    #[test]
    fn report_formats() {
        let r = run_scenario(&cfg("devices = 2\nepochs = 3\ntamper = 1@1\n")).unwrap();
        let text = r.render_text();
        assert!(text.contains("tamper DEV002 epoch 1 modify_artifact detected 1 decision Action(0x05) packets 2\n"));
        let tsv = r.render_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert_eq!(tsv.lines().nth(1).unwrap(), "DEV002\t1\tmodify_artifact\tdetected\t1\tAction(0x05)\t2");
    }
}

//! Applet trajectories against a plain reference model, over every scan
//! sequence of length 6 drawn from {benchmark, X, Y} and four policies.

use devintegrity::applet::{Applet, AppletError, LogEntry, LogRing, Mode, PolicyConfig, LOG_CAPACITY};
use devintegrity::measure::{hash_bytes, MeasurementReport};
use devintegrity::wire::ActionCode;
use devintegrity::Digest;
use proptest::prelude::*;

#[derive(Debug, Clone, PartialEq)]
struct Emission {
    entry: (u64, Digest, Digest, u8),
    dispute: Option<(Digest, Digest, u8)>,
    autonomous: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
struct Step {
    mode: &'static str,
    alarms: u32,
    emitted: Option<Emission>,
}

struct Model {
    benchmark: Digest,
    threshold: u32,
    autonomous: bool,
    blocked: bool,
    alarms: u32,
    last: Digest,
}

impl Model {
    fn step(&mut self, h: Digest, t: u64) -> Step {
        if self.blocked {
            return Step { mode: "blocked", alarms: self.alarms, emitted: None };
        }
        let emitted = if h == self.benchmark {
            self.alarms = 0;
            Emission { entry: (t, h, h, 0x00), dispute: None, autonomous: None }
        } else {
            self.alarms += 1;
            let block = self.autonomous && self.alarms >= self.threshold;
            let code = if block { 0x05 } else { 0x01 };
            if block {
                self.blocked = true;
            }
            Emission {
                entry: (t, h, self.last, code),
                dispute: Some((h, self.last, code)),
                autonomous: block.then_some(code),
            }
        };
        self.last = h;
        Step {
            mode: if self.blocked { "blocked" } else { "active" },
            alarms: self.alarms,
            emitted: Some(emitted),
        }
    }
}

fn report(h: Digest) -> MeasurementReport {
    MeasurementReport {
        software_id: "fw".into(),
        per_artifact: vec![],
        composite: h,
        measured_at: 0,
    }
}

fn real_step(a: &mut Applet, h: Digest, t: u64) -> Step {
    let emitted = match a.scan_epoch(&report(h), t) {
        Ok(o) => Some(Emission {
            entry: (o.entry.t_s, o.entry.current_hash, o.entry.previous_hash, o.entry.action_taken.id()),
            dispute: o.dispute.map(|d| (d.current_hash, d.previous_hash, d.action_taken.id())),
            autonomous: o.autonomous_action.map(ActionCode::id),
        }),
        Err(AppletError::WrongState { .. }) => None,
        Err(e) => panic!("unexpected error {e}"),
    };
    Step {
        mode: match a.mode() {
            Mode::Active => "active",
            Mode::Blocked => "blocked",
            m => panic!("unexpected mode {m:?}"),
        },
        alarms: a.consecutive_alarms(),
        emitted,
    }
}

fn provisioned(b: Digest, policy: PolicyConfig) -> Applet {
    let mut a = Applet::new(b"DEV01", b"AAP01", policy).unwrap();
    a.submit_initial_measurement(report(b)).unwrap();
    a.confirm_benchmark(&b).unwrap();
    a
}

#[test]
fn exhaustive_equivalence() {
    let b = hash_bytes(b"benchmark");
    let inputs = [b, hash_bytes(b"x"), hash_bytes(b"y")];
    let policies: Vec<(u32, bool)> = vec![(1, true), (2, true), (3, true), (3, false)];
    let mut cases = 0;
    for &(threshold, autonomous) in &policies {
        for code in 0..3usize.pow(6) {
            let seq: Vec<Digest> = (0..6).map(|i| inputs[code / 3usize.pow(i) % 3]).collect();
            let policy = PolicyConfig { alarm_block_threshold: threshold, autonomous_block: autonomous, ..Default::default() };
            let mut real = provisioned(b, policy);
            let mut model = Model { benchmark: b, threshold, autonomous, blocked: false, alarms: 0, last: b };
            for (t, &h) in seq.iter().enumerate() {
                let t = 1_000 + t as u64;
                assert_eq!(real_step(&mut real, h, t), model.step(h, t), "policy {threshold}/{autonomous} seq {code}");
                real.check_invariants().unwrap();
            }
            cases += 1;
        }
    }
    assert_eq!(cases, 2916);
}

#[derive(Debug, Clone)]
enum RingOp {
    Append,
    Stall,
}

proptest! {
    #[test]
    fn ring_stays_bounded(ops in proptest::collection::vec(prop_oneof![4 => Just(RingOp::Append), 1 => Just(RingOp::Stall)], 0..600)) {
        let mut ring = LogRing::new();
        let mut logical = 0u64;
        let mut t = 0u64;
        for op in ops {
            if let RingOp::Stall = op {
                t += 1;
                continue;
            }
            let flushed = ring
                .append(LogEntry { t_s: t, current_hash: Digest::ZERO, previous_hash: Digest::ZERO, action_taken: ActionCode::Null })
                .unwrap();
            logical += 1;
            prop_assert!(ring.len() <= LOG_CAPACITY);
            if logical > LOG_CAPACITY as u64 && (logical - 1).is_multiple_of(LOG_CAPACITY as u64) {
                prop_assert_eq!(flushed.map(|b| b.len()), Some(LOG_CAPACITY));
            } else {
                prop_assert!(flushed.is_none());
            }
            prop_assert_eq!(ring.len() as u64, (logical - 1) % LOG_CAPACITY as u64 + 1);
        }
    }

    #[test]
    fn ring_rejects_time_going_backwards((t, back) in (1u64..1000).prop_flat_map(|t| (Just(t), 1..=t))) {
        let mut ring = LogRing::new();
        let e = |t_s| LogEntry { t_s, current_hash: Digest::ZERO, previous_hash: Digest::ZERO, action_taken: ActionCode::Null };
        ring.append(e(t)).unwrap();
        prop_assert!(ring.append(e(t - back)).is_err());
        prop_assert!(ring.append(e(t)).is_ok());
    }
}

#[test]
fn hundred_twenty_sixth_append_flushes() {
    let b = hash_bytes(b"b");
    let mut a = provisioned(b, PolicyConfig::default());
    for t in 0..125 {
        assert!(a.scan_epoch(&report(b), t).unwrap().archive.is_none());
    }
    assert_eq!(a.log().len(), 125);
    let out = a.scan_epoch(&report(b), 125).unwrap();
    let batch = out.archive.unwrap();
    assert_eq!(batch.len(), 125);
    assert_eq!(batch[0].t_s, 0);
    assert_eq!(a.log().len(), 1);
}

use devintegrity::applet::Mode;
use devintegrity::verifier::QuorumConfig;
use devintegrity_sim::scenario::*;
use proptest::prelude::*;

fn quorum(n: usize) -> QuorumConfig {
    QuorumConfig::new(verifier_ids(n)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tamper_free_runs_have_no_false_positives(
        devices in 1usize..6, epochs in 1u64..150, seed in any::<u64>(),
        verifiers in 1usize..4, threshold in 1u32..4, autonomous in any::<bool>())
    {
        let mut cfg = ScenarioConfig { device_count: devices, epochs, seed, quorum: quorum(verifiers), ..Default::default() };
        cfg.policy.alarm_block_threshold = threshold;
        cfg.policy.autonomous_block = autonomous;
        let r = run_scenario(&cfg).unwrap();
        prop_assert_eq!(r.false_positives, 0);
        prop_assert_eq!(r.total_disputes(), 0);
        for d in &r.devices {
            prop_assert_eq!(d.scans, epochs);
            prop_assert_eq!(d.log_len as u64 + d.archived, epochs);
        }
        prop_assert!(r.store_audit_ok && r.ledger_audit_ok);
    }

    #[test]
    fn unrestored_tampers_are_detected_within_an_epoch(
        seed in any::<u64>(),
        events in proptest::collection::vec((0usize..4, 0u64..30, any::<bool>()), 1..6))
    {
        let events: Vec<ScenarioEvent> = events
            .into_iter()
            .map(|(device, epoch, delete)| ScenarioEvent {
                device,
                epoch,
                kind: EventKind::Tamper(if delete { TamperKind::DeleteArtifact } else { TamperKind::ModifyArtifact }),
            })
            .collect();
        let cfg = ScenarioConfig { device_count: 4, epochs: 30, seed, events, ..Default::default() };
        let a = run_scenario(&cfg).unwrap();
        prop_assert_eq!(a.render_text(), run_scenario(&cfg).unwrap().render_text());
        prop_assert_eq!(a.false_positives, 0);
        for t in &a.detections {
            let dev = a.devices.iter().find(|d| d.device_id == t.device_id).unwrap();
            match &t.outcome {
                Detection::Detected { epoch, .. } => prop_assert!(*epoch >= t.tamper_epoch && *epoch <= t.tamper_epoch + 1),
                // A revoked device stops scanning, so later tampers go unseen.
                Detection::Missed => prop_assert_eq!(dev.mode, Mode::Blocked),
                Detection::Reverted { .. } => prop_assert!(false, "no restores scheduled"),
            }
        }
        let handled: usize = a.devices.iter().map(|d| d.disputes as usize).sum();
        prop_assert!(a.decision_records.iter().all(|&n| n == handled));
    }
}

#[test]
fn tcp_and_in_process_reports_agree() {
    let text = "devices = 3\nepochs = 20\nseed = 9\nverifiers = 2\ntamper = 0@3\ntamper = 2@7:delete_artifact\nupdate = 1@5\n";
    let mut cfg = ScenarioConfig::parse(text).unwrap();
    let local = run_scenario(&cfg).unwrap();
    cfg.transport = TransportKind::Tcp;
    let tcp = run_scenario(&cfg).unwrap();
    assert_eq!(local.render_text(), tcp.render_text());
    assert_eq!(local.render_tsv(), tcp.render_tsv());
}

#[test]
fn archives_reach_the_verifier() {
    let cfg = ScenarioConfig { epochs: 260, ..Default::default() };
    let r = run_scenario(&cfg).unwrap();
    assert_eq!(r.devices[0].archived, 250);
    assert_eq!(r.devices[0].log_len, 10);
    assert_eq!(r.store_roots[0].unwrap().head_index + 1, 1 + 1 + 250);
}

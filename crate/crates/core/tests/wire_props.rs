use devintegrity::applet::{decode_archive, decode_provision, LogEntry};
use devintegrity::immustore::Record;
use devintegrity::measure::MeasurementReport;
use devintegrity::pdl::{Block, Receipt};
use devintegrity::verifier::UpdateNotification;
use devintegrity::wire::*;
use devintegrity::Digest;
use proptest::prelude::*;

fn digest() -> impl Strategy<Value = Digest> {
    any::<[u8; 32]>().prop_map(Digest::from_bytes)
}

fn id() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(any::<u8>(), ID_MIN_LEN..=ID_MAX_LEN)
}

fn action() -> impl Strategy<Value = ActionCode> {
    (0u8..8).prop_map(|c| ActionCode::try_from(c).unwrap())
}

prop_compose! {
    fn dispute()(device_id in id(), applet_id in id(), timestamp in any::<u64>(),
                 current_hash in digest(), previous_hash in digest(), action_taken in action())
                 -> DisputePacket {
        DisputePacket { device_id, applet_id, timestamp, current_hash, previous_hash, action_taken }
    }
}

prop_compose! {
    fn apdu()(cla in any::<u8>(), ins in any::<u8>(), p1 in any::<u8>(), p2 in any::<u8>(),
              data in proptest::collection::vec(any::<u8>(), 0..=APDU_MAX_DATA),
              le in proptest::option::of(any::<u8>())) -> ApduCommand {
        let cmd = ApduCommand::new(cla, ins, p1, p2, data);
        match le { Some(le) => cmd.with_le(le), None => cmd }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn dispute_round_trip(p in dispute()) {
        let bytes = encode_dispute(&p).unwrap();
        prop_assert!((DISPUTE_MIN_LEN..=DISPUTE_MAX_LEN).contains(&bytes.len()));
        prop_assert_eq!(bytes.len(), p.encoded_len());
        prop_assert_eq!(decode_dispute(&bytes).unwrap(), p);
    }

    #[test]
    fn dispute_rejects_any_truncation_or_extension(p in dispute(), cut in 1usize..40, extra in 1usize..4) {
        let bytes = encode_dispute(&p).unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(decode_dispute(&bytes[..bytes.len() - cut]).is_err());
        let mut longer = bytes.clone();
        longer.extend(std::iter::repeat_n(0u8, extra));
        prop_assert_eq!(decode_dispute(&longer), Err(WireError::TrailingBytes(extra)));
    }

    #[test]
    fn apdu_round_trip(cmd in apdu()) {
        let bytes = encode_apdu(&cmd).unwrap();
        prop_assert_eq!(decode_apdu(&bytes).unwrap(), cmd);
    }

    #[test]
    fn apdu_response_round_trip(data in proptest::collection::vec(any::<u8>(), 0..=256), sw in any::<u16>()) {
        let r = ApduResponse::new(data, sw);
        prop_assert_eq!(ApduResponse::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn frame_round_trip(t in prop::sample::select(vec![1u8, 2, 3, 4, 5, 6, 7, 0x7f]),
                        payload in proptest::collection::vec(any::<u8>(), 0..2048)) {
        let f = Frame::new(MsgType::try_from(t).unwrap(), payload);
        let bytes = f.encode();
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f.clone());
        let mut r = &bytes[..];
        prop_assert_eq!(Frame::read_from(&mut r).unwrap(), Some(f));
    }

    #[test]
    fn decision_round_trip(d in digest(), a in action(), update in any::<bool>()) {
        let k = if update { DecisionKind::UpdateBenchmark(d) } else { DecisionKind::Action(a) };
        prop_assert_eq!(DecisionKind::decode(&k.encode()).unwrap(), k);
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode_dispute(&bytes);
        let _ = decode_apdu(&bytes);
        let _ = ApduResponse::decode(&bytes);
        let _ = Frame::decode(&bytes);
        let _ = Frame::read_from(&mut &bytes[..]);
        let _ = DecisionKind::decode(&bytes);
        let _ = LogEntry::decode(&bytes);
        let _ = decode_archive(&bytes);
        let _ = decode_provision(&bytes);
        let _ = MeasurementReport::decode(&bytes);
        let _ = UpdateNotification::decode(&bytes);
        let _ = Record::decode(&bytes);
        let _ = Block::decode(&bytes);
        let _ = Receipt::decode(&bytes);
    }
}

#[test]
fn minimal_dispute_is_115_bytes() {
    let p = DisputePacket {
        device_id: b"DEV01".to_vec(),
        applet_id: b"AAP01".to_vec(),
        timestamp: 0,
        current_hash: Digest::ZERO,
        previous_hash: Digest::ZERO,
        action_taken: ActionCode::Null,
    };
    assert_eq!(encode_dispute(&p).unwrap().len(), 115);
}

use devintegrity::immustore::{audit_bytes, audit_file, verify_inclusion, Durability, Record, Store};
use devintegrity::measure::hash_bytes;
use devintegrity::pdl::{verify_ledger_bytes, verify_ledger_file, ContractRecord, Endorsement, Ledger, PdlError, Role, Signer};
use devintegrity::Digest;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn filled_store(path: &std::path::Path, n: u64) -> Store {
    let mut s = Store::open(path, Durability::Batch).unwrap();
    for i in 0..n {
        s.append(Record::new(format!("fw-{}", i % 7), hash_bytes(&i.to_be_bytes()).as_bytes().to_vec(), i))
            .unwrap();
    }
    s.sync().unwrap();
    s
}

#[test]
fn store_bit_flips_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("s.store");
    drop(filled_store(&path, 100));
    let clean = std::fs::read(&path).unwrap();
    assert!(audit_bytes(&clean).is_ok());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mut bytes = clean.clone();
        let bit = rng.gen_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(!audit_file(&path).unwrap().is_ok(), "flip at bit {bit} missed");
    }
}

#[test]
fn every_record_has_a_valid_proof() {
    let tmp = tempfile::tempdir().unwrap();
    let s = filled_store(&tmp.path().join("s.store"), 40);
    let root = s.root().unwrap();
    for i in 0..40 {
        let proof = s.prove(i).unwrap();
        assert!(verify_inclusion(s.record(i).unwrap(), &proof, &root));
        let mut forged = s.record(i).unwrap().clone();
        forged.timestamp ^= 1;
        assert!(!verify_inclusion(&forged, &proof, &root));
    }
    let (latest, _) = s.get_latest(b"fw-3").unwrap();
    assert_eq!(latest.timestamp, 38);
}

struct Parties {
    signers: Vec<Signer>,
}

impl Parties {
    fn new() -> Self {
        Parties {
            signers: vec![
                Signer::from_seed("sp", Role::SolutionProvider, &[1; 32]),
                Signer::from_seed("vendor", Role::DeviceVendor, &[2; 32]),
                Signer::from_seed("service", Role::ServiceProvider, &[3; 32]),
            ],
        }
    }

    fn ledger(&self) -> Ledger {
        Ledger::in_memory(self.signers.iter().map(Signer::participant).collect()).unwrap()
    }

    fn endorse(&self, ledger: &Ledger, rec: &ContractRecord, mask: u8) -> Vec<Endorsement> {
        let body = ledger.next_block_body(std::slice::from_ref(rec));
        self.signers
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| s.endorse(&body))
            .collect()
    }
}

#[test]
fn quorum_enumeration_over_three_parties() {
    let p = Parties::new();
    for mask in 0u8..8 {
        let mut ledger = p.ledger();
        let rec = ContractRecord::benchmark("fw", hash_bytes(b"b"), "vendor");
        let sigs = p.endorse(&ledger, &rec, mask);
        let result = ledger.submit_contract(rec, sigs).map(|b| b.height);
        if mask.count_ones() >= 2 {
            assert_eq!(result.unwrap(), 0, "mask {mask:03b}");
        } else {
            assert!(matches!(result, Err(PdlError::QuorumNotMet { need: 2, .. })), "mask {mask:03b}");
        }
    }
}

#[test]
fn ledger_bit_flips_are_detected() {
    let p = Parties::new();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("l.ledger");
    let mut ledger = Ledger::create(&path, p.signers.iter().map(Signer::participant).collect()).unwrap();
    for i in 0..10u8 {
        let rec = ContractRecord::benchmark(&format!("fw-{i}"), hash_bytes(&[i]), "vendor");
        let sigs = p.endorse(&ledger, &rec, 0b011);
        ledger.submit_contract(rec, sigs).unwrap();
    }
    drop(ledger);
    let clean = std::fs::read(&path).unwrap();
    assert!(verify_ledger_bytes(&clean).is_ok());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let mut bytes = clean.clone();
        let bit = rng.gen_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(!verify_ledger_file(&path).unwrap().is_ok(), "flip at bit {bit} missed");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Benchmark lineage equals a replayed list, the ledger re-verifies
    /// after every accepted submission, and pinned-height queries do not
    /// move when later blocks arrive.
    #[test]
    fn lineage_matches_list_oracle(ops in proptest::collection::vec((0u8..3, any::<[u8; 4]>(), any::<bool>()), 1..20)) {
        let p = Parties::new();
        let mut ledger = p.ledger();
        let mut oracle: Vec<(String, Digest)> = Vec::new();
        let mut pinned = Vec::new();
        for (sw, seed, update) in ops {
            let id = format!("fw-{sw}");
            let h = hash_bytes(&seed);
            if update {
                let receipt = p.signers[0].confirm(&id, &h);
                let rec = ContractRecord::software_update(&id, h, Some(receipt), "vendor");
                let sigs = p.endorse(&ledger, &rec, 0b011);
                ledger.execute_update_contract(rec, sigs).unwrap();
            } else {
                let rec = ContractRecord::benchmark(&id, h, "vendor");
                let sigs = p.endorse(&ledger, &rec, 0b110);
                ledger.submit_contract(rec, sigs).unwrap();
            }
            oracle.push((id, h));
            prop_assert!(ledger.verify_ledger().unwrap().is_ok());
            for s in 0..3u8 {
                let id = format!("fw-{s}");
                let want = oracle.iter().rev().find(|(i, _)| *i == id).map(|(_, h)| *h);
                prop_assert_eq!(ledger.query_benchmark(&id).ok(), want);
            }
            pinned.push(ledger.height());
        }
        for (k, h) in pinned.iter().enumerate() {
            for s in 0..3u8 {
                let id = format!("fw-{s}");
                let want = oracle[..=k].iter().rev().find(|(i, _)| *i == id).map(|(_, d)| *d);
                prop_assert_eq!(ledger.query_benchmark_at(&id, *h).ok(), want);
            }
        }
    }
}

use std::collections::BTreeMap;

use proptest::prelude::*;

use tabsplus_core::ledger::{Chain, DirStore, GasSchedule, LedgerError, MemoryStore, OffchainError, OffchainStore};

#[derive(Debug, Clone)]
enum Op {
    Write(u8, Vec<u8>),
    Delete(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..8, prop::collection::vec(any::<u8>(), 0..64)).prop_map(|(k, v)| Op::Write(k, v)),
        (0u8..8).prop_map(Op::Delete),
    ]
}

fn key(k: u8) -> String {
    format!("k{k}")
}

fn chain() -> Chain {
    let mut c = Chain::new("main", GasSchedule::default());
    c.deploy("m");
    c
}

proptest! {
    /// A model map tracks committed invocations only; reverted ones leave
    /// the chain state untouched.
    #[test]
    fn invocations_are_all_or_nothing(txs in prop::collection::vec((prop::collection::vec(op(), 0..6), any::<bool>()), 1..20)) {
        let mut c = chain();
        let mut model: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for (ops, ok) in txs {
            let mut staged = model.clone();
            let (receipt, _) = c.invoke("m", "t", |inv| {
                for o in &ops {
                    match o {
                        Op::Write(k, v) => { inv.write(&key(*k), v.clone()); staged.insert(key(*k), v.clone()); }
                        Op::Delete(k) => { inv.delete(&key(*k)); staged.remove(&key(*k)); }
                    }
                }
                if ok { Ok(()) } else { Err("no") }
            }).unwrap();
            prop_assert_eq!(receipt.status.is_committed(), ok);
            if ok {
                model = staged;
            }
            prop_assert_eq!(c.state(), &model);
            if c.pending().len() > 3 {
                c.seal_block().unwrap();
            }
        }
        c.seal_if_pending();
        let reloaded = Chain::from_jsonl(&c.to_jsonl()).unwrap();
        prop_assert_eq!(reloaded.state(), c.state());
        prop_assert_eq!(reloaded.block_hashes(), c.block_hashes());
    }

    #[test]
    fn blobs_survive_and_tampering_is_caught(blob in prop::collection::vec(any::<u8>(), 1..512), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut s = MemoryStore::new();
        let d = s.put(&blob).unwrap();
        prop_assert_eq!(s.get(&d).unwrap(), blob.clone());
        let i = at.index(blob.len());
        s.blob_mut(&d).unwrap()[i] ^= flip;
        prop_assert_eq!(s.get(&d), Err(OffchainError::IntegrityMismatch(d.clone())));
    }
}

#[test]
fn dump_rejects_a_broken_link() {
    let mut c = chain();
    for i in 0..3u8 {
        c.invoke("m", "t", |inv| {
            inv.write("k", vec![i; 10]);
            Ok::<_, String>(())
        })
        .unwrap()
        .1
        .unwrap();
        c.seal_block().unwrap();
    }
    let dump = c.to_jsonl();
    let second_hash = &c.block_hashes()[1];
    let tampered = dump.replacen(&format!("\"prev_hash\":\"{second_hash}\""), &format!("\"prev_hash\":\"{}\"", "0".repeat(64)), 1);
    assert_ne!(tampered, dump);
    assert!(matches!(Chain::from_jsonl(&tampered), Err(LedgerError::Corrupt(_))));
}

#[test]
fn unknown_method_is_refused() {
    let mut c = chain();
    let err = c.invoke("nope", "t", |_| Ok::<_, String>(())).unwrap_err();
    assert!(matches!(err, LedgerError::MethodUnknown(..)));
}

#[test]
fn dir_store_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = DirStore::new(dir.path()).unwrap();
    let d = s.put(b"waybill").unwrap();
    assert_eq!(s.get(&d).unwrap(), b"waybill");
    std::fs::write(s.path(&d), b"waybilL").unwrap();
    assert!(matches!(s.get(&d), Err(OffchainError::IntegrityMismatch(_))));
}

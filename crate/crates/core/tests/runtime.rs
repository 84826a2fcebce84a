mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{compile, fixture, fixture_traces, ledger_state, owner_input};
use tabsplus_core::canonical::to_canonical_json;
use tabsplus_core::codegen::ContractPackage;
use tabsplus_core::ledger::{MAIN, SIDE};
use tabsplus_core::plan::Mechanism;
use tabsplus_core::runtime::{
    hidden_key, state_key, ExternalInput, Faults, Runtime, RuntimeError, RuntimeOptions, TxnState,
};

/// Runs the first bundled trace up to (not including) the first input for
/// `stop`, or to the end.
fn run_until(pkg: &ContractPackage, options: RuntimeOptions, stop: Option<&str>) -> Runtime {
    let mut rt = Runtime::new(pkg.clone(), options).unwrap();
    for input in &fixture_traces()[0].1 {
        if Some(input.origin.as_str()) == stop {
            break;
        }
        if rt.step_input(input).is_err() {
            // inputs after an abort are refused
            assert!(!rt.errors().is_empty());
            break;
        }
    }
    rt
}

fn with_faults(f: impl FnOnce(&mut Faults)) -> RuntimeOptions {
    let mut o = RuntimeOptions::default();
    f(&mut o.faults);
    o
}

#[test]
fn submission_errors() {
    let a = fixture();
    let pkg = compile(&a, &["S3"], Mechanism::ScAll, false);
    let mut rt = Runtime::new(pkg, RuntimeOptions::default()).unwrap();
    let code = |rt: &mut Runtime, actor: &str, origin: &str| rt.step_input(&ExternalInput::new(actor, origin)).unwrap_err().code();
    assert_eq!(code(&mut rt, "nobody", "bso"), "UnknownActor");
    assert_eq!(code(&mut rt, "middleman", "mm_fork"), "UnknownOrigin");
    assert_eq!(code(&mut rt, "buyer", "mro1"), "NotOwner");
    assert_eq!(code(&mut rt, "buyer", "pd"), "AccessDenied");
    assert_eq!(code(&mut rt, "buyer", "brp"), "NonConformant");
    rt.submit(&ExternalInput::new("buyer", "bso")).unwrap();
    assert!(matches!(rt.submit(&ExternalInput::new("buyer", "bso")), Err(RuntimeError::AlreadyQueued(_))));
}

#[test]
fn rejected_inputs_change_nothing() {
    let pkg = compile(&fixture(), &["S5", "S1", "S2"], Mechanism::Sc2s, true);
    let mut rt = run_until(&pkg, RuntimeOptions::default(), Some("produce"));
    let before = to_canonical_json(&rt.report());
    let state = ledger_state(&rt);
    for (actor, origin) in [("buyer", "produce"), ("supplier", "brp"), ("x", "produce"), ("supplier", "nope")] {
        assert!(rt.step_input(&ExternalInput::new(actor, origin)).is_err());
    }
    assert_eq!(to_canonical_json(&rt.report()), before);
    assert_eq!(ledger_state(&rt), state);
}

#[test]
fn every_plan_completes_on_the_bundled_traces() {
    let a = fixture();
    for mech in [Mechanism::ScAll, Mechanism::Sc2m, Mechanism::Sc2s] {
        for crypto in [false, true] {
            for sel in [vec!["S3"], vec!["S1", "S2"], vec!["S5", "S1", "S2"], vec!["S3", "S4", "S5", "S1", "S2"], vec!["S7", "S6", "S5"]] {
                let pkg = compile(&a, &sel, mech, crypto);
                let rt = run_until(&pkg, RuntimeOptions::default(), None);
                let r = rt.report();
                assert!(r.completed && r.errors.is_empty(), "{sel:?} {mech:?} {crypto}: {:?}", r.errors);
                assert!(r.txn_states.values().all(|s| *s == TxnState::Committed));
                // only the transaction state objects survive a commit
                let states: BTreeSet<String> =
                    pkg.plan.transactions.iter().map(|t| state_key(&pkg.cache_namespace_seed, t)).collect();
                for c in rt.ledger().chains() {
                    assert!(c.state().keys().filter(|k| k.starts_with('~')).all(|k| states.contains(k)));
                }
            }
        }
    }
}

#[test]
fn commit_order_is_parent_first() {
    let pkg = compile(&fixture(), &["S5", "S1", "S2"], Mechanism::ScAll, false);
    let r = run_until(&pkg, RuntimeOptions::default(), None).report();
    let first = |t: &str| r.commit_order.iter().position(|c| c.txn == t).unwrap();
    assert!(first("S5") < first("S1") && first("S5") < first("S2"));
}

#[test]
fn writes_stay_private_until_commit() {
    let pkg = compile(&fixture(), &["S3"], Mechanism::ScAll, false);
    let rt = run_until(&pkg, RuntimeOptions::default(), Some("rw"));
    assert_eq!(rt.txn("S3").unwrap().state, TxnState::Active);
    let main = &rt.ledger().main;
    assert!(main.get("details/run-0").is_none());
    assert!(main.get("waybill/run-0").is_none());
    assert!(main.get(&hidden_key(&pkg.cache_namespace_seed, "S3", "details/run-0")).is_some());
    assert_eq!(main.get(&state_key(&pkg.cache_namespace_seed, "S3")), Some(&[TxnState::Active.code()][..]));

    let done = run_until(&pkg, RuntimeOptions::default(), None);
    assert_eq!(done.ledger().main.get("details/run-0").map(<[u8]>::len), Some(256));
}

#[test]
fn injected_revert_restores_the_ledger() {
    let pkg = compile(&fixture(), &["S3"], Mechanism::ScAll, false);
    let before = ledger_state(&run_until(&pkg, RuntimeOptions::default(), Some("pd")));
    let rt = run_until(&pkg, with_faults(|f| _ = f.revert_at.insert("rw".into())), None);
    assert_eq!(rt.txn("S3").unwrap().state, TxnState::Aborted);
    assert!(!rt.is_complete());
    assert!(!rt.errors().is_empty());
    assert_eq!(ledger_state(&rt), before);
}

#[test]
fn two_phase_commit_faults_abort_the_whole_tree() {
    let pkg = compile(&fixture(), &["S5", "S1", "S2"], Mechanism::ScAll, false);
    // S5 and S1 begin at the start event, so the pre-begin ledger is empty
    let clean = BTreeMap::from([(MAIN.to_string(), BTreeMap::new())]);
    let cases: [(&str, Box<dyn Fn(&mut Faults)>); 4] = [
        ("vote no", Box::new(|f| _ = f.vote_no.insert("S2".into()))),
        ("crash before vote", Box::new(|f| _ = f.crash_before_vote.insert("S1".into()))),
        ("coordinator crash", Box::new(|f| _ = f.coordinator_crash.insert("S5".into()))),
        ("revert in child", Box::new(|f| _ = f.revert_at.insert("fo".into()))),
    ];
    for (name, fault) in cases {
        let rt = run_until(&pkg, with_faults(fault), None);
        let r = rt.report();
        assert!(r.txn_states.values().all(|s| *s == TxnState::Aborted), "{name}: {:?}", r.txn_states);
        assert!(r.commit_order.is_empty(), "{name}");
        assert_eq!(ledger_state(&rt), clean, "{name}");
    }
}

#[test]
fn tampered_ciphertext_is_detected() {
    let pkg = compile(&fixture(), &["S3"], Mechanism::ScAll, true);
    let mut rt = run_until(&pkg, RuntimeOptions::default(), Some("rw"));
    let key = hidden_key(&pkg.cache_namespace_seed, "S3", "details/run-0");
    let mut value = rt.ledger().main.get(&key).unwrap().to_vec();
    assert_ne!(value, vec![0u8; value.len()], "cached bytes are encrypted");
    value[3] ^= 0x40;
    rt.ledger_mut()
        .main
        .invoke("txn:S3", "attacker", |inv| {
            inv.write(&key, value);
            Ok::<_, String>(())
        })
        .unwrap()
        .1
        .unwrap();
    for input in fixture_traces()[0].1.iter().skip_while(|i| i.origin != "rw") {
        if rt.step_input(input).is_err() {
            break;
        }
    }
    assert_eq!(rt.txn("S3").unwrap().state, TxnState::Aborted);
    assert!(rt.errors().iter().any(|e| e.contains("integrity")), "{:?}", rt.errors());
    assert!(rt.ledger().main.get("details/run-0").is_none());
}

#[test]
fn sidechain_commit_is_relayed_to_main() {
    let pkg = compile(&fixture(), &["S3"], Mechanism::Sc2s, false);
    let rt = run_until(&pkg, RuntimeOptions::default(), None);
    let side = rt.ledger().side.as_ref().unwrap();
    assert!(side.total_usage().relay_messages > 0);
    assert!(rt.ledger().main.get("details/run-0").is_some());
    assert!(side.get("details/run-0").is_none());
    let r = rt.report();
    assert!(r.gas_by_chain[SIDE] > 0 && r.gas_by_chain[MAIN] > 0);
    assert_eq!(r.gas_total, r.gas_by_chain.values().sum::<u64>());
}

#[test]
fn runs_are_deterministic() {
    let pkg = compile(&fixture(), &["S5", "S1", "S2"], Mechanism::Sc2s, true);
    let a = run_until(&pkg, RuntimeOptions::default(), None);
    let b = run_until(&pkg, RuntimeOptions::default(), None);
    assert_eq!(to_canonical_json(&a.report()), to_canonical_json(&b.report()));
    assert_eq!(a.ledger().main.to_jsonl(), b.ledger().main.to_jsonl());
    let hashes: BTreeSet<_> = a.report().block_hashes.values().flatten().cloned().collect();
    assert!(!hashes.is_empty());
}

#[test]
fn owner_input_matches_trace_credentials() {
    let pkg = compile(&fixture(), &[], Mechanism::ScAll, false);
    for input in &fixture_traces()[0].1 {
        assert_eq!(owner_input(&pkg, &input.origin).actor, input.actor);
    }
}

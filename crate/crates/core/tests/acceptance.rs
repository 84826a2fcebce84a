//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{compile, fixture, fixture_traces, ledger_state, mutations, owner_input, random_dag, replay_keys, RegionOracle, TokenGame};
use tabsplus_core::bpmn::NodeKind;
use tabsplus_core::canonical::to_canonical_json;
use tabsplus_core::codegen::serialize;
use tabsplus_core::cost::{
    benchmark, calibrate, default_sizes, two_pc_benchmark, CalibrationInput, CalibrationTargets, Variant,
    CALIBRATION_TOLERANCE, DEFAULT_PARTICIPANTS, KIB,
};
use tabsplus_core::graph::dominators;
use tabsplus_core::ledger::{Chain, GasSchedule, MemoryStore, OffchainError, OffchainStore, TxRecord};
use tabsplus_core::plan::{Mechanism, PlanInput};
use tabsplus_core::runtime::{run_trace, state_key, Faults, Runtime, RuntimeOptions, TxnState};
use tabsplus_core::sese::{canonical_regions, check_containment};

type Outcome = Result<String, String>;
type LedgerState = BTreeMap<String, BTreeMap<String, Vec<u8>>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<String, String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {t:.2?}, limit {limit:?}"))
    } else {
        Ok(format!("{t:.2?}"))
    }
}

fn c1_fixture_regions() -> Outcome {
    let start = Instant::now();
    let a = fixture();
    let label = |id: &str| -> Result<Vec<String>, String> {
        let r = a.forest.get(id).ok_or(format!("{id} missing"))?;
        Ok(a.dag.labels(r.members.iter().copied()))
    };
    let minimal: Vec<&str> = a.forest.minimal().iter().map(|r| r.id.as_str()).collect();
    ensure!(minimal == ["S1", "S2", "S3", "S4"], "minimal regions {minimal:?}");
    let s1 = label("S1")?;
    ensure!(s1.first().map(String::as_str) == Some("INIT"), "S1 starts at {:?}", s1.first());
    ensure!(s1.last().map(String::as_str) == Some("Middleman receives order"), "S1 ends at {:?}", s1.last());
    let s3: BTreeSet<String> = label("S3")?.into_iter().collect();
    let want: BTreeSet<String> =
        ["provide details", "provide waybill", "receive details", "receive waybill"].map(String::from).into();
    ensure!(s3 == want, "S3 is {s3:?}");
    ensure!(label("S4")?.last().map(String::as_str) == Some("SUCCESS"), "S4 does not end at SUCCESS");
    ensure!(a.forest.regions.len() == 10, "{} candidates", a.forest.regions.len());
    let s5 = &a.forest.get("S5").ok_or("S5 missing")?.members;
    let union: BTreeSet<usize> =
        a.forest.get("S1").unwrap().members.union(&a.forest.get("S2").unwrap().members).copied().collect();
    ensure!(*s5 == union, "S5 is not S1 ∪ S2");
    ensure!(a.forest.parent.get("S1").map(String::as_str) == Some("S5"), "S1 parent");
    ensure!(a.forest.parent.get("S2").map(String::as_str) == Some("S5"), "S2 parent");
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("10 candidates, S5 = S1 ∪ S2, {t}"))
}

fn c2_sese_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut dags, mut regions) = (0, 0);
    for _ in 0..250 {
        let n = rng.gen_range(2..=12);
        let dag = random_dag(&mut rng, n);
        let dom = dominators(&dag);
        let got = canonical_regions(&dag, &dom);
        let set: BTreeSet<BTreeSet<usize>> = got.iter().map(|r| r.members.clone()).collect();
        ensure!(set == RegionOracle::new(&dag).canonical(), "mismatch on {:?}", dag.view());
        let mut named = got;
        for (i, r) in named.iter_mut().enumerate() {
            r.id = format!("R{i}");
        }
        let v = check_containment(&named).violations;
        ensure!(v.is_empty(), "violations {v:?}");
        dags += 1;
        regions += named.len();
    }
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("{dags} DAGs, {regions} canonical regions, 0 violations, {t}"))
}

fn c3_method_counts() -> Outcome {
    let a = fixture();
    let mut out = Vec::new();
    for (sel, want) in [(vec!["S1", "S2"], 7), (vec!["S5", "S1", "S2"], 8), (vec!["S3", "S4", "S5", "S1", "S2"], 10)] {
        let got = a.plan_report(&PlanInput::new(&sel, Mechanism::ScAll, false)).map_err(|e| e.to_string())?.method_count;
        ensure!(got == want, "{sel:?}: {got} methods, want {want}");
        out.push(format!("{}→{got}", sel.join("+")));
    }
    Ok(out.join(", "))
}

fn c4_conformance() -> Outcome {
    let start = Instant::now();
    let pkg = compile(&fixture(), &[], Mechanism::ScAll, false);
    let game = TokenGame::fixture();
    let traces = fixture_traces();
    ensure!(traces.len() >= 10, "only {} traces", traces.len());
    let options = RuntimeOptions::default();
    let (mut valid, mut mutants, mut correct) = (0, 0, 0);
    for (name, trace) in &traces {
        let out = run_trace(&pkg, trace, &options).map_err(|e| e.to_string())?;
        ensure!(out.valid, "{name} rejected: {:?}", out.message);
        valid += 1;
        for (pos, m) in mutations(&game, trace) {
            mutants += 1;
            let want = game.first_rejection(&m).ok_or(format!("{name}@{pos} mutant accepted by the oracle"))?;
            let out = run_trace(&pkg, &m, &options).map_err(|e| e.to_string())?;
            if !out.valid && out.failing_step == Some(want) && out.origin.as_deref() == Some(m[want].origin.as_str()) {
                correct += 1;
            }
        }
    }
    ensure!(correct == mutants, "{correct}/{mutants} mutants rejected at the right input");
    let t = within(start, Duration::from_secs(30))?;
    Ok(format!("{valid} valid traces accepted, {correct}/{mutants} mutants rejected with origin, {t}"))
}

fn tasks_of(pkg: &tabsplus_core::codegen::ContractPackage, txn: &str) -> Vec<String> {
    pkg.plan.members[txn]
        .iter()
        .filter(|v| pkg.model.node(v).is_some_and(|n| n.kind == NodeKind::Task))
        .cloned()
        .collect()
}

fn records(c: &Chain) -> Vec<&TxRecord> {
    c.blocks().iter().flat_map(|b| b.txs.iter()).chain(c.pending()).collect()
}

/// Chain state after the given records, rebuilt from their write values.
fn replay_state(recs: &[&TxRecord]) -> BTreeMap<String, Vec<u8>> {
    let mut state = BTreeMap::new();
    for r in recs.iter().filter(|r| r.status.is_committed()) {
        for w in &r.writes {
            state.insert(w.key.clone(), hex::decode(w.value.as_deref().unwrap_or_default()).unwrap());
        }
        for d in &r.deletes {
            state.remove(d);
        }
    }
    state
}

/// Drives one random schedule, checking isolation after every input.
/// Returns the final runtime and each transaction's pre-begin snapshot.
fn observed_run(
    pkg: &tabsplus_core::codegen::ContractPackage,
    options: RuntimeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Runtime, BTreeMap<String, LedgerState>), String> {
    let empty: LedgerState = if pkg.mechanism() == Mechanism::Sc2s {
        [("main", BTreeMap::new()), ("side", BTreeMap::new())].into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    } else {
        BTreeMap::from([("main".to_string(), BTreeMap::new())])
    };
    let mut rt = Runtime::new(pkg.clone(), options).map_err(|e| e.to_string())?;
    let mut pre = BTreeMap::new();
    let started = |rt: &Runtime, t: &str| rt.txn(t).is_some_and(|c| c.state != TxnState::NotStarted);
    for t in &pkg.plan.transactions {
        if started(&rt, t) {
            pre.insert(t.clone(), empty.clone());
        }
    }
    loop {
        let enabled = rt.enabled();
        let Some(pick) = enabled.choose(rng).cloned() else { break };
        let before: BTreeMap<String, usize> = rt.ledger().chains().map(|c| (c.id.clone(), records(c).len())).collect();
        if rt.step_input(&owner_input(pkg, &pick)).is_err() {
            break;
        }
        for t in &pkg.plan.transactions {
            if !pre.contains_key(t) && started(&rt, t) {
                // cut each chain just before the record that created the state object
                let sk = state_key(&pkg.cache_namespace_seed, t);
                let snap = rt
                    .ledger()
                    .chains()
                    .map(|c| {
                        let recs = records(c);
                        let cut = (before[&c.id]..recs.len())
                            .find(|&i| recs[i].writes.iter().any(|w| w.key == sk))
                            .unwrap_or(recs.len());
                        (c.id.clone(), replay_state(&recs[..cut]))
                    })
                    .collect();
                pre.insert(t.clone(), snap);
            }
        }
        // outsiders see the pre-transaction value of every cached key
        for (t, snap) in &pre {
            let ctx = rt.txn(t).unwrap();
            if matches!(ctx.state, TxnState::Active | TxnState::Preparing | TxnState::Ready) {
                for k in ctx.write_set.keys() {
                    for chain in rt.ledger().chains() {
                        let old = snap.get(&chain.id).and_then(|s| s.get(k));
                        ensure!(chain.get(k) == old.map(Vec::as_slice), "{t} leaked {k} on {}", chain.id);
                    }
                }
            }
        }
    }
    Ok((rt, pre))
}

/// Every committed transaction's keys appear on the main chain in a single
/// native transaction.
fn check_atomic_commits(rt: &Runtime) -> Result<(), String> {
    let history = replay_keys(&rt.ledger().main);
    for entry in &rt.report().commit_order {
        let keys: BTreeSet<&String> = entry.keys.iter().collect();
        for snap in &history {
            let present = keys.iter().filter(|k| snap.contains(**k)).count();
            ensure!(present == 0 || present == keys.len(), "{} partially visible ({present}/{})", entry.txn, keys.len());
        }
        ensure!(keys.iter().all(|k| rt.ledger().main.get(k).is_some()), "{} missing after commit", entry.txn);
    }
    Ok(())
}

fn c5_acid() -> Outcome {
    let a = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plans: [&[&str]; 4] = [&["S3"], &["S1", "S2"], &["S3", "S4"], &["S5", "S1", "S2"]];
    let (mut aborts, mut commits) = (0, 0);
    for i in 0..120 {
        let sel = plans[i % plans.len()];
        let mech = *[Mechanism::ScAll, Mechanism::Sc2m, Mechanism::Sc2s].choose(&mut rng).unwrap();
        let pkg = compile(&a, sel, mech, rng.gen());
        let mut faults = Faults::default();
        let kind = rng.gen_range(0..3);
        match kind {
            0 => {}
            1 => {
                let t = sel.choose(&mut rng).unwrap();
                let tasks = tasks_of(&pkg, t);
                faults.revert_at.insert(tasks.choose(&mut rng).unwrap().clone());
            }
            _ => {
                let t = if sel.contains(&"S5") { ["S1", "S2"].choose(&mut rng).unwrap() } else { sel.choose(&mut rng).unwrap() };
                if sel.contains(&"S5") {
                    faults.vote_no.insert(t.to_string());
                } else {
                    faults.revert_at.insert(tasks_of(&pkg, t).choose(&mut rng).unwrap().clone());
                }
            }
        }
        let options = RuntimeOptions { faults: faults.clone(), ..RuntimeOptions::default() };
        let (rt, pre) = observed_run(&pkg, options, &mut rng).map_err(|e| format!("schedule {i}: {e}"))?;
        check_atomic_commits(&rt).map_err(|e| format!("schedule {i}: {e}"))?;
        let report = rt.report();
        if kind == 0 {
            ensure!(report.completed && report.errors.is_empty(), "schedule {i}: clean run failed {:?}", report.errors);
            ensure!(report.txn_states.values().all(|s| *s == TxnState::Committed), "schedule {i}: not all committed");
            commits += 1;
        } else {
            let roots: Vec<&String> = pkg.plan.transactions.iter().filter(|t| !pkg.plan.parent.contains_key(*t)).collect();
            let aborted: Vec<&&String> = roots.iter().filter(|t| report.txn_states[**t] == TxnState::Aborted).collect();
            ensure!(aborted.len() == 1, "schedule {i}: aborted roots {aborted:?} under {faults:?}");
            let snap = &pre[aborted[0].as_str()];
            ensure!(
                to_canonical_json(&ledger_state(&rt)) == to_canonical_json(snap),
                "schedule {i}: ledger differs from the snapshot before {} began",
                aborted[0]
            );
            aborts += 1;
        }
    }
    Ok(format!("{} schedules: {aborts} aborts restored byte-identically, {commits} atomic commits", aborts + commits))
}

fn c6_nested() -> Outcome {
    let a = fixture();
    let sel = ["S5", "S1", "S2"];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut counts = BTreeMap::new();
    for i in 0..120 {
        let mech = *[Mechanism::ScAll, Mechanism::Sc2m, Mechanism::Sc2s].choose(&mut rng).unwrap();
        let pkg = compile(&a, &sel, mech, rng.gen());
        let child = ["S1", "S2"].choose(&mut rng).unwrap().to_string();
        let mut faults = Faults::default();
        let kind = ["none", "child no-vote", "child crash before vote", "coordinator crash"][i % 4];
        match kind {
            "child no-vote" => _ = faults.vote_no.insert(child),
            "child crash before vote" => _ = faults.crash_before_vote.insert(child),
            "coordinator crash" => _ = faults.coordinator_crash.insert("S5".into()),
            _ => {}
        }
        let options = RuntimeOptions { faults, ..RuntimeOptions::default() };
        let (rt, _) = observed_run(&pkg, options, &mut rng).map_err(|e| format!("schedule {i}: {e}"))?;
        let report = rt.report();
        // write sets of all three, from the package's key templates
        let run = &rt.options().run_id;
        let keys: BTreeSet<String> = sel
            .iter()
            .flat_map(|t| tasks_of(&pkg, t))
            .filter_map(|v| pkg.model.node(&v).and_then(|n| n.task_spec.clone()))
            .flat_map(|s| s.ledger_writes.into_iter().map(|w| w.key.replace("{run}", run)))
            .collect();
        for snap in replay_keys(&rt.ledger().main) {
            let present = keys.iter().filter(|k| snap.contains(*k)).count();
            ensure!(present == 0 || present == keys.len(), "schedule {i} ({kind}): {present}/{} keys visible", keys.len());
        }
        if kind == "none" {
            ensure!(keys.iter().all(|k| rt.ledger().main.get(k).is_some()), "schedule {i}: clean run missing writes");
            let order: Vec<&str> = report.commit_order.iter().map(|c| c.txn.as_str()).collect();
            ensure!(order.first() == Some(&"S5") && order.len() == 3, "schedule {i}: commit order {order:?}");
        } else {
            ensure!(report.txn_states.values().all(|s| *s == TxnState::Aborted), "schedule {i} ({kind}): {:?}", report.txn_states);
            ensure!(keys.iter().all(|k| rt.ledger().main.get(k).is_none()), "schedule {i}: writes survived an abort");
        }
        *counts.entry(kind).or_insert(0) += 1;
    }
    Ok(format!("120 schedules {counts:?}, never a partial write set, parent commits first"))
}

fn c7_cost() -> Outcome {
    let start = Instant::now();
    let top = 1875 * KIB;
    let base = GasSchedule { per_event_byte: 0, per_crypto_byte: 0, ..GasSchedule::default() };
    let probe = benchmark(&[top], base).map_err(|e| e.to_string())?;
    let input = CalibrationInput::from_table(&probe, top).ok_or("no calibration input")?;
    let cal = calibrate(&input, base, &CalibrationTargets::default(), CALIBRATION_TOLERANCE).map_err(|e| e.to_string())?;
    let table = benchmark(&default_sizes(), cal.schedule).map_err(|e| e.to_string())?;
    for &size in table.sizes.iter().filter(|s| **s >= 512 * KIB) {
        let r = |n, d| table.ratio(n, d, size).unwrap();
        let all = r(Variant::ScAll, Variant::NoXa);
        let two_s = r(Variant::Sc2s, Variant::NoXa);
        let crypto = r(Variant::Sc2sCrypto, Variant::Sc2s);
        ensure!((1.95..=2.05).contains(&all), "sc-all/no-xa {all:.4} at {size}");
        ensure!((2.0..=2.1).contains(&two_s), "sc-2s/no-xa {two_s:.4} at {size}");
        ensure!((1.85..=2.05).contains(&crypto), "crypto/sc-2s {crypto:.4} at {size}");
    }
    let min_r2 = table.fits.values().map(|f| f.r2).fold(f64::INFINITY, f64::min);
    ensure!(min_r2 >= 0.999, "R² {min_r2}");
    let t = within(start, Duration::from_secs(120))?;
    let r = |n, d| table.ratio(n, d, top).unwrap();
    Ok(format!(
        "E={} C={}; at 1875 KiB sc-all {:.4}, sc-2s {:.4}, crypto {:.4}; min R² {min_r2:.6}; {t}",
        cal.schedule.per_event_byte,
        cal.schedule.per_crypto_byte,
        r(Variant::ScAll, Variant::NoXa),
        r(Variant::Sc2s, Variant::NoXa),
        r(Variant::Sc2sCrypto, Variant::Sc2s)
    ))
}

fn c8_two_pc() -> Outcome {
    let t = two_pc_benchmark(&DEFAULT_PARTICIPANTS, GasSchedule::default()).map_err(|e| e.to_string())?;
    ensure!(t.rows.iter().all(|r| r.committed), "a 2PC run did not commit");
    ensure!(t.phase1.r2 >= 0.999 && t.phase2.r2 >= 0.999, "R² {} / {}", t.phase1.r2, t.phase2.r2);
    ensure!(t.max_phase_gap < 0.05, "phase gap {:.4}", t.max_phase_gap);
    Ok(format!(
        "phase1 {:.0}·N+{:.0}, phase2 {:.0}·N+{:.0}, max gap {:.4}%",
        t.phase1.slope,
        t.phase1.intercept,
        t.phase2.slope,
        t.phase2.intercept,
        t.max_phase_gap * 100.0
    ))
}

fn c9_determinism() -> Outcome {
    let mut checked = 0;
    for (sel, mech, crypto) in [
        (vec![], Mechanism::ScAll, false),
        (vec!["S3", "S4", "S5", "S1", "S2"], Mechanism::Sc2m, false),
        (vec!["S5", "S1", "S2"], Mechanism::Sc2s, true),
    ] {
        let run = || {
            let pkg = compile(&fixture(), &sel, mech, crypto);
            let mut rt = Runtime::new(pkg.clone(), RuntimeOptions::default()).unwrap();
            for input in &fixture_traces()[1].1 {
                rt.step_input(input).unwrap();
            }
            let report = rt.report();
            (serialize(&pkg), to_canonical_json(&report), report.block_hashes)
        };
        let (p1, r1, h1) = run();
        let (p2, r2, h2) = run();
        ensure!(p1 == p2, "{sel:?}: packages differ");
        ensure!(r1 == r2, "{sel:?}: reports differ");
        ensure!(h1 == h2 && !h1.is_empty(), "{sel:?}: block hashes differ");
        checked += 1;
    }
    Ok(format!("{checked} plan/mechanism combinations identical across two runs"))
}

fn c10_offchain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = MemoryStore::new();
    let mut detected = 0;
    let total = 200;
    for _ in 0..total {
        let len = rng.gen_range(1..4096);
        let blob: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let d = store.put(&blob).map_err(|e| e.to_string())?;
        ensure!(store.get(&d).as_deref() == Ok(&blob[..]), "round trip failed");
        let at = rng.gen_range(0..len);
        let flip: u8 = rng.gen_range(1..=255);
        store.blob_mut(&d).unwrap()[at] ^= flip;
        if store.get(&d) == Err(OffchainError::IntegrityMismatch(d.clone())) {
            detected += 1;
        }
    }
    ensure!(detected == total, "{detected}/{total} detected");
    Ok(format!("{detected}/{total} single-byte tamperings detected"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("fixture SESE regions", c1_fixture_regions),
        ("SESE oracle on random DAGs", c2_sese_oracle),
        ("method counts", c3_method_counts),
        ("trace conformance", c4_conformance),
        ("ACID and privacy", c5_acid),
        ("nested atomicity", c6_nested),
        ("cost ratios after calibration", c7_cost),
        ("2PC cost", c8_two_pc),
        ("determinism", c9_determinism),
        ("off-chain integrity", c10_offchain),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

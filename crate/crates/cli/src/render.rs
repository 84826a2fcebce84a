//! Text and CSV forms of command outputs. JSON always comes from
//! `ops::render`.

use std::fmt::Write;

use serde::Serialize;

use tabsplus_core::codegen::ContractPackage;
use tabsplus_core::cost::{Calibration, CostTable, TwoPcTable};
use tabsplus_core::ops::{self, TraceCheckSummary};
use tabsplus_core::pipeline::{AnalysisReport, PlanReport};
use tabsplus_core::runtime::TraceOutcome;

pub struct Output {
    pub json: String,
    pub text: String,
    pub csv: Option<String>,
}

/// Serde name of a unit enum variant.
fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn csv_of(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn analysis(r: &AnalysisReport) -> Output {
    let mut text = format!(
        "model {}: {} vertices, {} edges, {} actors\n",
        r.model,
        r.graph.vertices.len(),
        r.graph.edges.len(),
        r.actors.len()
    );
    for c in &r.candidates {
        let parent = c.parent.as_deref().map(|p| format!(" in {p}")).unwrap_or_default();
        writeln!(text, "{:<4} {:<9} {} .. {} ({} vertices){parent}", c.id, label(&c.kind), c.entry, c.exit, c.members.len()).unwrap();
    }
    for d in &r.diagnostics {
        writeln!(text, "{}: {}", label(&d.severity), d.message).unwrap();
    }
    let csv = csv_of(
        &["id", "kind", "entry", "exit", "parent", "members"],
        r.candidates.iter().map(|c| {
            vec![
                c.id.clone(),
                label(&c.kind),
                c.entry_id.clone(),
                c.exit_id.clone(),
                c.parent.clone().unwrap_or_default(),
                c.member_ids.join(" "),
            ]
        }),
    );
    Output { json: ops::render(r), text, csv: Some(csv) }
}

pub fn plan(r: &PlanReport) -> Output {
    let p = &r.plan;
    let mut text = format!("{} transaction(s) on {}, {} method(s)\n", p.transactions.len(), p.mechanism, r.method_count);
    for t in &p.transactions {
        let parent = p.parent.get(t).map(|x| format!(" in {x}")).unwrap_or_default();
        writeln!(text, "{t}{parent}: participants {}", p.participants[t].join(", ")).unwrap();
    }
    for m in &r.methods.methods {
        writeln!(text, "method {} ({}, {})", m.name, label(&m.role), m.owner).unwrap();
    }
    for w in &p.warnings {
        writeln!(text, "warning: {w}").unwrap();
    }
    let csv = csv_of(
        &["txn", "parent", "entry", "exit", "participants", "members"],
        p.transactions.iter().map(|t| {
            vec![
                t.clone(),
                p.parent.get(t).cloned().unwrap_or_default(),
                p.entry[t].clone(),
                p.exit[t].clone(),
                p.participants[t].join(" "),
                p.members[t].join(" "),
            ]
        }),
    );
    Output { json: ops::render(r), text, csv: Some(csv) }
}

pub fn package(pkg: &ContractPackage) -> Output {
    let mut text = format!(
        "package {} for {} on {}, seed namespace {}\n",
        pkg.schema, pkg.model.name, pkg.plan.mechanism, pkg.cache_namespace_seed
    );
    for m in &pkg.methods.methods {
        let d = &pkg.deployment[&m.name];
        writeln!(text, "{} -> {} on {}", m.name, d.contract, d.chain).unwrap();
    }
    Output { json: ops::package_json(pkg), text, csv: None }
}

pub fn outcome(o: &TraceOutcome) -> Output {
    let r = &o.report;
    let mut text = if o.valid {
        format!("valid: {} input(s) accepted\n", o.accepted)
    } else {
        format!(
            "invalid at step {}{}: {} {}\n",
            o.failing_step.map_or("?".into(), |s| s.to_string()),
            o.origin.as_deref().map(|x| format!(" ({x})")).unwrap_or_default(),
            o.code.as_deref().unwrap_or(""),
            o.message.as_deref().unwrap_or("")
        )
    };
    writeln!(text, "gas {} over {} step(s)", r.gas_total, r.steps.len()).unwrap();
    for (t, s) in &r.txn_states {
        writeln!(text, "{t}: {}", label(s)).unwrap();
    }
    for e in &r.errors {
        writeln!(text, "error: {e}").unwrap();
    }
    let csv = csv_of(
        &["index", "ts", "event", "kind", "machine", "method", "chain", "txn", "phase", "gas"],
        r.steps.iter().map(|s| {
            vec![
                s.index.to_string(),
                s.ts.to_string(),
                s.event.clone(),
                label(&s.kind),
                s.machine.clone().unwrap_or_default(),
                s.method.clone().unwrap_or_default(),
                s.chain.clone().unwrap_or_default(),
                s.txn.clone().unwrap_or_default(),
                s.phase.clone().unwrap_or_default(),
                s.gas.to_string(),
            ]
        }),
    );
    Output { json: ops::render(o), text, csv: Some(csv) }
}

pub fn trace_check(s: &TraceCheckSummary) -> Output {
    let mut text = format!("{} trace(s): {} valid, {} invalid, {} error(s)\n", s.total, s.valid, s.invalid, s.errors);
    for v in &s.traces {
        let verdict = match (&v.error, v.valid) {
            (Some(e), _) => format!("error {}: {}", e.code, e.message),
            (None, true) => "valid".into(),
            (None, false) => format!(
                "invalid at step {}{} {}",
                v.failing_step.map_or("?".into(), |x| x.to_string()),
                v.origin.as_deref().map(|x| format!(" ({x})")).unwrap_or_default(),
                v.code.as_deref().unwrap_or("")
            ),
        };
        writeln!(text, "{}: {verdict}", v.name).unwrap();
    }
    let csv = csv_of(
        &["name", "valid", "failing_step", "origin", "code"],
        s.traces.iter().map(|v| {
            vec![
                v.name.clone(),
                v.valid.to_string(),
                v.failing_step.map(|x| x.to_string()).unwrap_or_default(),
                v.origin.clone().unwrap_or_default(),
                v.code.clone().or_else(|| v.error.as_ref().map(|e| e.code.clone())).unwrap_or_default(),
            ]
        }),
    );
    Output { json: ops::render(s), text, csv: Some(csv) }
}

pub fn cost(t: &CostTable) -> Output {
    let mut text = format!("model {} selections [{}]\n", t.model, t.selections.join(", "));
    writeln!(text, "{:<14} {:>10} {:>14} {:>8}", "variant", "size_kib", "gas", "ratio").unwrap();
    for r in &t.rows {
        writeln!(text, "{:<14} {:>10} {:>14} {:>8.4}", r.variant.label(), r.size_bytes / 1024, r.gas, r.ratio_to_no_xa).unwrap();
    }
    for (v, f) in &t.fits {
        writeln!(text, "fit {v}: {:.3} gas/byte + {:.0}, R² {:.6}", f.slope, f.intercept, f.r2).unwrap();
    }
    let csv = csv_of(
        &["variant", "size_bytes", "gas", "fee", "ratio_to_no_xa"],
        t.rows.iter().map(|r| {
            vec![r.variant.label().into(), r.size_bytes.to_string(), r.gas.to_string(), r.fee.to_string(), format!("{}", r.ratio_to_no_xa)]
        }),
    );
    Output { json: ops::render(t), text, csv: Some(csv) }
}

pub fn two_pc(t: &TwoPcTable) -> Output {
    let mut text = format!("{:>12} {:>12} {:>12} {:>9}\n", "participants", "phase1", "phase2", "messages");
    for r in &t.rows {
        writeln!(text, "{:>12} {:>12} {:>12} {:>9}", r.participants, r.phase1_gas, r.phase2_gas, r.messages).unwrap();
    }
    writeln!(text, "phase1 {:.1}·N + {:.1} (R² {:.6})", t.phase1.slope, t.phase1.intercept, t.phase1.r2).unwrap();
    writeln!(text, "phase2 {:.1}·N + {:.1} (R² {:.6})", t.phase2.slope, t.phase2.intercept, t.phase2.r2).unwrap();
    writeln!(text, "largest phase gap {:.4}%", t.max_phase_gap * 100.0).unwrap();
    let csv = csv_of(
        &["participants", "phase1_gas", "phase2_gas", "messages", "total_gas", "committed"],
        t.rows.iter().map(|r| {
            vec![
                r.participants.to_string(),
                r.phase1_gas.to_string(),
                r.phase2_gas.to_string(),
                r.messages.to_string(),
                r.total_gas.to_string(),
                r.committed.to_string(),
            ]
        }),
    );
    Output { json: ops::render(t), text, csv: Some(csv) }
}

pub fn calibration(c: &Calibration) -> Output {
    let a = &c.achieved;
    let text = format!(
        "per_event_byte {} per_crypto_byte {}\nsc-all/no-xa {:.4}, sc-2s/no-xa {:.4}, crypto/sc-2s {:.4}, error {:.4}\n",
        c.schedule.per_event_byte, c.schedule.per_crypto_byte, a.sc_all_over_no_xa, a.sc_2s_over_no_xa, a.crypto_over_sc_2s, c.error
    );
    Output { json: ops::render(c), text, csv: None }
}

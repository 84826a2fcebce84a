//! Workloads shared by the criterion benches and their tests.

use tabsplus_core::codegen::{ContractPackage, GenerateOptions};
use tabsplus_core::fixtures::SUPPLY_CHAIN;
use tabsplus_core::fsm::SynthOptions;
use tabsplus_core::pipeline::Analysis;
use tabsplus_core::plan::{Mechanism, PlanInput};
use tabsplus_core::runtime::{parse_trace, run_trace, ExternalInput, RuntimeOptions, TraceOutcome};

/// Selections exercised by the benches, from none to the full nested plan.
pub const PLANS: [(&str, &[&str]); 4] = [
    ("none", &[]),
    ("s3", &["S3"]),
    ("s5-nested", &["S5", "S1", "S2"]),
    ("all", &["S3", "S4", "S5", "S1", "S2"]),
];

pub fn fixture_analysis() -> Analysis {
    Analysis::from_xml(SUPPLY_CHAIN.as_bytes()).expect("bundled fixture analyzes")
}

pub fn package(analysis: &Analysis, selections: &[&str], mechanism: Mechanism, crypto: bool) -> ContractPackage {
    analysis
        .compile(&PlanInput::new(selections, mechanism, crypto), SynthOptions::default(), &GenerateOptions::default())
        .expect("bench plan compiles")
}

/// The first bundled valid trace.
pub fn fixture_trace() -> Vec<ExternalInput> {
    parse_trace(include_str!("../../core/fixtures/traces/valid_01.jsonl")).expect("bundled trace parses")
}

pub fn replay(pkg: &ContractPackage, trace: &[ExternalInput]) -> TraceOutcome {
    run_trace(pkg, trace, &RuntimeOptions::default()).expect("runtime starts")
}

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use tabsplus_bench::{fixture_analysis, fixture_trace, package, replay, PLANS};
use tabsplus_core::cost::{benchmark, two_pc_row, KIB};
use tabsplus_core::fixtures::SUPPLY_CHAIN;
use tabsplus_core::ledger::GasSchedule;
use tabsplus_core::pipeline::Analysis;
use tabsplus_core::plan::Mechanism;

fn analyze(c: &mut Criterion) {
    c.bench_function("analyze/fixture", |b| b.iter(|| Analysis::from_xml(black_box(SUPPLY_CHAIN.as_bytes())).unwrap()));
}

fn compile(c: &mut Criterion) {
    let a = fixture_analysis();
    let mut g = c.benchmark_group("compile");
    for (name, sel) in PLANS {
        g.bench_with_input(BenchmarkId::from_parameter(name), sel, |b, sel| b.iter(|| package(&a, sel, Mechanism::ScAll, false)));
    }
    g.finish();
}

fn run(c: &mut Criterion) {
    let a = fixture_analysis();
    let trace = fixture_trace();
    let mut g = c.benchmark_group("run");
    for mech in Mechanism::ALL {
        for crypto in [false, true] {
            let pkg = package(&a, &["S5", "S1", "S2"], mech, crypto);
            let id = format!("{mech}{}", if crypto { "-crypto" } else { "" });
            g.bench_function(id, |b| b.iter(|| replay(&pkg, &trace)));
        }
    }
    g.finish();
}

fn cost(c: &mut Criterion) {
    let mut g = c.benchmark_group("cost/m1m2");
    g.sample_size(10);
    for kib in [75, 512] {
        g.throughput(Throughput::Bytes(kib * KIB));
        g.bench_with_input(BenchmarkId::from_parameter(kib), &kib, |b, &kib| {
            b.iter(|| benchmark(&[kib * KIB], GasSchedule::default()).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("cost/two-pc");
    for n in [2, 4, 6] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| b.iter(|| two_pc_row(n, GasSchedule::default()).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, analyze, compile, run, cost);
criterion_main!(benches);

//! Gas benchmarks across deployment mechanisms, two-phase commit scaling,
//! and calibration of the gas schedule against target cost ratios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::bpmn::WriteSource;
use crate::canonical::text_filler;
use crate::codegen::{ContractPackage, GenerateOptions};
use crate::fixtures;
use crate::fsm::{Action, SynthOptions};
use crate::ledger::{GasSchedule, Usage};
use crate::pipeline::{Analysis, PipelineError};
use crate::plan::{Mechanism, PlanInput};
use crate::runtime::{ExternalInput, Runtime, RuntimeOptions};
use crate::sese::RegionKind;

pub const KIB: u64 = 1024;
pub const DEFAULT_SIZES_KIB: [u64; 4] = [75, 512, 1024, 1875];
pub const DEFAULT_PARTICIPANTS: [usize; 5] = [2, 3, 4, 5, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No transactions: the plain interpreter.
    NoXa,
    ScAll,
    Sc2m,
    Sc2s,
    Sc2sCrypto,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::NoXa, Variant::ScAll, Variant::Sc2m, Variant::Sc2s, Variant::Sc2sCrypto];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoXa => "no-xa",
            Variant::ScAll => "sc-all",
            Variant::Sc2m => "sc-2m",
            Variant::Sc2s => "sc-2s",
            Variant::Sc2sCrypto => "sc-2s-crypto",
        }
    }

    pub fn mechanism(self) -> Mechanism {
        match self {
            Variant::NoXa | Variant::ScAll => Mechanism::ScAll,
            Variant::Sc2m => Mechanism::Sc2m,
            Variant::Sc2s | Variant::Sc2sCrypto => Mechanism::Sc2s,
        }
    }

    pub fn crypto(self) -> bool {
        self == Variant::Sc2sCrypto
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{variant} run did not complete: {detail}")]
    Stuck { variant: String, detail: String },
    #[error("no region matches the benchmark shape: {0}")]
    NoBenchmarkRegion(String),
    #[error("targets cannot be met within {tolerance}; best error {error:.4}")]
    Uncalibratable { error: f64, tolerance: f64 },
    #[error("need at least two points for a fit")]
    TooFewPoints,
}

impl CostError {
    pub fn code(&self) -> &'static str {
        match self {
            CostError::Pipeline(e) => e.code(),
            CostError::Stuck { .. } => "RunIncomplete",
            CostError::NoBenchmarkRegion(_) => "NoBenchmarkRegion",
            CostError::Uncalibratable { .. } => "Uncalibratable",
            CostError::TooFewPoints => "TooFewPoints",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit, CostError> {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(CostError::TooFewPoints);
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(CostError::TooFewPoints);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (slope * x + intercept)).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: Variant,
    pub size_bytes: u64,
    pub gas: u64,
    /// Gas times the gas price.
    pub fee: u64,
    pub gas_by_chain: BTreeMap<String, u64>,
    pub usage: Usage,
    pub ratio_to_no_xa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub model: String,
    pub selections: Vec<String>,
    pub schedule: GasSchedule,
    pub sizes: Vec<u64>,
    pub rows: Vec<CostRow>,
    /// Gas against payload size, per variant label.
    pub fits: BTreeMap<String, LinearFit>,
}

impl CostTable {
    pub fn row(&self, variant: Variant, size: u64) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.variant == variant && r.size_bytes == size)
    }

    pub fn ratio(&self, num: Variant, den: Variant, size: u64) -> Option<f64> {
        Some(self.row(num, size)?.gas as f64 / self.row(den, size)?.gas as f64)
    }
}

/// Sets every generated write in the package to `size` bytes.
pub fn override_write_sizes(pkg: &mut ContractPackage, size: u64) {
    for m in pkg.fsm.machines_mut() {
        for t in &mut m.transitions {
            for a in &mut t.actions {
                match a {
                    Action::Write { size: s, source: WriteSource::Generated, .. }
                    | Action::CachedWrite { size: s, source: WriteSource::Generated, .. } => *s = size,
                    _ => {}
                }
            }
        }
    }
}

/// Runs a package by always submitting the first enabled task, as its
/// owner, with the payload `payload_for` gives for that task, until nothing
/// is enabled.
pub fn drive(
    pkg: &ContractPackage,
    options: &RuntimeOptions,
    payload_for: &dyn Fn(&str) -> Json,
) -> Result<Runtime, PipelineError> {
    let mut rt = Runtime::new(pkg.clone(), options.clone())?;
    while let Some(origin) = rt.enabled().first().cloned() {
        let owner = &pkg.model.node(&origin).expect("enabled vertex exists").actor;
        let cred = pkg.model.actor(owner).map_or_else(|| owner.clone(), |a| a.credential.clone());
        let input = ExternalInput { payload: payload_for(&origin), ..ExternalInput::new(&cred, &origin) };
        rt.step_input(&input)?;
    }
    Ok(rt)
}

/// Tasks get the `size`-byte `data` field only if one of their writes
/// takes its value from the payload.
fn bench_payload(pkg: &ContractPackage, size: u64) -> impl Fn(&str) -> Json + '_ {
    let data = text_filler("bench-payload", size as usize);
    move |origin: &str| {
        let uses_payload = pkg.model.node(origin).and_then(|n| n.task_spec.as_ref()).is_some_and(|s| {
            s.ledger_writes.iter().any(|w| matches!(w.source, WriteSource::Payload(_)))
        });
        if uses_payload {
            json!({ "data": data, "x": 1 })
        } else {
            json!({ "x": 1 })
        }
    }
}

fn run_options(schedule: GasSchedule) -> RuntimeOptions {
    RuntimeOptions { schedule, run_id: "bench".into(), ..RuntimeOptions::default() }
}

fn run_variant(
    analysis: &Analysis,
    selections: &[&str],
    variant: Variant,
    size: u64,
    schedule: GasSchedule,
) -> Result<CostRow, CostError> {
    let sel: &[&str] = if variant == Variant::NoXa { &[] } else { selections };
    let input = PlanInput::new(sel, variant.mechanism(), variant.crypto());
    let mut pkg = analysis.compile(&input, SynthOptions::default(), &GenerateOptions::default())?;
    override_write_sizes(&mut pkg, size);
    let rt = drive(&pkg, &run_options(schedule), &bench_payload(&pkg, size))?;
    if !rt.is_complete() || !rt.errors().is_empty() {
        return Err(CostError::Stuck { variant: variant.label().into(), detail: rt.errors().join("; ") });
    }
    let usage = rt.ledger().total_usage();
    let gas = schedule.gas(&usage);
    Ok(CostRow {
        variant,
        size_bytes: size,
        gas,
        fee: gas * schedule.gas_price,
        gas_by_chain: rt.ledger().chains().map(|c| (c.id.clone(), c.total_gas())).collect(),
        usage,
        ratio_to_no_xa: 0.0,
    })
}

/// Gas for each variant and payload size. With no selections only the
/// non-transactional variant is run.
pub fn cost_table(
    analysis: &Analysis,
    selections: &[&str],
    sizes: &[u64],
    schedule: GasSchedule,
) -> Result<CostTable, CostError> {
    let variants: &[Variant] = if selections.is_empty() { &[Variant::NoXa] } else { &Variant::ALL };
    let mut rows = Vec::new();
    for &size in sizes {
        let mut base = run_variant(analysis, selections, Variant::NoXa, size, schedule)?;
        base.ratio_to_no_xa = 1.0;
        let base_gas = base.gas as f64;
        rows.push(base);
        for &v in variants.iter().filter(|v| **v != Variant::NoXa) {
            let mut row = run_variant(analysis, selections, v, size, schedule)?;
            row.ratio_to_no_xa = row.gas as f64 / base_gas;
            rows.push(row);
        }
    }
    let mut fits = BTreeMap::new();
    if sizes.len() >= 2 {
        for &v in variants {
            let pts: Vec<&CostRow> = rows.iter().filter(|r| r.variant == v).collect();
            let xs: Vec<f64> = pts.iter().map(|r| r.size_bytes as f64).collect();
            let ys: Vec<f64> = pts.iter().map(|r| r.gas as f64).collect();
            fits.insert(v.label().to_string(), linear_fit(&xs, &ys)?);
        }
    }
    Ok(CostTable {
        model: analysis.model.name.clone(),
        selections: selections.iter().map(|s| s.to_string()).collect(),
        schedule,
        sizes: sizes.to_vec(),
        rows,
        fits,
    })
}

/// The region spanning the whole m1/m2 chain.
fn whole_chain(analysis: &Analysis) -> Result<String, CostError> {
    analysis
        .forest
        .report(&analysis.dag)
        .into_iter()
        .find(|r| r.member_ids.len() == analysis.dag.len())
        .map(|r| r.id)
        .ok_or_else(|| CostError::NoBenchmarkRegion("whole chain".into()))
}

/// The m1/m2 benchmark with one transaction over both tasks.
pub fn benchmark(sizes: &[u64], schedule: GasSchedule) -> Result<CostTable, CostError> {
    let analysis = Analysis::from_xml(fixtures::m1_m2().as_bytes())?;
    let region = whole_chain(&analysis)?;
    cost_table(&analysis, &[region.as_str()], sizes, schedule)
}

pub fn default_sizes() -> Vec<u64> {
    DEFAULT_SIZES_KIB.iter().map(|k| k * KIB).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPcRow {
    pub participants: usize,
    pub phase1_gas: u64,
    pub phase2_gas: u64,
    /// Protocol messages (prepare, vote, commit, ack) emitted.
    pub messages: u64,
    pub total_gas: u64,
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPcTable {
    pub schedule: GasSchedule,
    pub rows: Vec<TwoPcRow>,
    pub phase1: LinearFit,
    pub phase2: LinearFit,
    /// Largest |phase2 - phase1| / phase1 over the rows.
    pub max_phase_gap: f64,
}

/// Selection for the diamond model: the interval over all diamonds as
/// parent and each diamond as a child.
pub fn diamond_selection(analysis: &Analysis, n: usize) -> Result<Vec<String>, CostError> {
    let regions = analysis.forest.report(&analysis.dag);
    let last = format!("j{n}");
    let parent = regions
        .iter()
        .find(|r| r.entry_id == "g1" && r.exit_id == last && r.kind != RegionKind::Canonical)
        .ok_or_else(|| CostError::NoBenchmarkRegion(format!("interval g1..{last}")))?;
    let mut out = vec![parent.id.clone()];
    for i in 1..=n {
        let g = format!("g{i}");
        let child = regions
            .iter()
            .find(|r| r.entry_id == g && r.kind == RegionKind::Canonical)
            .ok_or_else(|| CostError::NoBenchmarkRegion(format!("diamond {g}")))?;
        out.push(child.id.clone());
    }
    Ok(out)
}

pub fn two_pc_row(n: usize, schedule: GasSchedule) -> Result<TwoPcRow, CostError> {
    let analysis = Analysis::from_xml(fixtures::diamonds(n).as_bytes())?;
    let sel = diamond_selection(&analysis, n)?;
    let sel: Vec<&str> = sel.iter().map(String::as_str).collect();
    let pkg = analysis.compile(&PlanInput::new(&sel, Mechanism::ScAll, false), SynthOptions::default(), &GenerateOptions::default())?;
    let rt = drive(&pkg, &run_options(schedule), &|_| json!({ "x": 1 }))?;
    let phase_gas = |p: &str| rt.steps().iter().filter(|s| s.phase.as_deref() == Some(p)).map(|s| s.gas).sum();
    let messages = rt
        .steps()
        .iter()
        .filter(|s| matches!(s.phase.as_deref(), Some("phase1" | "phase2")))
        .map(|s| s.usage.events)
        .sum();
    Ok(TwoPcRow {
        participants: n,
        phase1_gas: phase_gas("phase1"),
        phase2_gas: phase_gas("phase2"),
        messages,
        total_gas: rt.ledger().total_gas(),
        committed: rt.is_complete() && rt.errors().is_empty(),
    })
}

pub fn two_pc_benchmark(ns: &[usize], schedule: GasSchedule) -> Result<TwoPcTable, CostError> {
    let rows = ns.iter().map(|&n| two_pc_row(n, schedule)).collect::<Result<Vec<_>, _>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.participants as f64).collect();
    let p1: Vec<f64> = rows.iter().map(|r| r.phase1_gas as f64).collect();
    let p2: Vec<f64> = rows.iter().map(|r| r.phase2_gas as f64).collect();
    let max_phase_gap = rows
        .iter()
        .map(|r| (r.phase2_gas as f64 - r.phase1_gas as f64).abs() / r.phase1_gas as f64)
        .fold(0.0, f64::max);
    Ok(TwoPcTable { schedule, phase1: linear_fit(&xs, &p1)?, phase2: linear_fit(&xs, &p2)?, rows, max_phase_gap })
}

/// Cost ratios the schedule is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub sc_all_over_no_xa: f64,
    pub sc_2s_over_no_xa: f64,
    pub crypto_over_sc_2s: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        CalibrationTargets { sc_all_over_no_xa: 2.000, sc_2s_over_no_xa: 2.06, crypto_over_sc_2s: 1.95 }
    }
}

/// Usage vectors of one benchmark size, the input to calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInput {
    pub no_xa: Usage,
    pub sc_all: Usage,
    pub sc_2s: Usage,
    pub sc_2s_crypto: Usage,
}

impl CalibrationInput {
    pub fn from_table(table: &CostTable, size: u64) -> Option<Self> {
        let u = |v| table.row(v, size).map(|r| r.usage);
        Some(CalibrationInput {
            no_xa: u(Variant::NoXa)?,
            sc_all: u(Variant::ScAll)?,
            sc_2s: u(Variant::Sc2s)?,
            sc_2s_crypto: u(Variant::Sc2sCrypto)?,
        })
    }

    pub fn ratios(&self, s: &GasSchedule) -> CalibrationTargets {
        let g = |u: &Usage| s.gas(u) as f64;
        CalibrationTargets {
            sc_all_over_no_xa: g(&self.sc_all) / g(&self.no_xa),
            sc_2s_over_no_xa: g(&self.sc_2s) / g(&self.no_xa),
            crypto_over_sc_2s: g(&self.sc_2s_crypto) / g(&self.sc_2s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub schedule: GasSchedule,
    pub achieved: CalibrationTargets,
    /// Largest absolute deviation from a target ratio.
    pub error: f64,
}

fn deviation(a: &CalibrationTargets, t: &CalibrationTargets) -> f64 {
    (a.sc_all_over_no_xa - t.sc_all_over_no_xa)
        .abs()
        .max((a.sc_2s_over_no_xa - t.sc_2s_over_no_xa).abs())
        .max((a.crypto_over_sc_2s - t.crypto_over_sc_2s).abs())
}

pub const CALIBRATION_TOLERANCE: f64 = 0.01;

fn squared(a: &CalibrationTargets, t: &CalibrationTargets) -> f64 {
    (a.sc_all_over_no_xa - t.sc_all_over_no_xa).powi(2)
        + (a.sc_2s_over_no_xa - t.sc_2s_over_no_xa).powi(2)
        + (a.crypto_over_sc_2s - t.crypto_over_sc_2s).powi(2)
}

/// Least-squares grid search over the per-byte event and crypto prices,
/// keeping the other prices of `base`. `base` itself wins ties, so targets
/// it already meets leave it unchanged. Fails when the best schedule still
/// misses some target by more than `tolerance`.
pub fn calibrate(
    input: &CalibrationInput,
    base: GasSchedule,
    targets: &CalibrationTargets,
    tolerance: f64,
) -> Result<Calibration, CostError> {
    let mut best = base;
    let mut best_sq = squared(&input.ratios(&base), targets);
    for e in 0..=64 {
        for c in 0..=2000 {
            let s = GasSchedule { per_event_byte: e, per_crypto_byte: c, ..base };
            let sq = squared(&input.ratios(&s), targets);
            if sq < best_sq {
                best = s;
                best_sq = sq;
            }
        }
    }
    let achieved = input.ratios(&best);
    let error = deviation(&achieved, targets);
    if error > tolerance {
        return Err(CostError::Uncalibratable { error, tolerance });
    }
    Ok(Calibration { schedule: best, achieved, error })
}

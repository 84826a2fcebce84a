//! Request-level operations shared by the command line and the HTTP service.
//! Both front ends render results with [`render`], so equal inputs give
//! byte-identical JSON.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::canonical::to_canonical_json;
use crate::codegen::{deserialize, serialize, CodegenError, ContractPackage, GenerateOptions};
use crate::cost::{
    benchmark, calibrate, cost_table, two_pc_benchmark, Calibration, CalibrationInput, CalibrationTargets, CostError,
    CostTable, TwoPcTable, CALIBRATION_TOLERANCE, KIB,
};
use crate::fsm::SynthOptions;
use crate::ledger::GasSchedule;
use crate::pipeline::{Analysis, AnalysisReport, PipelineError, PlanReport};
use crate::plan::{PlanError, PlanInput};
use crate::runtime::{parse_trace, run_trace, RuntimeOptions, TraceOutcome};

/// Structured error shared by both front ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Json,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorBody { code: code.into(), message: message.into(), detail: Json::Null }
    }

    pub fn with_detail(mut self, detail: Json) -> Self {
        self.detail = detail;
        self
    }
}

impl From<PipelineError> for ErrorBody {
    fn from(e: PipelineError) -> Self {
        let detail = match &e {
            PipelineError::Invalid(diags) => json!({ "diagnostics": diags }),
            PipelineError::Trace(t) => json!({ "line": t.line }),
            _ => Json::Null,
        };
        ErrorBody::new(e.code(), e.to_string()).with_detail(detail)
    }
}

impl From<CostError> for ErrorBody {
    fn from(e: CostError) -> Self {
        match e {
            CostError::Pipeline(p) => p.into(),
            other => ErrorBody::new(other.code(), other.to_string()),
        }
    }
}

impl From<PlanError> for ErrorBody {
    fn from(e: PlanError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<CodegenError> for ErrorBody {
    fn from(e: CodegenError) -> Self {
        PipelineError::from(e).into()
    }
}

pub type OpResult<T> = Result<T, ErrorBody>;

/// Canonical JSON output of every operation.
pub fn render<T: Serialize>(value: &T) -> String {
    to_canonical_json(value)
}

pub fn analyze(xml: &[u8]) -> OpResult<(Analysis, AnalysisReport)> {
    let analysis = Analysis::from_xml(xml)?;
    let report = analysis.report();
    Ok((analysis, report))
}

pub fn parse_plan(text: &str) -> OpResult<PlanInput> {
    Ok(PlanInput::from_json(text)?)
}

pub fn plan(analysis: &Analysis, input: &PlanInput) -> OpResult<PlanReport> {
    Ok(analysis.plan_report(input)?)
}

pub fn generate(analysis: &Analysis, input: &PlanInput, options: &GenerateOptions) -> OpResult<ContractPackage> {
    Ok(analysis.compile(input, SynthOptions::default(), options)?)
}

pub fn load_package(text: &str) -> OpResult<ContractPackage> {
    Ok(deserialize(text)?)
}

pub fn package_json(pkg: &ContractPackage) -> String {
    serialize(pkg)
}

/// Runs one JSON-lines trace to quiescence. A rejected input is part of the
/// outcome, not an error.
pub fn run(pkg: &ContractPackage, trace: &str, options: &RuntimeOptions) -> OpResult<TraceOutcome> {
    let inputs = parse_trace(trace).map_err(PipelineError::from)?;
    Ok(run_trace(pkg, &inputs, options).map_err(PipelineError::from)?)
}

/// Classification of one trace in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVerdict {
    pub name: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Set when the trace could not be parsed or run at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCheckSummary {
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    pub errors: usize,
    pub traces: Vec<TraceVerdict>,
}

/// Classifies named traces in the given order. Per-trace failures are
/// recorded and never stop the batch.
pub fn trace_check(pkg: &ContractPackage, traces: &[(String, String)], options: &RuntimeOptions) -> TraceCheckSummary {
    let verdicts: Vec<TraceVerdict> = traces
        .iter()
        .map(|(name, text)| match run(pkg, text, options) {
            Ok(o) => TraceVerdict {
                name: name.clone(),
                valid: o.valid,
                failing_step: o.failing_step,
                origin: o.origin,
                code: o.code,
                message: o.message,
                error: None,
            },
            Err(e) => TraceVerdict {
                name: name.clone(),
                valid: false,
                failing_step: None,
                origin: None,
                code: None,
                message: None,
                error: Some(e),
            },
        })
        .collect();
    let errors = verdicts.iter().filter(|v| v.error.is_some()).count();
    let valid = verdicts.iter().filter(|v| v.valid).count();
    TraceCheckSummary { total: verdicts.len(), valid, invalid: verdicts.len() - valid - errors, errors, traces: verdicts }
}

/// Parses a comma-separated size list such as `75KB,1024KB`. Bare numbers
/// are bytes; `KB` and `KiB` both mean 1024 bytes, `MB` and `MiB` 1024 KiB.
pub fn parse_sizes(text: &str) -> OpResult<Vec<u64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let upper = s.to_ascii_uppercase();
            let (digits, unit) = match upper.find(|c: char| !c.is_ascii_digit()) {
                Some(i) => upper.split_at(i),
                None => (upper.as_str(), ""),
            };
            let mult = match unit {
                "" | "B" => 1,
                "KB" | "KIB" | "K" => KIB,
                "MB" | "MIB" | "M" => KIB * KIB,
                _ => return Err(ErrorBody::new("BadSize", format!("unknown size unit in `{s}`"))),
            };
            let n: u64 = digits.parse().map_err(|_| ErrorBody::new("BadSize", format!("bad size `{s}`")))?;
            if n == 0 {
                return Err(ErrorBody::new("BadSize", "sizes must be positive"));
            }
            Ok(n * mult)
        })
        .collect()
}

/// Gas for every variant of the plan's selections at each payload size.
pub fn cost(analysis: &Analysis, input: &PlanInput, sizes: &[u64], schedule: GasSchedule) -> OpResult<CostTable> {
    analysis.plan(input)?;
    let selections: Vec<&str> = input.selections.iter().filter(|s| s.transaction).map(|s| s.region.as_str()).collect();
    Ok(cost_table(analysis, &selections, sizes, schedule)?)
}

/// The m1/m2 benchmark.
pub fn cost_benchmark(sizes: &[u64], schedule: GasSchedule) -> OpResult<CostTable> {
    Ok(benchmark(sizes, schedule)?)
}

pub fn cost_two_pc(participants: &[usize], schedule: GasSchedule) -> OpResult<TwoPcTable> {
    Ok(two_pc_benchmark(participants, schedule)?)
}

/// Fits the event and crypto byte prices of `base` on the m1/m2 benchmark
/// at `size` bytes.
pub fn cost_calibrate(size: u64, base: GasSchedule) -> OpResult<Calibration> {
    let table = benchmark(&[size], base)?;
    let input = CalibrationInput::from_table(&table, size)
        .ok_or_else(|| ErrorBody::new("NoBenchmarkRegion", "benchmark table lacks a variant"))?;
    Ok(calibrate(&input, base, &CalibrationTargets::default(), CALIBRATION_TOLERANCE)?)
}

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_compact_json;
use crate::codegen::ContractPackage;

use super::{ExternalInput, RunReport, Runtime, RuntimeError, RuntimeOptions};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("trace line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

/// Parses JSON lines, skipping blank lines. Line numbers are 1-based.
pub fn parse_trace(text: &str) -> Result<Vec<ExternalInput>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TraceError { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn trace_to_jsonl(inputs: &[ExternalInput]) -> String {
    inputs.iter().map(|i| to_compact_json(i) + "\n").collect()
}

/// Verdict on one trace. A trace is valid when every input is accepted and
/// the run reaches the end of the process without errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub valid: bool,
    pub accepted: usize,
    /// 0-based index of the first rejected input; equal to the trace length
    /// when every input was accepted but the run did not finish cleanly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub report: RunReport,
}

pub fn run_trace(
    pkg: &ContractPackage,
    inputs: &[ExternalInput],
    options: &RuntimeOptions,
) -> Result<TraceOutcome, RuntimeError> {
    let mut rt = Runtime::new(pkg.clone(), options.clone())?;
    for (i, input) in inputs.iter().enumerate() {
        if let Err(e) = rt.step_input(input) {
            return Ok(TraceOutcome {
                valid: false,
                accepted: i,
                failing_step: Some(i),
                origin: Some(input.origin.clone()),
                code: Some(e.code().into()),
                message: Some(e.to_string()),
                report: rt.report(),
            });
        }
    }
    let report = rt.report();
    let (code, message) = if !report.errors.is_empty() {
        (Some("RuntimeFailure".to_string()), Some(report.errors.join("; ")))
    } else if !report.completed {
        (Some("Incomplete".to_string()), Some(format!("still expecting {:?}", report.enabled)))
    } else {
        (None, None)
    };
    Ok(TraceOutcome {
        valid: code.is_none(),
        accepted: inputs.len(),
        failing_step: code.as_ref().map(|_| inputs.len()),
        origin: None,
        code,
        message,
        report,
    })
}

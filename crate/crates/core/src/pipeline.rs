//! End-to-end compilation shared by the command line and the HTTP service.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpmn::{normalize, parse_bpmn, validate, BpmnModel, Diagnostic, NormalizeError, ParseError};
use crate::codegen::{generate, CodegenError, ContractPackage, GenerateOptions};
use crate::fsm::{synthesize, DeFsmModel, SynthError, SynthOptions};
use crate::graph::{build_dag, dominators, DagError, FlowDag, GraphView};
use crate::plan::{method_partition, validate_selection, MethodPartition, PlanError, PlanInput, TxnPlan};
use crate::runtime::{RuntimeError, TraceError};
use crate::sese::{enumerate_candidates, RegionForest, RegionView, SeseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("model has {} error(s): {}", .0.len(), .0.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Sese(#[from] SeseError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl PipelineError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Parse(e) => match e {
                ParseError::XmlSyntax(_) => "XmlSyntax",
                ParseError::UnsupportedElement { .. } => "UnsupportedElement",
                ParseError::DanglingFlowRef { .. } => "DanglingFlowRef",
                ParseError::DuplicateId(_) => "DuplicateId",
                ParseError::DuplicateActor(_) => "DuplicateActor",
                ParseError::PoolBoundary { .. } => "PoolBoundary",
                ParseError::Guard { .. } => "GuardSyntax",
                ParseError::BadAttribute { .. } => "BadAttribute",
            },
            PipelineError::Invalid(_) => "ModelInvalid",
            PipelineError::Normalize(_) => "NormalizeFailed",
            PipelineError::Dag(e) => match e {
                DagError::CycleDetected(_) => "CycleDetected",
                _ => "DagInvalid",
            },
            PipelineError::Sese(_) => "ContainmentViolation",
            PipelineError::Plan(e) => e.code(),
            PipelineError::Synth(e) => match e {
                SynthError::PlanRegionUnknown(_) => "PlanRegionUnknown",
                SynthError::UnguardedExclusiveFork(_) => "UnguardedExclusiveFork",
                SynthError::TooManyTokens(..) => "TooManyTokens",
                SynthError::ParallelGateway(_) => "ParallelGateway",
            },
            PipelineError::Codegen(e) => match e {
                CodegenError::IsolationViolation(_) => "IsolationViolation",
                CodegenError::SchemaVersionMismatch(_) => "SchemaVersionMismatch",
                CodegenError::CorruptPackage(_) => "CorruptPackage",
            },
            PipelineError::Runtime(e) => e.code(),
            PipelineError::Trace(_) => "TraceSyntax",
        }
    }
}

/// Parses, validates and normalizes a model. Warnings are returned
/// alongside; any error diagnostic fails the load.
pub fn load_model(xml: &[u8]) -> Result<(BpmnModel, Vec<Diagnostic>), PipelineError> {
    let model = parse_bpmn(xml)?;
    let diags = validate(&model);
    if diags.iter().any(Diagnostic::is_error) {
        return Err(PipelineError::Invalid(diags.into_iter().filter(Diagnostic::is_error).collect()));
    }
    Ok((normalize(&model)?, diags))
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub model: BpmnModel,
    pub diagnostics: Vec<Diagnostic>,
    pub dag: FlowDag,
    pub forest: RegionForest,
}

/// Serializable summary of an analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub model: String,
    pub actors: Vec<String>,
    pub graph: GraphView,
    pub candidates: Vec<RegionView>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Plan summary with the method partition it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub plan: TxnPlan,
    pub methods: MethodPartition,
    pub method_count: usize,
}

impl Analysis {
    pub fn from_xml(xml: &[u8]) -> Result<Self, PipelineError> {
        let (model, diagnostics) = load_model(xml)?;
        Self::from_model(model, diagnostics)
    }

    /// Analyzes an already normalized model.
    pub fn from_model(model: BpmnModel, diagnostics: Vec<Diagnostic>) -> Result<Self, PipelineError> {
        let dag = build_dag(&model)?;
        let forest = enumerate_candidates(&dag, &dominators(&dag))?;
        Ok(Analysis { model, diagnostics, dag, forest })
    }

    pub fn report(&self) -> AnalysisReport {
        AnalysisReport {
            model: self.model.name.clone(),
            actors: self.model.actors.iter().map(|a| a.id.clone()).collect(),
            graph: self.dag.view(),
            candidates: self.forest.report(&self.dag),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn plan(&self, input: &PlanInput) -> Result<TxnPlan, PipelineError> {
        Ok(validate_selection(&self.dag, &self.forest, input)?)
    }

    pub fn plan_report(&self, input: &PlanInput) -> Result<PlanReport, PipelineError> {
        let plan = self.plan(input)?;
        let actors: Vec<String> = self.model.actors.iter().map(|a| a.id.clone()).collect();
        let methods = method_partition(&plan, &actors);
        Ok(PlanReport { method_count: methods.len(), plan, methods })
    }

    pub fn synthesize(&self, plan: &TxnPlan, synth: SynthOptions) -> Result<DeFsmModel, PipelineError> {
        Ok(synthesize(&self.dag, plan, synth)?)
    }

    pub fn compile(
        &self,
        input: &PlanInput,
        synth: SynthOptions,
        options: &GenerateOptions,
    ) -> Result<ContractPackage, PipelineError> {
        let plan = self.plan(input)?;
        let fsm = self.synthesize(&plan, synth)?;
        Ok(generate(&self.model, &fsm, &plan, synth, options)?)
    }
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagCode {
    LoopUnsupported,
    ParallelGateway,
    MultipleStart,
    MultipleEnd,
    MissingStart,
    MissingEnd,
    MixedGateway,
    DataBasedSplit,
    ImplicitMerge,
    PassGateway,
    BadEventDegree,
    Unreachable,
    DeadEnd,
    AmbiguousExclusiveFork,
    GuardFieldUndeclared,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: DiagCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<String>,
}

impl Diagnostic {
    fn error(code: DiagCode, element: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            code,
            message: message.into(),
            element: element.map(str::to_string),
        }
    }

    fn warning(code: DiagCode, element: Option<&str>, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            ..Diagnostic::error(code, element, message)
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

/// Finds one cycle over sequence and message flows, as a closed node list.
pub(crate) fn find_cycle(model: &BpmnModel) -> Option<Vec<String>> {
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (s, t) in model
        .sequence_flows
        .iter()
        .map(|f| (f.source.as_str(), f.target.as_str()))
        .chain(model.message_flows.iter().map(|f| (f.source.as_str(), f.target.as_str())))
    {
        succ.entry(s).or_default().push(t);
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color: BTreeMap<&str, u8> = BTreeMap::new();
    for start in model.nodes.iter().map(|n| n.id.as_str()) {
        if color.get(start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        color.insert(start, 1);
        while let Some(&mut (v, ref mut i)) = stack.last_mut() {
            let next = succ.get(v).and_then(|s| s.get(*i)).copied();
            *i += 1;
            match next {
                None => {
                    color.insert(v, 2);
                    stack.pop();
                }
                Some(w) => match color.get(w).copied().unwrap_or(0) {
                    0 => {
                        color.insert(w, 1);
                        stack.push((w, 0));
                    }
                    1 => {
                        let pos = stack.iter().position(|(x, _)| *x == w).unwrap_or(0);
                        let mut cycle: Vec<String> =
                            stack[pos..].iter().map(|(x, _)| x.to_string()).collect();
                        cycle.push(w.to_string());
                        return Some(cycle);
                    }
                    _ => {}
                },
            }
        }
    }
    None
}

/// Structural diagnostics. Errors block the pipeline; warnings describe
/// shapes that `normalize` repairs.
pub fn validate(model: &BpmnModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if let Some(cycle) = find_cycle(model) {
        out.push(Diagnostic::error(
            DiagCode::LoopUnsupported,
            cycle.first().map(String::as_str),
            format!("loop unsupported: cycle {}", cycle.join(" -> ")),
        ));
    }
    let deg = model.seq_degrees();
    let mut any_in: BTreeSet<&str> = BTreeSet::new();
    let mut any_out: BTreeSet<&str> = BTreeSet::new();
    for (s, t) in model
        .sequence_flows
        .iter()
        .map(|f| (f.source.as_str(), f.target.as_str()))
        .chain(model.message_flows.iter().map(|f| (f.source.as_str(), f.target.as_str())))
    {
        any_out.insert(s);
        any_in.insert(t);
    }
    let starts: Vec<&FlowNode> = model.nodes.iter().filter(|n| n.kind == NodeKind::StartEvent).collect();
    let ends: Vec<&FlowNode> = model.nodes.iter().filter(|n| n.kind == NodeKind::EndEvent).collect();
    match starts.len() {
        0 => out.push(Diagnostic::error(DiagCode::MissingStart, None, "model has no start event")),
        1 => {}
        k => out.push(Diagnostic::warning(
            DiagCode::MultipleStart,
            Some(&starts[1].id),
            format!("{k} start events; will be merged into one"),
        )),
    }
    match ends.len() {
        0 => out.push(Diagnostic::error(DiagCode::MissingEnd, None, "model has no end event")),
        1 => {}
        k => out.push(Diagnostic::warning(
            DiagCode::MultipleEnd,
            Some(&ends[1].id),
            format!("{k} end events; will be joined into one"),
        )),
    }
    for n in &model.nodes {
        let (i, o) = deg[n.id.as_str()];
        let id = Some(n.id.as_str());
        match n.kind {
            NodeKind::Gateway { gateway, role } => {
                if gateway == GatewayKind::Parallel {
                    out.push(Diagnostic::error(
                        DiagCode::ParallelGateway,
                        id,
                        "parallel gateways are not supported",
                    ));
                }
                if i == 0 || o == 0 {
                    out.push(Diagnostic::error(
                        DiagCode::DeadEnd,
                        id,
                        "gateway needs incoming and outgoing sequence flows",
                    ));
                } else {
                    match role {
                        GatewayRole::Mixed => out.push(Diagnostic::warning(
                            DiagCode::MixedGateway,
                            id,
                            format!("mixed gateway ({i} in / {o} out); will be split"),
                        )),
                        GatewayRole::Pass => out.push(Diagnostic::warning(
                            DiagCode::PassGateway,
                            id,
                            "gateway with a single in and out flow; will be removed",
                        )),
                        _ => {}
                    }
                }
                if gateway == GatewayKind::Exclusive && o > 1 {
                    let loose = model
                        .seq_out(&n.id)
                        .filter(|f| f.guard.is_none() && !f.is_default)
                        .count();
                    if loose > 1 {
                        out.push(Diagnostic::error(
                            DiagCode::AmbiguousExclusiveFork,
                            id,
                            format!("exclusive fork has {loose} unguarded branches"),
                        ));
                    }
                }
            }
            kind => {
                if o > 1 {
                    out.push(Diagnostic::error(
                        DiagCode::DataBasedSplit,
                        id,
                        format!("{} has {o} outgoing sequence flows; use a fork gateway", n.id),
                    ));
                }
                if i > 1 && kind != NodeKind::StartEvent {
                    out.push(Diagnostic::warning(
                        DiagCode::ImplicitMerge,
                        id,
                        format!("{i} incoming sequence flows; a join will be inserted"),
                    ));
                }
                if (kind == NodeKind::StartEvent && i > 0) || (kind == NodeKind::EndEvent && o > 0) {
                    out.push(Diagnostic::error(
                        DiagCode::BadEventDegree,
                        id,
                        "start events take no incoming and end events no outgoing sequence flows",
                    ));
                }
            }
        }
        if n.kind != NodeKind::StartEvent && !any_in.contains(n.id.as_str()) {
            out.push(Diagnostic::error(DiagCode::Unreachable, id, "node has no incoming flow"));
        }
        if n.kind != NodeKind::EndEvent && !any_out.contains(n.id.as_str()) {
            out.push(Diagnostic::error(DiagCode::DeadEnd, id, "node has no outgoing flow"));
        }
    }
    for f in &model.sequence_flows {
        let Some(g) = &f.guard else { continue };
        let src = model.node(&f.source).map(|n| n.kind);
        if !matches!(src, Some(NodeKind::Gateway { .. })) {
            out.push(Diagnostic::error(
                DiagCode::DataBasedSplit,
                Some(&f.id),
                "conditional flow must leave a fork gateway",
            ));
        }
        if let Some(schema) = &f.payload {
            for field in g.parse().fields() {
                let root = field.split('.').next().unwrap_or(&field);
                if !schema.fields.contains_key(root) {
                    out.push(Diagnostic::error(
                        DiagCode::GuardFieldUndeclared,
                        Some(&f.id),
                        format!("guard reads undeclared field `{field}`"),
                    ));
                }
            }
        }
    }
    out
}

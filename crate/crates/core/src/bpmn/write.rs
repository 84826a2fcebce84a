use std::fmt::Write as _;

use super::*;

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn write_spec(out: &mut String, model: &BpmnModel, node: &FlowNode) {
    if node.task_spec.as_ref().is_none_or(TaskSpec::is_empty) && node.callback.is_none() {
        return;
    }
    out.push_str("      <extensionElements>\n");
    if let Some(spec) = &node.task_spec {
        out.push_str("        <tabs:taskSpec>\n");
        for r in &spec.ledger_reads {
            let _ = writeln!(out, "          <tabs:read key=\"{}\"/>", esc(r));
        }
        for w in &spec.ledger_writes {
            let from = match &w.source {
                WriteSource::Generated => String::new(),
                WriteSource::Payload(f) => format!(" from=\"payload:{}\"", esc(f)),
                WriteSource::Read(k) => format!(" from=\"read:{}\"", esc(k)),
            };
            let _ = writeln!(
                out,
                "          <tabs:write key=\"{}\" size=\"{}\"{from}/>",
                esc(&w.key),
                w.size
            );
        }
        for e in &spec.emits {
            let to = model.actor(&e.to).map(|a| a.name.as_str()).unwrap_or(&e.to);
            let _ = writeln!(
                out,
                "          <tabs:emit to=\"{}\" message=\"{}\" size=\"{}\"/>",
                esc(to),
                esc(&e.message),
                e.size
            );
        }
        for size in &spec.offchain_puts {
            let _ = writeln!(out, "          <tabs:offchain size=\"{size}\"/>");
        }
        out.push_str("        </tabs:taskSpec>\n");
    }
    if let Some(cb) = &node.callback {
        let _ = writeln!(out, "        <tabs:callback name=\"{}\"/>", esc(cb));
    }
    out.push_str("      </extensionElements>\n");
}

fn payload_attr(p: &Option<PayloadSchema>) -> String {
    match p {
        Some(p) => format!(" tabs:payload=\"{}\"", esc(&p.to_attr())),
        None => String::new(),
    }
}

/// Serializes the model as BPMN 2.0 XML: one participant and process per
/// actor. Parsing the output yields the same model.
pub fn to_xml(model: &BpmnModel) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<definitions xmlns=\"{BPMN_NS}\" xmlns:tabs=\"{EXT_NS}\" id=\"definitions\" name=\"{}\">",
        esc(&model.name)
    );
    out.push_str("  <collaboration id=\"collaboration\">\n");
    for a in &model.actors {
        let _ = writeln!(
            out,
            "    <participant id=\"{}\" name=\"{}\" processRef=\"proc_{}\" tabs:credential=\"{}\"/>",
            esc(&a.id),
            esc(&a.name),
            esc(&a.id),
            esc(&a.credential)
        );
    }
    for f in &model.message_flows {
        let name = if f.name.is_empty() {
            String::new()
        } else {
            format!(" name=\"{}\"", esc(&f.name))
        };
        let _ = writeln!(
            out,
            "    <messageFlow id=\"{}\" sourceRef=\"{}\" targetRef=\"{}\"{name}{}/>",
            esc(&f.id),
            esc(&f.source),
            esc(&f.target),
            payload_attr(&f.payload)
        );
    }
    out.push_str("  </collaboration>\n");
    for a in &model.actors {
        let _ = writeln!(out, "  <process id=\"proc_{}\">", esc(&a.id));
        for n in model.nodes.iter().filter(|n| n.actor == a.id) {
            let (tag, extra, body) = match n.kind {
                NodeKind::StartEvent => ("startEvent", String::new(), None),
                NodeKind::EndEvent => ("endEvent", String::new(), None),
                NodeKind::Task => ("task", String::new(), None),
                NodeKind::MessageSend => ("intermediateThrowEvent", String::new(), Some("messageEventDefinition")),
                NodeKind::MessageReceive => ("intermediateCatchEvent", String::new(), Some("messageEventDefinition")),
                NodeKind::Gateway { gateway, .. } => {
                    let tag = match gateway {
                        GatewayKind::Exclusive => "exclusiveGateway",
                        GatewayKind::Inclusive => "inclusiveGateway",
                        GatewayKind::Parallel => "parallelGateway",
                    };
                    let default = model
                        .sequence_flows
                        .iter()
                        .find(|f| f.source == n.id && f.is_default)
                        .map(|f| format!(" default=\"{}\"", esc(&f.id)))
                        .unwrap_or_default();
                    (tag, default, None)
                }
            };
            let _ = writeln!(
                out,
                "    <{tag} id=\"{}\" name=\"{}\"{extra}>",
                esc(&n.id),
                esc(&n.label)
            );
            if let Some(b) = body {
                let _ = writeln!(out, "      <{b}/>");
            }
            write_spec(&mut out, model, n);
            let _ = writeln!(out, "    </{tag}>");
        }
        let owned: std::collections::BTreeSet<&str> = model
            .nodes
            .iter()
            .filter(|n| n.actor == a.id)
            .map(|n| n.id.as_str())
            .collect();
        for f in model.sequence_flows.iter().filter(|f| owned.contains(f.source.as_str())) {
            let _ = write!(
                out,
                "    <sequenceFlow id=\"{}\" sourceRef=\"{}\" targetRef=\"{}\"{}",
                esc(&f.id),
                esc(&f.source),
                esc(&f.target),
                payload_attr(&f.payload)
            );
            match &f.guard {
                Some(g) => {
                    let _ = writeln!(
                        out,
                        ">\n      <conditionExpression>{}</conditionExpression>\n    </sequenceFlow>",
                        esc(&g.0)
                    );
                }
                None => out.push_str("/>\n"),
            }
        }
        out.push_str("  </process>\n");
    }
    out.push_str("</definitions>\n");
    out
}

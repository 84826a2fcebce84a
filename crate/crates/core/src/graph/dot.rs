use std::fmt::Write as _;

use crate::bpmn::NodeKind;

use super::{EdgeKind, FlowDag};

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Graphviz dump of the DAG. Actors become clusters; optional `regions` are
/// listed as comments naming their members so overlays can be reconstructed.
pub fn to_dot(dag: &FlowDag, regions: &[(String, Vec<String>)]) -> String {
    let mut out = String::from("digraph flow {\n  rankdir=LR;\n  node [fontsize=10];\n");
    let mut actors: Vec<&str> = dag.vertices.iter().map(|v| v.actor.as_str()).collect();
    actors.sort_unstable();
    actors.dedup();
    for (i, actor) in actors.iter().enumerate() {
        let _ = writeln!(out, "  subgraph cluster_{i} {{\n    label={};", quote(actor));
        for v in dag.vertices.iter().filter(|v| v.actor == *actor) {
            let shape = match v.kind {
                NodeKind::StartEvent | NodeKind::EndEvent => "circle",
                NodeKind::Gateway { .. } => "diamond",
                NodeKind::MessageSend | NodeKind::MessageReceive => "doublecircle",
                NodeKind::Task => "box",
            };
            let label = if v.label.is_empty() { &v.id } else { &v.label };
            let _ = writeln!(out, "    {} [label={}, shape={shape}];", quote(&v.id), quote(label));
        }
        out.push_str("  }\n");
    }
    for e in &dag.edges {
        let style = match e.kind {
            EdgeKind::Sequence => "solid",
            EdgeKind::Message => "dashed",
        };
        let guard = e
            .guard
            .as_ref()
            .map(|g| format!(", label={}", quote(&g.0)))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "  {} -> {} [style={style}{guard}];",
            quote(&dag.vertices[e.source].id),
            quote(&dag.vertices[e.target].id)
        );
    }
    for (id, members) in regions {
        let _ = writeln!(out, "  // region {id}: {}", members.join(", "));
    }
    out.push_str("}\n");
    out
}

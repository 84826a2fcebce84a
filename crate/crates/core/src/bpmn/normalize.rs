use std::collections::BTreeSet;

use thiserror::Error;

use super::validate::find_cycle;
use super::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormalizeError {
    #[error("model cannot be normalized: {0}")]
    NotNormalizable(String),
}

fn fresh_id(model: &BpmnModel, base: &str) -> String {
    let taken: BTreeSet<&str> = model
        .nodes
        .iter()
        .map(|n| n.id.as_str())
        .chain(model.sequence_flows.iter().map(|f| f.id.as_str()))
        .chain(model.message_flows.iter().map(|f| f.id.as_str()))
        .chain(model.actors.iter().map(|a| a.id.as_str()))
        .collect();
    if !taken.contains(base) {
        return base.to_string();
    }
    (2..).map(|i| format!("{base}_{i}")).find(|c| !taken.contains(c.as_str())).unwrap()
}

fn gateway(id: String, actor: String, gateway: GatewayKind, label: String) -> FlowNode {
    FlowNode {
        id,
        actor,
        kind: NodeKind::Gateway { gateway, role: GatewayRole::Pass },
        label,
        task_spec: None,
        callback: None,
    }
}

fn seq(id: String, source: String, target: String) -> SequenceFlow {
    SequenceFlow { id, source, target, guard: None, is_default: false, payload: None }
}

/// Adds a flow between two nodes, as a sequence flow inside one actor or a
/// message flow across actors.
fn connect(model: &mut BpmnModel, id: String, source: String, target: String) {
    let sa = model.node(&source).map(|n| n.actor.clone());
    let ta = model.node(&target).map(|n| n.actor.clone());
    if sa == ta {
        model.sequence_flows.push(seq(id, source, target));
    } else {
        model.message_flows.push(MessageFlow { id, source, target, name: String::new(), payload: None });
    }
}

fn remove_pass_gateways(model: &mut BpmnModel) {
    loop {
        let deg = model.seq_degrees();
        let msg_attached: BTreeSet<&str> = model
            .message_flows
            .iter()
            .flat_map(|f| [f.source.as_str(), f.target.as_str()])
            .collect();
        let victim = model.nodes.iter().find(|n| {
            matches!(n.kind, NodeKind::Gateway { .. })
                && deg[n.id.as_str()] == (1, 1)
                && !msg_attached.contains(n.id.as_str())
        });
        let Some(g) = victim.map(|n| n.id.clone()) else { return };
        let out_idx = model.sequence_flows.iter().position(|f| f.source == g).unwrap();
        let out = model.sequence_flows.remove(out_idx);
        let inc = model.sequence_flows.iter_mut().find(|f| f.target == g).unwrap();
        inc.target = out.target;
        model.nodes.retain(|n| n.id != g);
    }
}

fn split_mixed_gateways(model: &mut BpmnModel) {
    let mixed: Vec<FlowNode> = model
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Gateway { role: GatewayRole::Mixed, .. }))
        .cloned()
        .collect();
    for g in mixed {
        let NodeKind::Gateway { gateway: kind, .. } = g.kind else { unreachable!() };
        let fork_id = fresh_id(model, &format!("{}__fork", g.id));
        let flow_id = fresh_id(model, &format!("{}__split", g.id));
        let pos = model.nodes.iter().position(|n| n.id == g.id).unwrap();
        model
            .nodes
            .insert(pos + 1, gateway(fork_id.clone(), g.actor.clone(), kind, g.label.clone()));
        for f in model.sequence_flows.iter_mut().filter(|f| f.source == g.id) {
            f.source = fork_id.clone();
        }
        model.sequence_flows.push(seq(flow_id, g.id.clone(), fork_id));
    }
}

fn insert_merges(model: &mut BpmnModel) {
    let deg = model.seq_degrees();
    let targets: Vec<FlowNode> = model
        .nodes
        .iter()
        .filter(|n| !n.kind.is_gateway() && deg[n.id.as_str()].0 > 1)
        .cloned()
        .collect();
    for n in targets {
        let join_id = fresh_id(model, &format!("{}__merge", n.id));
        let flow_id = fresh_id(model, &format!("{}__merge_flow", n.id));
        let pos = model.nodes.iter().position(|m| m.id == n.id).unwrap();
        model.nodes.insert(
            pos,
            gateway(join_id.clone(), n.actor.clone(), GatewayKind::Inclusive, String::new()),
        );
        for f in model.sequence_flows.iter_mut().filter(|f| f.target == n.id) {
            f.target = join_id.clone();
        }
        model.sequence_flows.push(seq(flow_id, join_id, n.id.clone()));
    }
}

fn merge_starts(model: &mut BpmnModel) {
    let starts: Vec<String> = model
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::StartEvent)
        .map(|n| n.id.clone())
        .collect();
    if starts.len() < 2 {
        return;
    }
    let actor = model.node(&starts[0]).unwrap().actor.clone();
    let init = fresh_id(model, "__init");
    let fork = fresh_id(model, "__init_fork");
    let flow = fresh_id(model, "__init_flow");
    // old starts become catch events fed by the new fork
    for n in model.nodes.iter_mut().filter(|n| starts.contains(&n.id)) {
        n.kind = NodeKind::MessageReceive;
    }
    model.nodes.insert(
        0,
        FlowNode {
            id: init.clone(),
            actor: actor.clone(),
            kind: NodeKind::StartEvent,
            label: INIT_LABEL.into(),
            task_spec: None,
            callback: None,
        },
    );
    model.nodes.insert(1, gateway(fork.clone(), actor, GatewayKind::Inclusive, String::new()));
    model.sequence_flows.push(seq(flow, init, fork.clone()));
    for s in starts {
        let id = fresh_id(model, &format!("__init_to_{s}"));
        connect(model, id, fork.clone(), s);
    }
}

fn merge_ends(model: &mut BpmnModel) {
    let ends: Vec<String> = model
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::EndEvent)
        .map(|n| n.id.clone())
        .collect();
    if ends.len() < 2 {
        return;
    }
    let actor = model.node(&ends[0]).unwrap().actor.clone();
    let success = fresh_id(model, "__success");
    let join = fresh_id(model, "__success_join");
    let flow = fresh_id(model, "__success_flow");
    for n in model.nodes.iter_mut().filter(|n| ends.contains(&n.id)) {
        n.kind = NodeKind::MessageSend;
    }
    model.nodes.push(gateway(join.clone(), actor.clone(), GatewayKind::Inclusive, String::new()));
    model.nodes.push(FlowNode {
        id: success.clone(),
        actor,
        kind: NodeKind::EndEvent,
        label: SUCCESS_LABEL.into(),
        task_spec: None,
        callback: None,
    });
    model.sequence_flows.push(seq(flow, join.clone(), success));
    for e in ends {
        let id = fresh_id(model, &format!("__{e}_to_success"));
        connect(model, id, e, join.clone());
    }
}

/// Rewrites the model into well-formed shape: one start labelled INIT, one end
/// labelled SUCCESS, pure fork and join gateways, no implicit merges.
/// Applying it to its own output changes nothing.
pub fn normalize(model: &BpmnModel) -> Result<BpmnModel, NormalizeError> {
    let mut m = model.clone();
    m.refresh_gateway_roles();
    remove_pass_gateways(&mut m);
    m.refresh_gateway_roles();
    split_mixed_gateways(&mut m);
    insert_merges(&mut m);
    merge_starts(&mut m);
    merge_ends(&mut m);
    for n in &mut m.nodes {
        match n.kind {
            NodeKind::StartEvent => n.label = INIT_LABEL.into(),
            NodeKind::EndEvent => n.label = SUCCESS_LABEL.into(),
            _ => {}
        }
    }
    m.refresh_gateway_roles();

    let bad = |msg: String| Err(NormalizeError::NotNormalizable(msg));
    if let Some(cycle) = find_cycle(&m) {
        return bad(format!("cycle {}", cycle.join(" -> ")));
    }
    m.check_invariants()
        .map_err(|e| NormalizeError::NotNormalizable(e.to_string()))?;
    let deg = m.seq_degrees();
    for n in &m.nodes {
        let (_, o) = deg[n.id.as_str()];
        match n.kind {
            NodeKind::Gateway { gateway: GatewayKind::Parallel, .. } => {
                return bad(format!("parallel gateway `{}`", n.id))
            }
            NodeKind::Gateway { role: GatewayRole::Mixed | GatewayRole::Pass, .. } => {
                return bad(format!("gateway `{}` is neither a fork nor a join", n.id))
            }
            NodeKind::Gateway { .. } => {}
            _ if o > 1 => return bad(format!("data-based split at `{}`", n.id)),
            _ => {}
        }
    }
    let starts = m.nodes.iter().filter(|n| n.kind == NodeKind::StartEvent).count();
    let ends = m.nodes.iter().filter(|n| n.kind == NodeKind::EndEvent).count();
    if starts != 1 || ends != 1 {
        return bad(format!("{starts} start and {ends} end events"));
    }
    Ok(m)
}

use std::collections::BTreeMap;

use roxmltree::{Document, Node};

use super::*;

fn is_bpmn(n: &Node) -> bool {
    n.is_element() && matches!(n.tag_name().namespace(), None | Some(BPMN_NS))
}

fn is_ext(n: &Node) -> bool {
    n.is_element() && n.tag_name().namespace() == Some(EXT_NS)
}

fn attr(n: &Node, name: &str) -> Option<String> {
    n.attribute(name).map(str::to_string)
}

fn ext_attr(n: &Node, name: &str) -> Option<String> {
    n.attribute((EXT_NS, name)).map(str::to_string)
}

fn id_of(n: &Node) -> String {
    attr(n, "id").unwrap_or_default()
}

fn unsupported(n: &Node) -> ParseError {
    ParseError::UnsupportedElement {
        id: id_of(n),
        tag: n.tag_name().name().to_string(),
    }
}

fn required(n: &Node, name: &str) -> Result<String, ParseError> {
    attr(n, name).ok_or_else(|| ParseError::BadAttribute {
        id: id_of(n),
        message: format!("missing `{name}` on <{}>", n.tag_name().name()),
    })
}

fn parse_size(n: &Node, name: &str) -> Result<u64, ParseError> {
    match n.attribute(name) {
        None => Ok(0),
        Some(s) => s.trim().parse().map_err(|_| ParseError::BadAttribute {
            id: id_of(n),
            message: format!("`{name}` must be a non-negative integer, got `{s}`"),
        }),
    }
}

fn parse_payload(n: &Node) -> Result<Option<PayloadSchema>, ParseError> {
    match ext_attr(n, "payload") {
        None => Ok(None),
        Some(text) => PayloadSchema::parse_attr(&text)
            .map(Some)
            .ok_or_else(|| ParseError::BadAttribute {
                id: id_of(n),
                message: format!("bad payload schema `{text}`"),
            }),
    }
}

/// Task effects and callback binding, with `emit` targets still unresolved.
fn parse_extensions(n: &Node) -> Result<(Option<TaskSpec>, Option<String>), ParseError> {
    let mut spec = None;
    let mut callback = None;
    for ext in n.children().filter(|c| is_bpmn(c) && c.tag_name().name() == "extensionElements") {
        for child in ext.children().filter(is_ext) {
            match child.tag_name().name() {
                "taskSpec" => {
                    let mut s = TaskSpec::default();
                    for e in child.children().filter(is_ext) {
                        match e.tag_name().name() {
                            "read" => s.ledger_reads.push(required(&e, "key")?),
                            "write" => {
                                let source = match e.attribute("from") {
                                    None => WriteSource::Generated,
                                    Some(from) => match from.split_once(':') {
                                        Some(("payload", field)) => WriteSource::Payload(field.to_string()),
                                        Some(("read", key)) => WriteSource::Read(key.to_string()),
                                        _ => {
                                            return Err(ParseError::BadAttribute {
                                                id: id_of(n),
                                                message: format!("bad write source `{from}`"),
                                            })
                                        }
                                    },
                                };
                                s.ledger_writes.push(LedgerWrite {
                                    key: required(&e, "key")?,
                                    size: parse_size(&e, "size")?,
                                    source,
                                });
                            }
                            "emit" => s.emits.push(EmitSpec {
                                to: required(&e, "to")?,
                                message: required(&e, "message")?,
                                size: parse_size(&e, "size")?,
                            }),
                            "offchain" => s.offchain_puts.push(parse_size(&e, "size")?),
                            _ => return Err(unsupported(&e)),
                        }
                    }
                    spec = Some(s);
                }
                "callback" => callback = Some(required(&child, "name")?),
                _ => return Err(unsupported(&child)),
            }
        }
    }
    Ok((spec, callback))
}

fn has_message_definition(n: &Node) -> bool {
    n.children()
        .any(|c| is_bpmn(&c) && c.tag_name().name() == "messageEventDefinition")
}

struct Pool<'a> {
    process: Node<'a, 'a>,
    actor: Option<Actor>,
}

/// Parses a BPMN 2.0 XML document restricted to the supported vocabulary.
pub fn parse_bpmn(xml: &[u8]) -> Result<BpmnModel, ParseError> {
    let text = std::str::from_utf8(xml).map_err(|e| ParseError::XmlSyntax(e.to_string()))?;
    let doc = Document::parse(text).map_err(|e| ParseError::XmlSyntax(e.to_string()))?;
    let root = doc.root_element();
    if !is_bpmn(&root) || root.tag_name().name() != "definitions" {
        return Err(unsupported(&root));
    }
    let name = attr(&root, "name").or_else(|| attr(&root, "id")).unwrap_or_default();

    let mut participants: BTreeMap<String, Actor> = BTreeMap::new();
    let mut message_flow_nodes = Vec::new();
    let mut processes = Vec::new();
    for child in root.children().filter(Node::is_element) {
        if !is_bpmn(&child) {
            continue;
        }
        match child.tag_name().name() {
            "collaboration" => {
                for c in child.children().filter(Node::is_element) {
                    match c.tag_name().name() {
                        "participant" => {
                            let id = required(&c, "id")?;
                            let actor = Actor {
                                name: attr(&c, "name").unwrap_or_else(|| id.clone()),
                                credential: ext_attr(&c, "credential").unwrap_or_else(|| id.clone()),
                                id,
                            };
                            let pref = attr(&c, "processRef").unwrap_or_default();
                            participants.insert(pref, actor);
                        }
                        "messageFlow" => message_flow_nodes.push(c),
                        "documentation" | "extensionElements" | "textAnnotation" | "association" => {}
                        _ => return Err(unsupported(&c)),
                    }
                }
            }
            "process" => processes.push(child),
            "message" | "documentation" | "extensionElements" | "itemDefinition" => {}
            _ => {}
        }
    }

    let mut pools = Vec::new();
    for p in processes {
        let pid = id_of(&p);
        let actor = participants.remove(&pid).or_else(|| {
            Some(Actor {
                id: pid.clone(),
                name: attr(&p, "name").unwrap_or_else(|| pid.clone()),
                credential: ext_attr(&p, "credential").unwrap_or_else(|| pid.clone()),
            })
        });
        pools.push(Pool { process: p, actor });
    }
    let mut actors: Vec<Actor> = Vec::new();

    let mut nodes = Vec::new();
    let mut sequence_flows = Vec::new();
    let mut defaults: BTreeMap<String, String> = BTreeMap::new();
    for pool in &pools {
        let p = pool.process;
        let pool_actor = pool.actor.clone().expect("pool actor");
        let mut lane_of: BTreeMap<String, String> = BTreeMap::new();
        let mut lane_actors = Vec::new();
        for ls in p.children().filter(|c| is_bpmn(c) && c.tag_name().name() == "laneSet") {
            for lane in ls.children().filter(|c| is_bpmn(c) && c.tag_name().name() == "lane") {
                let lid = required(&lane, "id")?;
                for r in lane.children().filter(|c| is_bpmn(c) && c.tag_name().name() == "flowNodeRef") {
                    lane_of.insert(r.text().unwrap_or("").trim().to_string(), lid.clone());
                }
                lane_actors.push(Actor {
                    name: attr(&lane, "name").unwrap_or_else(|| lid.clone()),
                    credential: ext_attr(&lane, "credential").unwrap_or_else(|| lid.clone()),
                    id: lid,
                });
            }
        }
        let use_lanes = !lane_actors.is_empty();
        if use_lanes {
            actors.extend(lane_actors);
        } else {
            actors.push(pool_actor.clone());
        }
        for c in p.children().filter(Node::is_element) {
            if !is_bpmn(&c) {
                continue;
            }
            let tag = c.tag_name().name();
            let kind = match tag {
                "startEvent" => Some(NodeKind::StartEvent),
                "endEvent" => Some(NodeKind::EndEvent),
                "task" => Some(NodeKind::Task),
                "exclusiveGateway" | "inclusiveGateway" | "parallelGateway" => {
                    let gateway = match tag {
                        "exclusiveGateway" => GatewayKind::Exclusive,
                        "inclusiveGateway" => GatewayKind::Inclusive,
                        _ => GatewayKind::Parallel,
                    };
                    if let Some(d) = attr(&c, "default") {
                        defaults.insert(d, id_of(&c));
                    }
                    Some(NodeKind::Gateway { gateway, role: GatewayRole::Pass })
                }
                "intermediateThrowEvent" if has_message_definition(&c) => Some(NodeKind::MessageSend),
                "intermediateCatchEvent" if has_message_definition(&c) => Some(NodeKind::MessageReceive),
                "sequenceFlow" => None,
                "laneSet" | "documentation" | "extensionElements" | "textAnnotation" | "association" => continue,
                _ => return Err(unsupported(&c)),
            };
            let id = required(&c, "id")?;
            match kind {
                Some(kind) => {
                    let actor = if use_lanes {
                        lane_of.get(&id).cloned().ok_or_else(|| ParseError::BadAttribute {
                            id: id.clone(),
                            message: "node is not assigned to any lane".into(),
                        })?
                    } else {
                        pool_actor.id.clone()
                    };
                    let (mut task_spec, callback) = parse_extensions(&c)?;
                    if kind == NodeKind::Task && task_spec.is_none() && callback.is_none() {
                        task_spec = Some(TaskSpec::default());
                    }
                    if kind.is_gateway() {
                        task_spec = None;
                    }
                    nodes.push(FlowNode {
                        id,
                        actor,
                        kind,
                        label: attr(&c, "name").unwrap_or_default(),
                        task_spec,
                        callback: if kind.is_gateway() { None } else { callback },
                    });
                }
                None => {
                    let guard = match c
                        .children()
                        .find(|g| is_bpmn(g) && g.tag_name().name() == "conditionExpression")
                    {
                        None => None,
                        Some(g) => {
                            let text = g.text().unwrap_or("").trim();
                            let parsed = Guard::parse(text).map_err(|error| ParseError::Guard {
                                flow: id.clone(),
                                error,
                            })?;
                            Some(GuardText::new(&parsed))
                        }
                    };
                    sequence_flows.push(SequenceFlow {
                        source: required(&c, "sourceRef")?,
                        target: required(&c, "targetRef")?,
                        guard,
                        is_default: false,
                        payload: parse_payload(&c)?,
                        id,
                    });
                }
            }
        }
    }
    for (flow, _) in defaults {
        match sequence_flows.iter_mut().find(|f| f.id == flow) {
            Some(f) => f.is_default = true,
            None => {
                return Err(ParseError::DanglingFlowRef { flow: flow.clone(), node: flow })
            }
        }
    }
    let mut message_flows = Vec::new();
    for c in message_flow_nodes {
        message_flows.push(MessageFlow {
            id: required(&c, "id")?,
            source: required(&c, "sourceRef")?,
            target: required(&c, "targetRef")?,
            name: attr(&c, "name").unwrap_or_default(),
            payload: parse_payload(&c)?,
        });
    }
    let mut model = BpmnModel { name, actors, nodes, sequence_flows, message_flows };
    resolve_emit_targets(&mut model)?;
    model.check_invariants()?;
    model.refresh_gateway_roles();
    Ok(model)
}

/// `emit to` may name an actor by display name or by id; store the id.
fn resolve_emit_targets(model: &mut BpmnModel) -> Result<(), ParseError> {
    let by_name: BTreeMap<String, String> = model
        .actors
        .iter()
        .flat_map(|a| [(a.name.clone(), a.id.clone()), (a.id.clone(), a.id.clone())])
        .collect();
    for n in &mut model.nodes {
        if let Some(spec) = &mut n.task_spec {
            for e in &mut spec.emits {
                e.to = by_name.get(&e.to).cloned().ok_or_else(|| ParseError::BadAttribute {
                    id: n.id.clone(),
                    message: format!("emit target `{}` is not an actor", e.to),
                })?;
            }
        }
    }
    Ok(())
}

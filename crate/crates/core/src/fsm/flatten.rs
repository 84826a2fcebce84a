use super::{DeFsmModel, Fsm, State, Transition};

fn entry(offsets: &[usize], subs: &[Option<Fsm>], state: usize) -> usize {
    offsets[state] + subs[state].as_ref().map_or(0, |s| s.initial)
}

/// Replaces every hierarchical state by the states of its sub-machine.
/// Sub-machine transitions are listed before the enclosing state's own,
/// which leave from each terminal sub-state.
pub fn flatten_fsm(machine: &Fsm) -> Fsm {
    if machine.is_flat() {
        return machine.clone();
    }
    let subs: Vec<Option<Fsm>> = machine
        .states
        .iter()
        .map(|s| s.sub.as_deref().map(flatten_fsm))
        .collect();
    let mut offsets = Vec::with_capacity(machine.states.len());
    let mut states = Vec::new();
    for (s, sub) in machine.states.iter().zip(&subs) {
        offsets.push(states.len());
        match sub {
            None => states.push(State::plain(s.name.clone())),
            Some(m) => states.extend(m.states.iter().map(|x| State::plain(format!("{}/{}", s.name, x.name)))),
        }
    }
    let inner_terminals = |s: usize| -> Vec<usize> {
        match &subs[s] {
            None => vec![offsets[s]],
            Some(m) => m.terminal.iter().map(|t| offsets[s] + t).collect(),
        }
    };
    let mut transitions = Vec::new();
    for s in 0..machine.states.len() {
        if let Some(m) = &subs[s] {
            transitions.extend(m.transitions.iter().map(|t| Transition {
                from: offsets[s] + t.from,
                to: offsets[s] + t.to,
                ..t.clone()
            }));
        }
        for t in machine.transitions.iter().filter(|t| t.from == s) {
            for from in inner_terminals(s) {
                transitions.push(Transition {
                    from,
                    to: entry(&offsets, &subs, t.to),
                    ..t.clone()
                });
            }
        }
    }
    let terminal = machine.terminal.iter().flat_map(|&t| inner_terminals(t)).collect();
    Fsm {
        id: machine.id.clone(),
        owner: machine.owner.clone(),
        kind: machine.kind,
        vertices: machine.vertices.clone(),
        states,
        initial: entry(&offsets, &subs, machine.initial),
        terminal,
        transitions,
    }
}

pub fn flatten(model: &DeFsmModel) -> DeFsmModel {
    let mut out = model.clone();
    for m in out.machines_mut() {
        *m = flatten_fsm(m);
    }
    out
}

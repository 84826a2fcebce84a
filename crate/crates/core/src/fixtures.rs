//! Bundled and generated models.

/// The supply-chain collaboration used throughout the tests and examples.
pub const SUPPLY_CHAIN: &str = include_str!("../fixtures/supply_chain.bpmn");

const HEADER: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<definitions xmlns="http://www.omg.org/spec/BPMN/20100524/MODEL"
             xmlns:tabs="urn:tabsplus:ext:1""#;

fn task(id: &str, name: &str, spec: &str) -> String {
    format!(
        "    <task id=\"{id}\" name=\"{name}\">\n      <extensionElements>\n        <tabs:taskSpec>\n{spec}        </tabs:taskSpec>\n      </extensionElements>\n    </task>\n"
    )
}

fn flow(id: &str, from: &str, to: &str) -> String {
    format!("    <sequenceFlow id=\"{id}\" sourceRef=\"{from}\" targetRef=\"{to}\"/>\n")
}

/// Two-task benchmark: `m1` stores the `data` field of its input as
/// `obj1`; `m2` reads `obj1` and stores a copy as `obj2`.
pub fn m1_m2() -> String {
    let mut body = String::new();
    body.push_str("    <startEvent id=\"init\" name=\"INIT\"/>\n");
    body.push_str(&task("m1", "m1", "          <tabs:write key=\"obj1/{run}\" size=\"0\" from=\"payload:data\"/>\n"));
    body.push_str(&task(
        "m2",
        "m2",
        "          <tabs:read key=\"obj1/{run}\"/>\n          <tabs:write key=\"obj2/{run}\" size=\"0\" from=\"read:obj1/{run}\"/>\n",
    ));
    body.push_str("    <endEvent id=\"success\" name=\"SUCCESS\"/>\n");
    body.push_str(&flow("f1", "init", "m1"));
    body.push_str(&flow("f2", "m1", "m2"));
    body.push_str(&flow("f3", "m2", "success"));
    format!(
        "{HEADER}\n             id=\"bench\" name=\"m1-m2 benchmark\">\n  <collaboration id=\"c\">\n    <participant id=\"client\" name=\"Client\" processRef=\"p\"/>\n  </collaboration>\n  <process id=\"p\">\n{body}  </process>\n</definitions>\n"
    )
}

/// `n` exclusive diamonds in sequence between two tasks. Diamond `i`
/// forks at `g{i}` to `a{i}` (taken when `x > 0`) or the default `b{i}`
/// and joins at `j{i}`; each branch task writes 64 bytes.
pub fn diamonds(n: usize) -> String {
    let mut body = String::new();
    body.push_str("    <startEvent id=\"start\" name=\"INIT\"/>\n");
    body.push_str(&task("t0", "open", "          <tabs:write key=\"open/{run}\" size=\"32\"/>\n"));
    for i in 1..=n {
        body.push_str(&format!("    <exclusiveGateway id=\"g{i}\" name=\"split {i}\" default=\"g{i}_b{i}\"/>\n"));
        body.push_str(&task(&format!("a{i}"), &format!("branch a{i}"), &format!("          <tabs:write key=\"a{i}/{{run}}\" size=\"64\"/>\n")));
        body.push_str(&task(&format!("b{i}"), &format!("branch b{i}"), &format!("          <tabs:write key=\"b{i}/{{run}}\" size=\"64\"/>\n")));
        body.push_str(&format!("    <exclusiveGateway id=\"j{i}\" name=\"merge {i}\"/>\n"));
    }
    body.push_str(&task("tn", "close", "          <tabs:write key=\"close/{run}\" size=\"32\"/>\n"));
    body.push_str("    <endEvent id=\"end\" name=\"SUCCESS\"/>\n");
    body.push_str(&flow("start_t0", "start", "t0"));
    body.push_str(&flow("t0_g1", "t0", "g1"));
    for i in 1..=n {
        body.push_str(&format!(
            "    <sequenceFlow id=\"g{i}_a{i}\" sourceRef=\"g{i}\" targetRef=\"a{i}\">\n      <conditionExpression>x &gt; 0</conditionExpression>\n    </sequenceFlow>\n"
        ));
        body.push_str(&flow(&format!("g{i}_b{i}"), &format!("g{i}"), &format!("b{i}")));
        body.push_str(&flow(&format!("a{i}_j{i}"), &format!("a{i}"), &format!("j{i}")));
        body.push_str(&flow(&format!("b{i}_j{i}"), &format!("b{i}"), &format!("j{i}")));
        let next = if i == n { "tn".to_string() } else { format!("g{}", i + 1) };
        body.push_str(&flow(&format!("j{i}_{next}"), &format!("j{i}"), &next));
    }
    body.push_str(&flow("tn_end", "tn", "end"));
    format!(
        "{HEADER}\n             id=\"diamonds{n}\" name=\"{n} diamonds\">\n  <collaboration id=\"c\">\n    <participant id=\"worker\" name=\"Worker\" processRef=\"p\"/>\n  </collaboration>\n  <process id=\"p\">\n{body}  </process>\n</definitions>\n"
    )
}

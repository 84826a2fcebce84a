use serde_json::{json, Value};

fn json_ok(description: &str) -> Value {
    json!({ "description": description, "content": { "application/json": {} } })
}

fn errors(codes: &[u16]) -> Value {
    let mut m = serde_json::Map::new();
    for c in codes {
        m.insert(c.to_string(), json!({ "$ref": "#/components/responses/Error" }));
    }
    Value::Object(m)
}

fn op(summary: &str, ok: (&str, &str), errs: &[u16]) -> Value {
    let mut responses = errors(errs);
    responses[ok.0] = json_ok(ok.1);
    json!({ "summary": summary, "parameters": [{ "$ref": "#/components/parameters/SessionId" }], "responses": responses })
}

pub fn document() -> Value {
    let mut create = op("Upload a BPMN model and start a session", ("201", "Session id and candidate count"), &[400]);
    create["parameters"] = json!([]);
    create["requestBody"] = json!({ "required": true, "content": { "application/xml": {} } });

    let mut put_plan = op("Validate and store a transaction plan", ("200", "Plan with derived nesting and methods"), &[400, 404]);
    put_plan["requestBody"] = json!({ "required": true, "content": { "application/json": {} } });

    let mut cost = op("Gas per variant and payload size for the current plan", ("200", "Cost table"), &[400, 404, 409]);
    cost["parameters"].as_array_mut().unwrap().push(json!({
        "name": "sizes", "in": "query", "required": false,
        "description": "Comma-separated sizes such as 512KB,1024KB",
        "schema": { "type": "string" }
    }));

    let mut generate = op("Compile the current plan into a contract package", ("200", "Contract package"), &[400, 404, 409]);
    generate["parameters"].as_array_mut().unwrap().push(json!({
        "name": "seed", "in": "query", "required": false, "schema": { "type": "integer", "minimum": 0 }
    }));

    let mut run = op("Run a JSON-lines trace against the package", ("200", "Trace outcome with the full step log"), &[400, 404, 409]);
    run["requestBody"] = json!({ "required": true, "content": { "application/x-ndjson": {} } });

    let mut check = op("Classify several named traces", ("200", "Per-trace verdicts"), &[400, 404, 409]);
    check["requestBody"] = json!({ "required": true, "content": { "application/json": {} } });

    let mut delete = op("Drop a session", ("204", "Deleted"), &[404]);
    delete["responses"]["204"] = json!({ "description": "Deleted" });

    json!({
        "openapi": "3.0.3",
        "info": { "title": "tabsplus", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/spec": { "get": { "summary": "This document", "responses": { "200": json_ok("OpenAPI document") } } },
            "/sessions": { "post": create },
            "/sessions/{id}": { "delete": delete },
            "/sessions/{id}/analysis": { "get": op("Full analysis report", ("200", "Analysis report"), &[404]) },
            "/sessions/{id}/graph": { "get": op("Flow graph with rank layout hints", ("200", "Graph"), &[404]) },
            "/sessions/{id}/candidates": { "get": op("SESE candidate regions", ("200", "Candidates"), &[404]) },
            "/sessions/{id}/plan": { "put": put_plan, "get": op("Current plan", ("200", "Plan report"), &[404, 409]) },
            "/sessions/{id}/cost": { "get": cost },
            "/sessions/{id}/generate": { "post": generate },
            "/sessions/{id}/package": { "get": op("Last generated package", ("200", "Contract package"), &[404, 409]) },
            "/sessions/{id}/run": { "post": run },
            "/sessions/{id}/trace-check": { "post": check },
            "/sessions/{id}/report": { "get": op("Outcome of the last run", ("200", "Trace outcome"), &[404, 409]) }
        },
        "components": {
            "parameters": {
                "SessionId": { "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }
            },
            "schemas": {
                "Error": {
                    "type": "object",
                    "required": ["code", "message", "detail"],
                    "properties": {
                        "code": { "type": "string" },
                        "message": { "type": "string" },
                        "detail": {}
                    }
                }
            },
            "responses": {
                "Error": {
                    "description": "Structured error",
                    "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } }
                }
            }
        }
    })
}

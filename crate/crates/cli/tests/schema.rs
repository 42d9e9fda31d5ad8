use latent_directions::edit::{EditSpec, TimeWindow};
use latent_directions_cli::wire::*;
use serde::Serialize;
use serde_json::Value;

fn schema() -> Value {
    let text = include_str!("../schema/wire.json");
    serde_json::from_str(text).unwrap()
}

fn resolve<'a>(schema: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.trim_start_matches("#/$defs/");
            &schema["$defs"][name]
        }
        None => node,
    }
}

/// Every field of `value` is declared, every required field is present, and
/// the same holds for nested objects described by the schema.
fn conforms(schema: &Value, node: &Value, value: &Value, at: &str) {
    let node = resolve(schema, node);
    if let Some(variants) = node.get("oneOf").and_then(Value::as_array) {
        if node.get("properties").is_none() {
            let ok = variants.iter().any(|v| match (v.get("enum"), value) {
                (Some(e), _) => e.as_array().unwrap().contains(value),
                (None, Value::Object(_)) => v.get("properties").is_some(),
                _ => false,
            });
            assert!(ok, "{at}: {value} matches no variant");
            if let (Value::Object(_), Some(obj)) = (value, variants.iter().find(|v| v.get("properties").is_some())) {
                conforms(schema, obj, value, at);
            }
            return;
        }
    }
    match value {
        Value::Object(map) => {
            let props = node["properties"].as_object().unwrap_or_else(|| panic!("{at}: no properties"));
            for (k, v) in map {
                let sub = props.get(k).unwrap_or_else(|| panic!("{at}: undeclared field `{k}`"));
                conforms(schema, sub, v, &format!("{at}.{k}"));
            }
            for r in node.get("required").and_then(Value::as_array).into_iter().flatten() {
                assert!(map.contains_key(r.as_str().unwrap()), "{at}: missing required `{r}`");
            }
        }
        Value::Array(items) => {
            if let Some(item) = node.get("items") {
                for (i, v) in items.iter().enumerate() {
                    conforms(schema, item, v, &format!("{at}[{i}]"));
                }
            }
        }
        _ => {}
    }
}

fn check<T: Serialize>(name: &str, value: &T) {
    let schema = schema();
    let def = &schema["$defs"][name];
    assert!(def.is_object(), "schema has no `{name}`");
    conforms(&schema, def, &serde_json::to_value(value).unwrap(), name);
}

fn sidecar(source: Source, refine: Option<usize>) -> Sidecar {
    Sidecar {
        format_version: SIDECAR_FORMAT_VERSION,
        source,
        edits: vec![EditSpec::new(1, -2.0, TimeWindow::COARSE)],
        schedule_id: "linear-1000".into(),
        guidance_scale: 1.0,
        refine_iters: refine,
        model_checksum: "m".into(),
        bank_sha256: "b".into(),
    }
}

#[test]
fn response_types_match_the_schema() {
    let seed = sidecar(Source::Seed { seed: 3 }, None);
    let image = sidecar(Source::Image { image_id: "f".repeat(64) }, Some(3));
    check("Sidecar", &seed);
    check("Sidecar", &image);
    check(
        "EditResponse",
        &EditResponse {
            image_png: "AAAA".into(),
            sidecar: image.clone(),
            metrics: Some(vec![StepMetric { t: 980, edit_norm: 0.5 }]),
        },
    );
    let summary = DirectionSummary {
        id: 0,
        label: Some("brightness".into()),
        self_consistency: 0.4,
        strip: vec![StripRef {
            scale: -2.0,
            url: "/directions/0/strip/0".into(),
        }],
    };
    check("DirectionSummary", &summary);
    let strip = StripImage {
        scale: 1.0,
        image_png: "AAAA".into(),
        sidecar: seed,
    };
    check("StripImage", &strip);
    check(
        "DirectionDetail",
        &DirectionDetail {
            summary,
            strip: vec![strip],
        },
    );
    check("UploadResponse", &UploadResponse { image_id: "e".repeat(64) });
    check(
        "Health",
        &Health {
            status: "ok".into(),
            directions: 8,
            schedule_id: "s".into(),
            model_checksum: "m".into(),
            bank_sha256: "b".into(),
        },
    );
    check(
        "ErrorBody",
        &ErrorBody {
            error: ErrorDetail {
                kind: "validation".into(),
                path: Some("edits[0].scale".into()),
                message: "bad".into(),
            },
        },
    );
}

#[test]
fn request_types_match_the_schema() {
    let req: EditRequest = serde_json::from_value(serde_json::json!({
        "source": {"seed": 1},
        "edits": [
            {"direction_id": 0, "scale": 1.0},
            {"direction_id": 1, "scale": 2.0, "window": "coarse"},
            {"direction_id": 2, "scale": 3.0, "window": {"start": 0.7, "end": 0.1}}
        ],
        "metrics": true
    }))
    .unwrap();
    check("EditRequest", &req);
    let back: EditRequest = serde_json::from_value(serde_json::to_value(&req).unwrap()).unwrap();
    assert_eq!(back, req);
}

#[test]
fn error_kinds_are_declared() {
    let schema = schema();
    let kinds = schema["$defs"]["ErrorBody"]["properties"]["error"]["properties"]["kind"]["enum"]
        .as_array()
        .unwrap()
        .clone();
    let declared: Vec<&Value> = schema["errors"].as_object().unwrap().values().collect();
    for k in &kinds {
        assert!(declared.contains(&k), "{k}");
    }
}

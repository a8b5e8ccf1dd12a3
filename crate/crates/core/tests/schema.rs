use std::collections::BTreeSet;

use serde_json::Value;

use pvtn::scenario::Scenario;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenario.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Tag values the schema allows for a tagged array item definition.
fn schema_tags(def: &str, tag: &str) -> BTreeSet<String> {
    schema()["$defs"][def]["oneOf"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["properties"][tag]["const"].as_str().unwrap().to_string())
        .collect()
}

/// Tag values the parser accepts, read from its unknown-variant error.
fn parser_tags(doc: &str) -> BTreeSet<String> {
    let err = Scenario::parse(doc).unwrap_err().to_string();
    let list = err.split("expected one of").nth(1).unwrap_or_else(|| panic!("{err}"));
    list.split(',').map(|s| s.trim().trim_matches(|c: char| c == '`' || c.is_whitespace()).to_string()).filter(|s| !s.is_empty()).collect()
}

#[test]
fn step_ops_match_the_parser() {
    let parser = parser_tags("name = \"x\"\n[[step]]\nat = 0\nop = \"no-such-op\"\n");
    assert_eq!(schema_tags("step", "op"), parser);
}

#[test]
fn expect_kinds_match_the_parser() {
    let parser = parser_tags("name = \"x\"\n[[expect]]\nkind = \"no-such-kind\"\n");
    assert_eq!(schema_tags("expect", "kind"), parser);
}

#[test]
fn top_level_keys_match_the_parser() {
    let keys: BTreeSet<String> = schema()["properties"].as_object().unwrap().keys().cloned().collect();
    let err = Scenario::parse("name = \"x\"\nbogus = 1\n").unwrap_err().to_string();
    for k in &keys {
        assert!(err.contains(&format!("`{k}`")), "{k} missing from {err}");
    }
}

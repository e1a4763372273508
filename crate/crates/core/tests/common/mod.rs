#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mfsurvey::client::StubScript;
use mfsurvey::persona::Persona;
use mfsurvey::runner::{EndpointSpec, ExperimentConfig};
use serde_json::Value;

pub fn stub_spec(name: &str, script: StubScript) -> EndpointSpec {
    let mut endpoint = mfsurvey::client::ModelEndpoint::new(name, "", name);
    endpoint.limits.backoff = Vec::new();
    EndpointSpec {
        endpoint,
        stub: Some(script),
    }
}

pub fn config(endpoints: Vec<EndpointSpec>, personas: Vec<Persona>, samples: u32, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(endpoints, personas, out);
    c.samples_per_cell = samples;
    c.seed = Some(42);
    c
}

fn strip(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for k in ["timestamp", "latency_ms", "created_at"] {
                map.remove(k);
            }
            map.values_mut().for_each(strip);
        }
        Value::Array(items) => items.iter_mut().for_each(strip),
        _ => {}
    }
}

/// Store lines with wall-clock fields removed.
pub fn normalized_store(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            strip(&mut v);
            v
        })
        .collect()
}

pub fn tmp_store(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

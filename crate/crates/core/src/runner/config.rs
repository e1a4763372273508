//! Experiment configuration file.
//!
//! ```toml
//! samples_per_cell = 50
//! reask_limit = 1
//! output = "runs/store.jsonl"
//! seed = 7
//! # questionnaire = "my_mfq.toml"      # bundled instrument when omitted
//! # persona_template = "... {ideology} ..."
//!
//! [[endpoint]]
//! name = "mixtral:8x22b"
//! base_url = "http://localhost:11434"
//! max_concurrent = 4
//!
//! [[endpoint]]
//! name = "stub-a"
//! stub = { policy = "random_likert" }
//!
//! [[persona]]
//! id = "none"
//! [[persona]]
//! id = "liberal"
//! ideology = "liberal"
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunError;
use crate::client::{Decoding, Limits, ModelEndpoint, StubScript};
use crate::persona::{Ideology, Persona, PersonaKind, PromptRenderer, DEFAULT_PERSONA_TEMPLATE};
use crate::questionnaire::{load_questionnaire, Questionnaire, BUNDLED_MFQ};
use crate::statements::{build_statement_persona, lint_catalog, Profile};

pub const DEFAULT_SAMPLES_PER_CELL: u32 = 50;
pub const DEFAULT_REASK_LIMIT: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointFile {
    name: String,
    base_url: Option<String>,
    model_id: Option<String>,
    temperature: Option<f64>,
    max_tokens: Option<u32>,
    max_concurrent: Option<usize>,
    timeout_ms: Option<u64>,
    max_retries: Option<u32>,
    backoff_ms: Option<Vec<u64>>,
    api_key_env: Option<String>,
    stub: Option<StubScript>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonaFile {
    id: String,
    ideology: Option<String>,
    system_text: Option<String>,
    catalog: Option<PathBuf>,
    profile: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    samples_per_cell: Option<u32>,
    reask_limit: Option<u32>,
    output: PathBuf,
    questionnaire: Option<PathBuf>,
    seed: Option<u64>,
    persona_template: Option<String>,
    #[serde(rename = "endpoint", default)]
    endpoints: Vec<EndpointFile>,
    #[serde(rename = "persona", default)]
    personas: Vec<PersonaFile>,
}

/// An endpoint plus, for scripted endpoints, the stub to serve it from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub endpoint: ModelEndpoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub: Option<StubScript>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub endpoints: Vec<EndpointSpec>,
    pub personas: Vec<Persona>,
    pub samples_per_cell: u32,
    pub reask_limit: u32,
    pub questionnaire_path: Option<PathBuf>,
    pub output_path: PathBuf,
    pub seed: Option<u64>,
    pub persona_template: String,
}

impl ExperimentConfig {
    pub fn new(endpoints: Vec<EndpointSpec>, personas: Vec<Persona>, output_path: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            endpoints,
            personas,
            samples_per_cell: DEFAULT_SAMPLES_PER_CELL,
            reask_limit: DEFAULT_REASK_LIMIT,
            questionnaire_path: None,
            output_path: output_path.into(),
            seed: None,
            persona_template: DEFAULT_PERSONA_TEMPLATE.to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Parses a config; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| RunError::Config(vec![e.to_string()]))?;
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut problems = Vec::new();

        let mut endpoints = Vec::new();
        for e in file.endpoints {
            let defaults = Limits::default();
            let decoding = Decoding {
                temperature: e.temperature.unwrap_or(Decoding::default().temperature),
                max_tokens: e.max_tokens.unwrap_or(Decoding::default().max_tokens),
            };
            let limits = Limits {
                max_concurrent: e.max_concurrent.unwrap_or(defaults.max_concurrent),
                timeout: e.timeout_ms.map_or(defaults.timeout, Duration::from_millis),
                max_retries: e.max_retries.unwrap_or(defaults.max_retries),
                backoff: match e.backoff_ms {
                    Some(v) => v.into_iter().map(Duration::from_millis).collect(),
                    None if e.stub.is_some() => Vec::new(),
                    None => defaults.backoff,
                },
            };
            match (&e.base_url, &e.stub) {
                (None, None) => problems.push(format!("endpoint `{}` needs `base_url` or `stub`", e.name)),
                (Some(_), Some(_)) => {
                    problems.push(format!("endpoint `{}` has both `base_url` and `stub`", e.name))
                }
                _ => {}
            }
            endpoints.push(EndpointSpec {
                endpoint: ModelEndpoint {
                    model_id: e.model_id.unwrap_or_else(|| e.name.clone()),
                    name: e.name,
                    base_url: e.base_url.unwrap_or_default(),
                    decoding,
                    limits,
                    api_key_env: e.api_key_env,
                },
                stub: e.stub,
            });
        }

        let mut personas = Vec::new();
        for p in file.personas {
            let kind = match (&p.ideology, &p.system_text, &p.catalog, &p.profile) {
                (None, None, None, None) => Some(PersonaKind::Unmodified),
                (Some(i), None, None, None) => match i.parse::<Ideology>() {
                    Ok(ideology) => Some(PersonaKind::Ideology { ideology }),
                    Err(e) => {
                        problems.push(format!("persona `{}`: {e}", p.id));
                        None
                    }
                },
                (None, Some(t), None, None) => Some(PersonaKind::Custom {
                    system_text: t.clone(),
                }),
                (None, None, Some(c), Some(pr)) => {
                    match statement_system_text(&resolve(c), &resolve(pr), file.questionnaire.as_deref().map(resolve)) {
                        Ok(system_text) => Some(PersonaKind::Custom { system_text }),
                        Err(e) => {
                            problems.push(format!("persona `{}`: {e}", p.id));
                            None
                        }
                    }
                }
                _ => {
                    problems.push(format!(
                        "persona `{}` must set exactly one of `ideology`, `system_text`, or `catalog`+`profile`",
                        p.id
                    ));
                    None
                }
            };
            if let Some(kind) = kind {
                personas.push(Persona { id: p.id, kind });
            }
        }

        let config = ExperimentConfig {
            endpoints,
            personas,
            samples_per_cell: file.samples_per_cell.unwrap_or(DEFAULT_SAMPLES_PER_CELL),
            reask_limit: file.reask_limit.unwrap_or(DEFAULT_REASK_LIMIT),
            questionnaire_path: file.questionnaire.as_deref().map(resolve),
            output_path: resolve(&file.output),
            seed: file.seed,
            persona_template: file
                .persona_template
                .unwrap_or_else(|| DEFAULT_PERSONA_TEMPLATE.to_string()),
        };
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(RunError::Config(problems))
        }
    }

    /// Every invariant violation, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.endpoints.is_empty() {
            problems.push("no endpoints configured".to_string());
        }
        if self.personas.is_empty() {
            problems.push("no personas configured".to_string());
        }
        if self.samples_per_cell == 0 {
            problems.push("samples_per_cell must be at least 1".to_string());
        }
        let mut names = BTreeSet::new();
        for spec in &self.endpoints {
            let e = &spec.endpoint;
            if !names.insert(e.name.as_str()) {
                problems.push(format!("duplicate endpoint name `{}`", e.name));
            }
            if e.limits.max_concurrent == 0 {
                problems.push(format!("endpoint `{}`: max_concurrent must be at least 1", e.name));
            }
            if !(e.decoding.temperature >= 0.0) {
                problems.push(format!("endpoint `{}`: temperature must be >= 0", e.name));
            }
            if e.decoding.max_tokens == 0 {
                problems.push(format!("endpoint `{}`: max_tokens must be positive", e.name));
            }
            if spec.stub.is_none() && reqwest::Url::parse(&e.base_url).is_err() {
                problems.push(format!("endpoint `{}`: invalid base_url `{}`", e.name, e.base_url));
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.personas {
            if !ids.insert(p.id.as_str()) {
                problems.push(format!("duplicate persona id `{}`", p.id));
            }
        }
        if !self.persona_template.contains("{ideology}") {
            problems.push("persona_template must contain `{ideology}`".to_string());
        }
        problems
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunError::Config(problems))
        }
    }

    pub fn renderer(&self) -> PromptRenderer {
        PromptRenderer::with_template(self.persona_template.clone()).unwrap_or_default()
    }

    /// Questionnaire source text: the configured file or the bundled one.
    pub fn questionnaire_source(&self) -> Result<String, RunError> {
        match &self.questionnaire_path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| RunError::io(p, e)),
            None => Ok(BUNDLED_MFQ.to_string()),
        }
    }

    pub fn questionnaire(&self) -> Result<Questionnaire, RunError> {
        load_questionnaire(&self.questionnaire_source()?).map_err(RunError::Questionnaire)
    }

    /// Hash of everything that determines what gets asked and how replies
    /// are produced. Operational knobs (concurrency, timeouts, sample
    /// count, output path) are excluded so a store can be extended.
    pub fn config_hash(&self, questionnaire_source: &str) -> String {
        let renderer = self.renderer();
        let canonical = serde_json::json!({
            "endpoints": self.endpoints.iter().map(|s| serde_json::json!({
                "name": s.endpoint.name,
                "model_id": s.endpoint.model_id,
                "base_url": if s.stub.is_some() { "" } else { s.endpoint.base_url.as_str() },
                "decoding": s.endpoint.decoding,
                "stub": s.stub,
            })).collect::<Vec<_>>(),
            "personas": self.personas.iter().map(|p| serde_json::json!({
                "id": p.id,
                "system_text": renderer.render_system_prompt(p),
            })).collect::<Vec<_>>(),
            "reask_limit": self.reask_limit,
            "seed": self.seed,
            "questionnaire": questionnaire_source,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        hex::encode(digest)
    }
}

fn statement_system_text(
    catalog: &Path,
    profile: &Path,
    questionnaire: Option<PathBuf>,
) -> Result<String, String> {
    let q_src = match questionnaire {
        Some(p) => std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => BUNDLED_MFQ.to_string(),
    };
    let q = load_questionnaire(&q_src).map_err(|e| e.to_string())?;
    let cat_src = std::fs::read_to_string(catalog).map_err(|e| format!("{}: {e}", catalog.display()))?;
    let cat = lint_catalog(&cat_src, &q).map_err(|e| e.to_string())?;
    let prof_src = std::fs::read_to_string(profile).map_err(|e| format!("{}: {e}", profile.display()))?;
    let prof = Profile::from_toml(&prof_src).map_err(|e| e.to_string())?;
    let persona = build_statement_persona(&cat, &prof).map_err(|e| e.to_string())?;
    Ok(persona.system_text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
        samples_per_cell = 3
        output = "out/store.jsonl"
        seed = 11

        [[endpoint]]
        name = "stub-a"
        stub = { policy = "constant", reply = { text = "[2]" } }

        [[endpoint]]
        name = "real"
        base_url = "http://localhost:8000"
        temperature = 0.7
        backoff_ms = [10, 20]

        [[persona]]
        id = "none"
        [[persona]]
        id = "liberal"
        ideology = "Liberal"
        [[persona]]
        id = "custom"
        system_text = "Be brief."
    "#;

    #[test]
    fn parses_and_resolves() {
        let c = ExperimentConfig::from_toml(BASIC, Path::new("/tmp/exp")).unwrap();
        assert_eq!(c.samples_per_cell, 3);
        assert_eq!(c.reask_limit, DEFAULT_REASK_LIMIT);
        assert_eq!(c.output_path, Path::new("/tmp/exp/out/store.jsonl"));
        assert_eq!(c.endpoints.len(), 2);
        assert!(c.endpoints[0].stub.is_some());
        assert_eq!(c.endpoints[1].endpoint.decoding.temperature, 0.7);
        assert_eq!(c.endpoints[1].endpoint.decoding.max_tokens, 64);
        assert_eq!(c.endpoints[1].endpoint.limits.backoff, vec![Duration::from_millis(10), Duration::from_millis(20)]);
        assert_eq!(c.endpoints[1].endpoint.model_id, "real");
        assert_eq!(c.personas[1].ideology_of(), Some(Ideology::Liberal));
        assert_eq!(c.personas[0].kind, PersonaKind::Unmodified);
    }

    #[test]
    fn collects_every_problem() {
        let text = r#"
            samples_per_cell = 0
            output = "x.jsonl"
            [[endpoint]]
            name = "a"
            [[endpoint]]
            name = "a"
            base_url = "http://h"
            max_concurrent = 0
            [[persona]]
            id = "p"
            ideology = "anarchist"
        "#;
        match ExperimentConfig::from_toml(text, Path::new(".")) {
            Err(RunError::Config(p)) => {
                let all = p.join("\n");
                assert!(all.contains("needs `base_url` or `stub`"), "{all}");
                assert!(all.contains("unknown ideology"), "{all}");
                assert!(all.contains("samples_per_cell"), "{all}");
                assert!(all.contains("duplicate endpoint name `a`"), "{all}");
                assert!(all.contains("max_concurrent"), "{all}");
                assert!(all.contains("no personas configured"), "{all}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn hash_ignores_operational_knobs() {
        let a = ExperimentConfig::from_toml(BASIC, Path::new("/a")).unwrap();
        let mut b = ExperimentConfig::from_toml(BASIC, Path::new("/b")).unwrap();
        b.samples_per_cell = 50;
        b.endpoints[1].endpoint.limits.max_concurrent = 1;
        assert_eq!(a.config_hash(BUNDLED_MFQ), b.config_hash(BUNDLED_MFQ));
        b.seed = Some(12);
        assert_ne!(a.config_hash(BUNDLED_MFQ), b.config_hash(BUNDLED_MFQ));
    }
}

//! Survey execution: every (endpoint, persona) cell, `samples_per_cell`
//! samples each, one fresh request per questionnaire item.

pub mod config;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::Utc;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{EndpointSpec, ExperimentConfig};
pub use store::{read_store, SampleMarker, StoreContents, StoreHeader, StoreLine, StoreWriter};

use crate::client::{ChatClient, ClientError, CompletionExchange, StubServer};
use crate::parse::{parse_likert, ParseFailure, ParsedAnswer};
use crate::persona::{persona_rank, render_question_prompt, Persona, PromptRenderer};
use crate::questionnaire::{load_questionnaire, Questionnaire, QuestionnaireError, QuestionnaireItem};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error(transparent)]
    Questionnaire(#[from] QuestionnaireError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record store: {0}")]
    Store(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

impl RunError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// One (endpoint, persona) combination.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub endpoint: String,
    pub persona: String,
}

impl Cell {
    pub fn new(endpoint: impl Into<String>, persona: impl Into<String>) -> Self {
        Cell {
            endpoint: endpoint.into(),
            persona: persona.into(),
        }
    }

    fn sort_key(&self) -> (&str, u8, &str) {
        (&self.endpoint, persona_rank(&self.persona), &self.persona)
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Endpoints alphabetically, then personas none/liberal/moderate/conservative.
impl Ord for Cell {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.endpoint, self.persona)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AnswerOutcome {
    Scored(ParsedAnswer),
    /// Still unparseable after all re-asks.
    Invalid(ParseFailure),
    /// The endpoint never produced a reply.
    Failed(ClientError),
}

impl AnswerOutcome {
    pub fn score(&self) -> Option<u8> {
        match self {
            AnswerOutcome::Scored(p) => Some(p.score),
            _ => None,
        }
    }
}

/// Final answer for one item of one sample, with every exchange that led
/// to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub cell: Cell,
    pub sample_index: u32,
    pub item_id: String,
    /// The exchange the outcome was parsed from; absent on request failure.
    pub exchange: Option<CompletionExchange>,
    /// Earlier unparseable exchanges that triggered re-asks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_exchanges: Vec<CompletionExchange>,
    pub outcome: AnswerOutcome,
    pub reasks_used: u32,
}

impl AnswerRecord {
    /// Every completed exchange in this record, in order.
    pub fn exchanges(&self) -> impl Iterator<Item = &CompletionExchange> {
        self.prior_exchanges.iter().chain(self.exchange.iter())
    }

    /// Number of HTTP attempts behind this record, failed ones included.
    pub fn attempt_count(&self) -> usize {
        let from_exchanges: usize = self.exchanges().map(|e| e.attempt as usize).sum();
        let failed_tail = match &self.outcome {
            AnswerOutcome::Failed(e) => e.failed_attempts.len(),
            _ => 0,
        };
        from_exchanges + failed_tail
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "missing", rename_all = "snake_case")]
pub enum Completeness {
    Complete,
    Partial(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveySample {
    pub cell: Cell,
    pub sample_index: u32,
    pub answers: BTreeMap<String, u8>,
    pub completeness: Completeness,
}

impl SurveySample {
    pub fn from_records(
        cell: Cell,
        sample_index: u32,
        records: &[AnswerRecord],
        questionnaire: &Questionnaire,
    ) -> Self {
        let answers: BTreeMap<String, u8> = records
            .iter()
            .filter_map(|r| r.outcome.score().map(|s| (r.item_id.clone(), s)))
            .collect();
        let missing: Vec<String> = questionnaire
            .items()
            .iter()
            .filter(|i| !answers.contains_key(&i.id))
            .map(|i| i.id.clone())
            .collect();
        SurveySample {
            cell,
            sample_index,
            answers,
            completeness: if missing.is_empty() {
                Completeness::Complete
            } else {
                Completeness::Partial(missing)
            },
        }
    }

    pub fn is_complete(&self) -> bool {
        self.completeness == Completeness::Complete
    }

    pub fn score(&self, item_id: &str) -> Option<u8> {
        self.answers.get(item_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub cell: Cell,
    pub samples: Vec<SurveySample>,
}

impl Population {
    pub fn complete_samples(&self) -> impl Iterator<Item = &SurveySample> {
        self.samples.iter().filter(|s| s.is_complete())
    }

    pub fn partial_count(&self) -> usize {
        self.samples.iter().filter(|s| !s.is_complete()).count()
    }
}

/// Request `seed` for one logical ask, derived from the run seed.
pub fn request_seed(run_seed: u64, cell: &Cell, sample_index: u32, item_id: &str, ask: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    for part in [cell.endpoint.as_str(), cell.persona.as_str(), item_id] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update(sample_index.to_le_bytes());
    h.update(ask.to_le_bytes());
    let d = h.finalize();
    // keep within 2^53 so every JSON consumer reads it exactly
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) & ((1u64 << 53) - 1)
}

async fn ask_item(
    client: &ChatClient,
    cell: &Cell,
    sample_index: u32,
    system_text: &str,
    item: &QuestionnaireItem,
    questionnaire: &Questionnaire,
    reask_limit: u32,
    seed: Option<u64>,
) -> AnswerRecord {
    let scale = questionnaire.scale(item.part);
    let user_text = render_question_prompt(item, scale).expect("item and scale share a part");
    let mut prior = Vec::new();
    let mut reasks = 0;
    let (exchange, outcome) = loop {
        let req_seed = seed.map(|s| request_seed(s, cell, sample_index, &item.id, reasks));
        match client.complete(system_text, &user_text, req_seed).await {
            Err(e) => break (None, AnswerOutcome::Failed(e)),
            Ok(ex) => match parse_likert(&ex.raw_response, scale) {
                Ok(parsed) => break (Some(ex), AnswerOutcome::Scored(parsed)),
                Err(failure) if reasks < reask_limit => {
                    tracing::debug!(%cell, sample_index, item = %item.id, ?failure, "re-asking");
                    prior.push(ex);
                    reasks += 1;
                }
                Err(failure) => break (Some(ex), AnswerOutcome::Invalid(failure)),
            },
        }
    };
    AnswerRecord {
        cell: cell.clone(),
        sample_index,
        item_id: item.id.clone(),
        exchange,
        prior_exchanges: prior,
        outcome,
        reasks_used: reasks,
    }
}

/// Runs one complete questionnaire for a persona. Items are requested
/// concurrently (bounded by the client's cap); records come back in
/// canonical item order.
pub async fn run_survey_sample(
    client: &ChatClient,
    renderer: &PromptRenderer,
    persona: &Persona,
    questionnaire: &Questionnaire,
    sample_index: u32,
    reask_limit: u32,
    seed: Option<u64>,
) -> (SurveySample, Vec<AnswerRecord>) {
    let cell = Cell::new(client.endpoint().name.clone(), persona.id.clone());
    let system_text = renderer.render_system_prompt(persona);
    let records = join_all(questionnaire.items().iter().map(|item| {
        ask_item(
            client,
            &cell,
            sample_index,
            &system_text,
            item,
            questionnaire,
            reask_limit,
            seed,
        )
    }))
    .await;
    let sample = SurveySample::from_records(cell, sample_index, &records, questionnaire);
    (sample, records)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub complete: u32,
    pub partial: u32,
    /// Samples found already recorded and skipped.
    pub resumed: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cells: BTreeMap<Cell, CellSummary>,
    pub new_samples: u32,
    pub new_answer_records: u64,
    /// New records whose endpoint never produced a reply.
    pub failed_answer_records: u64,
    /// Samples present in the store for configured cells after the run.
    pub total_surveys: u32,
    /// Set when the run stopped early because of `RunOptions::max_new_samples`.
    pub interrupted: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many new samples (simulates an interrupted run).
    pub max_new_samples: Option<u32>,
}

pub async fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, RunError> {
    run_experiment_with(config, RunOptions::default()).await
}

pub async fn run_experiment_with(config: &ExperimentConfig, options: RunOptions) -> Result<RunSummary, RunError> {
    config.validate()?;
    let q_source = config.questionnaire_source()?;
    let questionnaire = load_questionnaire(&q_source)?;
    let header = StoreHeader {
        schema_version: store::SCHEMA_VERSION,
        config_hash: config.config_hash(&q_source),
        created_at: Utc::now(),
        seed: config.seed,
        reask_limit: config.reask_limit,
        questionnaire: q_source.clone(),
    };
    let mut writer = StoreWriter::open(&config.output_path, header)?;

    // Stubs must outlive every client that points at them.
    let mut stubs: Vec<StubServer> = Vec::new();
    let mut clients = Vec::new();
    for spec in &config.endpoints {
        let mut endpoint = spec.endpoint.clone();
        if let Some(script) = &spec.stub {
            let server = StubServer::start(script.clone(), config.seed.unwrap_or(0))
                .await
                .map_err(|e| RunError::io("stub listener", e))?;
            endpoint.base_url = server.base_url();
            stubs.push(server);
        }
        clients.push(ChatClient::new(endpoint)?);
    }

    let renderer = config.renderer();
    let mut summary = RunSummary::default();
    'cells: for client in &clients {
        for persona in &config.personas {
            let cell = Cell::new(client.endpoint().name.clone(), persona.id.clone());
            let entry = summary.cells.entry(cell.clone()).or_default();
            for sample_index in 0..config.samples_per_cell {
                if writer.is_done(&cell, sample_index) {
                    entry.resumed += 1;
                    continue;
                }
                if options.max_new_samples.is_some_and(|m| summary.new_samples >= m) {
                    summary.interrupted = true;
                    break 'cells;
                }
                let (sample, records) = run_survey_sample(
                    client,
                    &renderer,
                    persona,
                    &questionnaire,
                    sample_index,
                    config.reask_limit,
                    config.seed,
                )
                .await;
                if !sample.is_complete() {
                    tracing::warn!(%cell, sample_index, "sample is partial");
                }
                writer.append_sample(
                    &records,
                    SampleMarker {
                        cell: cell.clone(),
                        sample_index,
                        completeness: sample.completeness.clone(),
                    },
                )?;
                match sample.completeness {
                    Completeness::Complete => entry.complete += 1,
                    Completeness::Partial(_) => entry.partial += 1,
                }
                summary.new_samples += 1;
                summary.new_answer_records += records.len() as u64;
                summary.failed_answer_records += records
                    .iter()
                    .filter(|r| matches!(r.outcome, AnswerOutcome::Failed(_)))
                    .count() as u64;
            }
        }
    }
    drop(clients);
    drop(stubs);

    summary.total_surveys = summary
        .cells
        .values()
        .map(|c| c.complete + c.partial + c.resumed)
        .sum();
    Ok(summary)
}

/// A loaded store: its header, questionnaire and per-cell populations.
#[derive(Debug, Clone)]
pub struct LoadedStore {
    pub header: Option<StoreHeader>,
    pub questionnaire: Questionnaire,
    pub populations: Vec<Population>,
    pub records: Vec<AnswerRecord>,
    pub skipped_lines: Vec<usize>,
}

/// Rebuilds populations from answer records. Samples missing answers are
/// kept and marked partial.
pub fn populations_from_records(records: &[AnswerRecord], questionnaire: &Questionnaire) -> Vec<Population> {
    let mut grouped: BTreeMap<Cell, BTreeMap<u32, Vec<AnswerRecord>>> = BTreeMap::new();
    let mut seen: BTreeSet<(Cell, u32, String)> = BTreeSet::new();
    for r in records {
        if !seen.insert((r.cell.clone(), r.sample_index, r.item_id.clone())) {
            tracing::warn!(cell = %r.cell, sample = r.sample_index, item = %r.item_id, "duplicate answer record ignored");
            continue;
        }
        grouped
            .entry(r.cell.clone())
            .or_default()
            .entry(r.sample_index)
            .or_default()
            .push(r.clone());
    }
    grouped
        .into_iter()
        .map(|(cell, samples)| Population {
            samples: samples
                .into_iter()
                .map(|(idx, recs)| SurveySample::from_records(cell.clone(), idx, &recs, questionnaire))
                .collect(),
            cell,
        })
        .collect()
}

pub fn load_populations(store_path: &Path) -> Result<LoadedStore, RunError> {
    let contents = read_store(store_path)?;
    let questionnaire = match &contents.header {
        Some(h) => load_questionnaire(&h.questionnaire)?,
        None => Questionnaire::bundled(),
    };
    let populations = populations_from_records(&contents.records, &questionnaire);
    Ok(LoadedStore {
        header: contents.header,
        questionnaire,
        populations,
        records: contents.records,
        skipped_lines: contents.skipped_lines,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub complete: u32,
    pub partial: u32,
    pub answer_records: u64,
}

/// Per-cell progress read from a store's markers.
pub fn store_status(store_path: &Path) -> Result<BTreeMap<Cell, CellStatus>, RunError> {
    let contents = read_store(store_path)?;
    let mut status: BTreeMap<Cell, CellStatus> = BTreeMap::new();
    for m in &contents.markers {
        let s = status.entry(m.cell.clone()).or_default();
        match m.completeness {
            Completeness::Complete => s.complete += 1,
            Completeness::Partial(_) => s.partial += 1,
        }
    }
    for r in &contents.records {
        status.entry(r.cell.clone()).or_default().answer_records += 1;
    }
    Ok(status)
}

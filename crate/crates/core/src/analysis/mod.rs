//! Catch validity, per-question and grouped response variance.

pub mod scores;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scores::{
    argmin, cross_distance, cross_matrix, load_references, population_foundation_scores,
    sample_foundation_scores, Aggregation, CrossAlignmentMatrix, FoundationScores,
    HumanReferenceGroup,
};

use crate::questionnaire::{Part, Questionnaire};
use crate::runner::{Cell, Population, SurveySample};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("population {0} has no included samples")]
    EmptyPopulation(Cell),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("sample variance needs at least 2 samples for {0}")]
    TooFewSamples(String),
    #[error("human reference file: {0}")]
    References(String),
    #[error("invalid catch policy `{0}`")]
    Policy(String),
}

/// Thresholds on the two attention-check items. A sample is flagged when
/// the Relevance catch scores above `relevance_max` or the Agreement catch
/// scores below `agreement_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatchPolicy {
    pub relevance_max: u8,
    pub agreement_min: u8,
}

impl Default for CatchPolicy {
    fn default() -> Self {
        CatchPolicy {
            relevance_max: 3,
            agreement_min: 3,
        }
    }
}

impl FromStr for CatchPolicy {
    type Err = AnalysisError;

    /// `default`, or `relevance_max=N,agreement_min=M` (either key optional).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut policy = CatchPolicy::default();
        let s = s.trim();
        if s.is_empty() || s == "default" {
            return Ok(policy);
        }
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| AnalysisError::Policy(s.to_string()))?;
            let v: u8 = v
                .trim()
                .parse()
                .map_err(|_| AnalysisError::Policy(s.to_string()))?;
            match k.trim() {
                "relevance_max" => policy.relevance_max = v,
                "agreement_min" => policy.agreement_min = v,
                _ => return Err(AnalysisError::Policy(s.to_string())),
            }
        }
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CatchVerdict {
    Valid,
    Flagged(Vec<String>),
}

impl CatchVerdict {
    pub fn is_valid(&self) -> bool {
        *self == CatchVerdict::Valid
    }
}

fn catch_reasons(sample: &SurveySample, q: &Questionnaire, policy: &CatchPolicy) -> Vec<String> {
    let mut reasons = Vec::new();
    let rel = q.catch_item(Part::Relevance);
    if let Some(v) = sample.score(&rel.id) {
        if v > policy.relevance_max {
            reasons.push(format!("relevance catch exceeds {}", policy.relevance_max));
        }
    }
    let agr = q.catch_item(Part::Agreement);
    if let Some(v) = sample.score(&agr.id) {
        if v < policy.agreement_min {
            reasons.push(format!("agreement catch below {}", policy.agreement_min));
        }
    }
    reasons
}

pub fn catch_validity(
    sample: &SurveySample,
    questionnaire: &Questionnaire,
    policy: &CatchPolicy,
) -> Result<CatchVerdict, AnalysisError> {
    if !sample.is_complete() {
        return Err(AnalysisError::Contract(format!(
            "catch check on partial sample {} of {}",
            sample.sample_index, sample.cell
        )));
    }
    let reasons = catch_reasons(sample, questionnaire, policy);
    Ok(if reasons.is_empty() {
        CatchVerdict::Valid
    } else {
        CatchVerdict::Flagged(reasons)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

impl FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "population" => Ok(Estimator::Population),
            "sample" => Ok(Estimator::Sample),
            _ => Err(format!("unknown estimator `{s}` (population|sample)")),
        }
    }
}

/// Which samples an analysis looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inclusion {
    pub include_partial: bool,
    /// `None` disables catch filtering.
    pub catch_policy: Option<CatchPolicy>,
}

impl Default for Inclusion {
    fn default() -> Self {
        Inclusion {
            include_partial: false,
            catch_policy: Some(CatchPolicy::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub inclusion: Inclusion,
    pub estimator: Estimator,
    pub aggregation: Aggregation,
}

impl AnalysisOptions {
    pub fn unfiltered() -> Self {
        AnalysisOptions {
            inclusion: Inclusion {
                include_partial: false,
                catch_policy: None,
            },
            ..Default::default()
        }
    }
}

pub fn included_samples<'a>(
    population: &'a Population,
    questionnaire: &Questionnaire,
    inclusion: &Inclusion,
) -> Vec<&'a SurveySample> {
    population
        .samples
        .iter()
        .filter(|s| inclusion.include_partial || s.is_complete())
        .filter(|s| match &inclusion.catch_policy {
            None => true,
            Some(p) => catch_reasons(s, questionnaire, p).is_empty(),
        })
        .collect()
}

pub fn variance(values: &[f64], estimator: Estimator) -> Option<f64> {
    let n = values.len();
    let denom = match estimator {
        Estimator::Population if n >= 1 => n as f64,
        Estimator::Sample if n >= 2 => (n - 1) as f64,
        _ => return None,
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    Some(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / denom)
}

/// Variance of one item's scores over the included samples.
pub fn question_variance(
    population: &Population,
    item_id: &str,
    questionnaire: &Questionnaire,
    options: &AnalysisOptions,
) -> Result<f64, AnalysisError> {
    if questionnaire.item(item_id).is_none() {
        return Err(AnalysisError::UnknownItem(item_id.to_string()));
    }
    let scores: Vec<f64> = included_samples(population, questionnaire, &options.inclusion)
        .into_iter()
        .filter_map(|s| s.score(item_id))
        .map(f64::from)
        .collect();
    if scores.is_empty() {
        return Err(AnalysisError::EmptyPopulation(population.cell.clone()));
    }
    variance(&scores, options.estimator)
        .ok_or_else(|| AnalysisError::TooFewSamples(format!("{} {item_id}", population.cell)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Model,
    Persona,
    ModelPersona,
    FoundationPersona,
    QuestionModel,
    QuestionPersona,
}

impl Grouping {
    pub const ALL: [Grouping; 6] = [
        Grouping::Model,
        Grouping::Persona,
        Grouping::ModelPersona,
        Grouping::FoundationPersona,
        Grouping::QuestionModel,
        Grouping::QuestionPersona,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::Model => "model",
            Grouping::Persona => "persona",
            Grouping::ModelPersona => "model-persona",
            Grouping::FoundationPersona => "foundation-persona",
            Grouping::QuestionModel => "question-model",
            Grouping::QuestionPersona => "question-persona",
        }
    }

    /// Group key of one (population, item) pair.
    pub fn key(self, cell: &Cell, item_id: &str, foundation: &str) -> GroupKey {
        let parts: Vec<&str> = match self {
            Grouping::Model => vec![&cell.endpoint],
            Grouping::Persona => vec![&cell.persona],
            Grouping::ModelPersona => vec![&cell.endpoint, &cell.persona],
            Grouping::FoundationPersona => vec![foundation, &cell.persona],
            Grouping::QuestionModel => vec![item_id, &cell.endpoint],
            Grouping::QuestionPersona => vec![item_id, &cell.persona],
        };
        GroupKey(parts.into_iter().map(str::to_string).collect())
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grouping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace(['_', '×'], "-");
        Grouping::ALL
            .into_iter()
            .find(|g| g.as_str() == norm || g.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown grouping `{s}` (one of {})",
                    Grouping::ALL.map(|g| g.as_str()).join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey(pub Vec<String>);

impl GroupKey {
    pub fn of(parts: &[&str]) -> Self {
        GroupKey(parts.iter().map(|s| s.to_string()).collect())
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" × "))
    }
}

/// Mean question variance per group, scored and catch items kept apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTable {
    pub grouping: Grouping,
    pub scored: BTreeMap<GroupKey, f64>,
    pub catch: BTreeMap<GroupKey, f64>,
    /// Populations left out because nothing in them was included.
    pub warnings: Vec<String>,
}

impl VarianceTable {
    pub fn get(&self, parts: &[&str]) -> Option<f64> {
        self.scored.get(&GroupKey::of(parts)).copied()
    }

    pub fn get_catch(&self, parts: &[&str]) -> Option<f64> {
        self.catch.get(&GroupKey::of(parts)).copied()
    }
}

/// Unweighted mean of `question_variance` over every (population, item)
/// pair in each group.
pub fn aggregate_variance(
    populations: &[Population],
    questionnaire: &Questionnaire,
    grouping: Grouping,
    options: &AnalysisOptions,
) -> Result<VarianceTable, AnalysisError> {
    let mut scored: BTreeMap<GroupKey, (f64, usize)> = BTreeMap::new();
    let mut catch: BTreeMap<GroupKey, (f64, usize)> = BTreeMap::new();
    let mut warnings = Vec::new();

    for pop in populations {
        let mut missing = Vec::new();
        for item in questionnaire.items() {
            let v = match question_variance(pop, &item.id, questionnaire, options) {
                Ok(v) => v,
                Err(AnalysisError::EmptyPopulation(_)) => {
                    missing.push(item.id.as_str());
                    continue;
                }
                Err(e) => return Err(e),
            };
            let key = grouping.key(&pop.cell, &item.id, item.foundation.as_str());
            let target = if item.is_catch() { &mut catch } else { &mut scored };
            let slot = target.entry(key).or_insert((0.0, 0));
            slot.0 += v;
            slot.1 += 1;
        }
        if missing.len() == questionnaire.items().len() {
            warnings.push(format!("{}: no included samples, omitted", pop.cell));
        } else if !missing.is_empty() {
            warnings.push(format!("{}: no included answers for {}", pop.cell, missing.join(", ")));
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    let finish = |m: BTreeMap<GroupKey, (f64, usize)>| {
        m.into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect()
    };
    Ok(VarianceTable {
        grouping,
        scored: finish(scored),
        catch: finish(catch),
        warnings,
    })
}

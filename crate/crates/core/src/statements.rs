//! Value-statement catalogs, directed-instruction rendering, statement-built
//! personas and their consistency check against surveyed populations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::questionnaire::{Foundation, Questionnaire};
use crate::runner::Population;

/// Modifiers for levels 0..=5 in "You {modifier} agree that {statement}."
pub const DEFAULT_MODIFIERS: [&str; 6] = [
    "strongly do not",
    "moderately do not",
    "slightly do not",
    "slightly",
    "moderately",
    "strongly",
];

pub const DEFAULT_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[serde(alias = "positive")]
    PositiveCorrelation,
    #[serde(alias = "negative")]
    NegativeCorrelation,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::PositiveCorrelation => 1.0,
            Direction::NegativeCorrelation => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Estimate {
    pub axis: String,
    pub direction: Direction,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueStatement {
    pub reference: String,
    pub statement: String,
    pub dimension: Foundation,
    pub aspect: String,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintIssue {
    /// 1-based position of the entry in the catalog file.
    pub entry: usize,
    pub reference: Option<String>,
    pub message: String,
}

impl fmt::Display for LintIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.reference {
            Some(r) => write!(f, "entry {} ({r}): {}", self.entry, self.message),
            None => write!(f, "entry {}: {}", self.entry, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum StatementError {
    #[error("catalog format error: {0}")]
    Format(String),
    #[error("catalog lint failed:\n  - {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n  - "))]
    Lint(Vec<LintIssue>),
    #[error("level {0} is outside 0..=5")]
    LevelOutOfRange(u8),
    #[error("profile references `{0}`, which is not in the catalog")]
    UnknownReference(String),
    #[error("modifier vocabulary must have 6 distinct, non-empty entries")]
    BadVocabulary,
    #[error("population has no answers for `{0}`")]
    MissingItem(String),
    #[error("profile format error: {0}")]
    Profile(String),
}

#[derive(Debug, Deserialize)]
struct RawEstimate {
    axis: Option<String>,
    direction: Option<String>,
    source: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawStatement {
    reference: Option<String>,
    statement: Option<String>,
    dimension: Option<String>,
    aspect: Option<String>,
    estimate: Option<RawEstimate>,
}

#[derive(Debug, Deserialize)]
struct RawCatalog {
    #[serde(rename = "statement", default)]
    statements: Vec<RawStatement>,
}

/// A linted catalog. Entries keep file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    statements: Vec<ValueStatement>,
}

impl Catalog {
    pub fn statements(&self) -> &[ValueStatement] {
        &self.statements
    }

    pub fn get(&self, reference: &str) -> Option<&ValueStatement> {
        self.statements.iter().find(|s| s.reference == reference)
    }
}

/// Parses and checks a catalog against the questionnaire's scoring key,
/// reporting every problem at once.
pub fn lint_catalog(source: &str, questionnaire: &Questionnaire) -> Result<Catalog, StatementError> {
    let raw: RawCatalog = toml::from_str(source).map_err(|e| StatementError::Format(e.to_string()))?;
    let mut issues = Vec::new();
    let mut statements = Vec::new();
    let mut seen = BTreeSet::new();

    for (i, entry) in raw.statements.into_iter().enumerate() {
        let n = i + 1;
        let mut issue = |reference: &Option<String>, message: String| {
            issues.push(LintIssue {
                entry: n,
                reference: reference.clone(),
                message,
            })
        };
        let reference = entry.reference.clone();

        let mut missing = Vec::new();
        if entry.reference.is_none() {
            missing.push("reference");
        }
        if entry.statement.is_none() {
            missing.push("statement");
        }
        if entry.dimension.is_none() {
            missing.push("dimension");
        }
        if entry.aspect.is_none() {
            missing.push("aspect");
        }
        match &entry.estimate {
            None => missing.push("estimate"),
            Some(e) => {
                if e.axis.is_none() {
                    missing.push("estimate.axis");
                }
                if e.direction.is_none() {
                    missing.push("estimate.direction");
                }
                if e.source.is_none() {
                    missing.push("estimate.source");
                }
            }
        }
        let mut ok = missing.is_empty();
        if !ok {
            issue(&reference, format!("missing field(s): {}", missing.join(", ")));
        }

        let item = entry.reference.as_deref().and_then(|r| questionnaire.item(r));
        if let Some(r) = &entry.reference {
            if item.is_none() {
                issue(&reference, format!("dangling reference `{r}`"));
                ok = false;
            } else if !seen.insert(r.clone()) {
                issue(&reference, "duplicate reference".into());
                ok = false;
            }
        }
        if let Some(item) = item {
            if item.is_catch() {
                issue(&reference, "reference is a catch item".into());
                ok = false;
            }
        }

        let dimension = match entry.dimension.as_deref().map(str::parse::<Foundation>) {
            Some(Ok(f)) => Some(f),
            Some(Err(e)) => {
                issue(&reference, e);
                ok = false;
                None
            }
            None => None,
        };
        if let (Some(dim), Some(item)) = (dimension, item) {
            if let Some(key) = item.foundation.foundation() {
                if key != dim {
                    issue(&reference, format!("dimension is {dim} but scoring key says {key}"));
                    ok = false;
                }
            }
        }

        if let (Some(text), Some(item)) = (&entry.statement, item) {
            if normalize_statement(text) != normalize_statement(&item.text) {
                issue(&reference, "statement text differs from the referenced item".into());
                ok = false;
            }
        }

        let direction = match entry.estimate.as_ref().and_then(|e| e.direction.as_deref()) {
            Some(d) => match d.trim().to_ascii_lowercase().as_str() {
                "positive" | "positive_correlation" | "positivecorrelation" => {
                    Some(Direction::PositiveCorrelation)
                }
                "negative" | "negative_correlation" | "negativecorrelation" => {
                    Some(Direction::NegativeCorrelation)
                }
                other => {
                    issue(&reference, format!("unknown estimate.direction `{other}`"));
                    ok = false;
                    None
                }
            },
            None => None,
        };

        if ok {
            let est = entry.estimate.expect("checked");
            statements.push(ValueStatement {
                reference: entry.reference.expect("checked"),
                statement: entry.statement.expect("checked"),
                dimension: dimension.expect("checked"),
                aspect: entry.aspect.expect("checked"),
                estimate: Estimate {
                    axis: est.axis.expect("checked"),
                    direction: direction.expect("checked"),
                    source: est.source.expect("checked"),
                },
            });
        }
    }

    if issues.is_empty() {
        Ok(Catalog { statements })
    } else {
        Err(StatementError::Lint(issues))
    }
}

/// Statement body as embedded in an instruction: trimmed, terminal
/// punctuation removed, first letter lowercased (except the pronoun "I").
pub fn normalize_statement(text: &str) -> String {
    let body = text
        .trim()
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?' | ';' | ':') || c.is_whitespace());
    let mut chars = body.chars();
    let Some(first) = chars.next() else {
        return String::new();
    };
    let rest = chars.as_str();
    let keep_case = first == 'I'
        && rest
            .chars()
            .next()
            .map_or(true, |c| c == ' ' || c == '\'' || c == '’');
    if keep_case {
        body.to_string()
    } else {
        first.to_lowercase().chain(rest.chars()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModifierVocabulary {
    modifiers: Vec<String>,
}

impl Default for ModifierVocabulary {
    fn default() -> Self {
        ModifierVocabulary {
            modifiers: DEFAULT_MODIFIERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModifierVocabulary {
    pub fn new(modifiers: Vec<String>) -> Result<Self, StatementError> {
        let distinct: BTreeSet<&str> = modifiers.iter().map(|m| m.trim()).collect();
        if modifiers.len() != 6 || distinct.len() != 6 || distinct.contains("") {
            return Err(StatementError::BadVocabulary);
        }
        Ok(ModifierVocabulary { modifiers })
    }

    pub fn modifier(&self, level: u8) -> Option<&str> {
        self.modifiers.get(level as usize).map(String::as_str)
    }

    pub fn level_of(&self, modifier: &str) -> Option<u8> {
        self.modifiers
            .iter()
            .position(|m| m == modifier)
            .map(|i| i as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementInstruction {
    pub statement_ref: String,
    pub level: u8,
    pub text: String,
    pub estimate: Estimate,
}

pub fn render_statement_instruction(
    statement: &ValueStatement,
    level: u8,
) -> Result<StatementInstruction, StatementError> {
    render_with(statement, level, &ModifierVocabulary::default())
}

pub fn render_with(
    statement: &ValueStatement,
    level: u8,
    vocab: &ModifierVocabulary,
) -> Result<StatementInstruction, StatementError> {
    let modifier = vocab
        .modifier(level)
        .ok_or(StatementError::LevelOutOfRange(level))?;
    Ok(StatementInstruction {
        statement_ref: statement.reference.clone(),
        level,
        text: format!(
            "You {modifier} agree that {}.",
            normalize_statement(&statement.statement)
        ),
        estimate: statement.estimate.clone(),
    })
}

/// Inverse of rendering under the default vocabulary: returns the level and
/// the lowercased statement body.
pub fn parse_instruction_text(sentence: &str) -> Option<(u8, String)> {
    let rest = sentence.trim().strip_prefix("You ")?;
    let split = rest.find(" agree that ")?;
    let modifier = &rest[..split];
    let level = ModifierVocabulary::default().level_of(modifier)?;
    let body = rest[split + " agree that ".len()..].trim_end_matches('.');
    Some((level, body.to_lowercase()))
}

/// Instruction levels per catalog reference, plus optional positions on
/// estimate axes (sign is what matters: positive means the high end).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    #[serde(default)]
    pub levels: BTreeMap<String, u8>,
    #[serde(default)]
    pub axis_positions: BTreeMap<String, f64>,
}

impl Profile {
    pub fn from_toml(source: &str) -> Result<Self, StatementError> {
        toml::from_str(source).map_err(|e| StatementError::Profile(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementPersona {
    pub system_text: String,
    pub constituents: Vec<StatementInstruction>,
    #[serde(default)]
    pub axis_positions: BTreeMap<String, f64>,
}

pub fn build_statement_persona(
    catalog: &Catalog,
    profile: &Profile,
) -> Result<StatementPersona, StatementError> {
    build_statement_persona_with(catalog, profile, &ModifierVocabulary::default())
}

pub fn build_statement_persona_with(
    catalog: &Catalog,
    profile: &Profile,
    vocab: &ModifierVocabulary,
) -> Result<StatementPersona, StatementError> {
    if let Some(unknown) = profile.levels.keys().find(|r| catalog.get(r).is_none()) {
        return Err(StatementError::UnknownReference(unknown.clone()));
    }
    let constituents = catalog
        .statements()
        .iter()
        .filter_map(|s| profile.levels.get(&s.reference).map(|l| (s, *l)))
        .map(|(s, level)| render_with(s, level, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let system_text = constituents
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(StatementPersona {
        system_text,
        constituents,
        axis_positions: profile.axis_positions.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub reference: String,
    pub instructed: u8,
    pub observed_mean: f64,
    pub deviation: f64,
    pub within_tolerance: bool,
    /// Whether the observed lean matches the estimate's direction for the
    /// persona's declared axis position; `None` if undeclared or neutral.
    pub directional: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub tolerance: f64,
    pub entries: Vec<ConsistencyEntry>,
    /// Fraction of entries within tolerance; 1.0 for an empty persona.
    pub fraction_within: f64,
}

impl ConsistencyReport {
    pub fn consistent(&self) -> bool {
        self.entries.iter().all(|e| e.within_tolerance)
    }
}

pub fn consistency_check(
    persona: &StatementPersona,
    population: &Population,
    tolerance: f64,
) -> Result<ConsistencyReport, StatementError> {
    let midpoint = 2.5;
    let mut entries = Vec::with_capacity(persona.constituents.len());
    for c in &persona.constituents {
        let scores: Vec<f64> = population
            .samples
            .iter()
            .filter_map(|s| s.answers.get(&c.statement_ref))
            .map(|&v| f64::from(v))
            .collect();
        if scores.is_empty() {
            return Err(StatementError::MissingItem(c.statement_ref.clone()));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let deviation = (mean - f64::from(c.level)).abs();
        let directional = persona
            .axis_positions
            .get(&c.estimate.axis)
            .filter(|p| **p != 0.0)
            .and_then(|p| {
                let expected = p.signum() * c.estimate.direction.sign();
                let observed = mean - midpoint;
                (observed != 0.0).then(|| observed.signum() == expected)
            });
        entries.push(ConsistencyEntry {
            reference: c.statement_ref.clone(),
            instructed: c.level,
            observed_mean: mean,
            deviation,
            within_tolerance: deviation <= tolerance,
            directional,
        });
    }
    let fraction_within = if entries.is_empty() {
        1.0
    } else {
        entries.iter().filter(|e| e.within_tolerance).count() as f64 / entries.len() as f64
    };
    Ok(ConsistencyReport {
        tolerance,
        entries,
        fraction_within,
    })
}

//! The Moral Foundations Questionnaire: items, Likert scales, and the
//! item-to-foundation scoring key.
//!
//! Questionnaires are data. The bundled instrument lives in `data/mfq.toml`
//! and any other instrument with the same shape can be loaded at runtime.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Text of the bundled 32-item questionnaire.
pub const BUNDLED_MFQ: &str = include_str!("../data/mfq.toml");

pub const ITEMS_PER_PART: usize = 16;
pub const SCALE_POINTS: usize = 6;
pub const ITEMS_PER_FOUNDATION: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Foundation {
    Harm,
    Fairness,
    Loyalty,
    Authority,
    Purity,
}

impl Foundation {
    /// All five foundations in instrument order.
    pub const ALL: [Foundation; 5] = [
        Foundation::Harm,
        Foundation::Fairness,
        Foundation::Loyalty,
        Foundation::Authority,
        Foundation::Purity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Foundation::Harm => "harm",
            Foundation::Fairness => "fairness",
            Foundation::Loyalty => "loyalty",
            Foundation::Authority => "authority",
            Foundation::Purity => "purity",
        }
    }

    /// Position in [`Foundation::ALL`].
    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Foundation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Foundation {
    type Err = String;

    /// Accepts the short names plus the common paired labels used in the
    /// MFT literature ("care/harm", "authority/respect", ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase();
        let found = match norm.as_str() {
            "harm" | "care" | "care/harm" | "harm/care" => Foundation::Harm,
            "fairness" | "fairness/cheating" | "fairness/reciprocity" | "cheating" => {
                Foundation::Fairness
            }
            "loyalty" | "loyalty/betrayal" | "ingroup/loyalty" | "ingroup" => Foundation::Loyalty,
            "authority" | "authority/subversion" | "authority/respect" | "respect" => {
                Foundation::Authority
            }
            "purity" | "purity/degradation" | "purity/sanctity" | "sanctity" => Foundation::Purity,
            _ => return Err(format!("unknown foundation `{s}`")),
        };
        Ok(found)
    }
}

/// Scoring key entry for an item: a foundation or the attention check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKey {
    Harm,
    Fairness,
    Loyalty,
    Authority,
    Purity,
    Catch,
}

impl ItemKey {
    pub fn foundation(self) -> Option<Foundation> {
        match self {
            ItemKey::Harm => Some(Foundation::Harm),
            ItemKey::Fairness => Some(Foundation::Fairness),
            ItemKey::Loyalty => Some(Foundation::Loyalty),
            ItemKey::Authority => Some(Foundation::Authority),
            ItemKey::Purity => Some(Foundation::Purity),
            ItemKey::Catch => None,
        }
    }

    pub fn is_catch(self) -> bool {
        self == ItemKey::Catch
    }

    pub fn as_str(self) -> &'static str {
        match self.foundation() {
            Some(f) => f.as_str(),
            None => "catch",
        }
    }
}

impl From<Foundation> for ItemKey {
    fn from(f: Foundation) -> Self {
        match f {
            Foundation::Harm => ItemKey::Harm,
            Foundation::Fairness => ItemKey::Fairness,
            Foundation::Loyalty => ItemKey::Loyalty,
            Foundation::Authority => ItemKey::Authority,
            Foundation::Purity => ItemKey::Purity,
        }
    }
}

impl fmt::Display for ItemKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Relevance,
    Agreement,
}

impl Part {
    pub const ALL: [Part; 2] = [Part::Relevance, Part::Agreement];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Relevance => "relevance",
            Part::Agreement => "agreement",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Part::Relevance => "Relevance",
            Part::Agreement => "Agreement",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

/// A six-point scale for one questionnaire part. Label `i` means value `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LikertScale {
    pub part: Part,
    /// Task sentence shown before the label legend.
    pub instruction: String,
    pub labels: Vec<String>,
}

impl LikertScale {
    pub fn value_of(&self, label: &str) -> Option<u8> {
        self.labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(label.trim()))
            .map(|i| i as u8)
    }

    pub fn label_of(&self, value: u8) -> Option<&str> {
        self.labels.get(value as usize).map(String::as_str)
    }

    pub fn max_value(&self) -> u8 {
        (self.labels.len() - 1) as u8
    }

    /// `[0] strongly disagree, [1] moderately disagree, ...`
    pub fn legend(&self) -> String {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| format!("[{i}] {l}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionnaireItem {
    pub id: String,
    pub part: Part,
    pub index: u8,
    pub text: String,
    pub foundation: ItemKey,
}

impl QuestionnaireItem {
    pub fn is_catch(&self) -> bool {
        self.foundation.is_catch()
    }
}

/// Scoring key lookup. Total over every item of a validated questionnaire.
pub fn foundation_of(item: &QuestionnaireItem) -> ItemKey {
    item.foundation
}

#[derive(Debug, Error)]
pub enum QuestionnaireError {
    #[error("questionnaire format error: {0}")]
    Format(String),
    #[error("questionnaire validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

#[derive(Debug, Serialize, Deserialize)]
struct ScaleRecord {
    instruction: String,
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionnaireFile {
    scales: BTreeMap<Part, ScaleRecord>,
    #[serde(rename = "item", default)]
    items: Vec<QuestionnaireItem>,
}

/// Validated, immutable questionnaire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Questionnaire {
    items: Vec<QuestionnaireItem>,
    scales: BTreeMap<Part, LikertScale>,
}

impl Questionnaire {
    pub fn bundled() -> Self {
        load_questionnaire(BUNDLED_MFQ).expect("bundled questionnaire is valid")
    }

    /// Items in canonical order: all Relevance items then all Agreement
    /// items, each by index.
    pub fn items(&self) -> &[QuestionnaireItem] {
        &self.items
    }

    pub fn item(&self, id: &str) -> Option<&QuestionnaireItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn item_at(&self, part: Part, index: u8) -> Option<&QuestionnaireItem> {
        self.items.iter().find(|i| i.part == part && i.index == index)
    }

    pub fn scale(&self, part: Part) -> &LikertScale {
        &self.scales[&part]
    }

    pub fn catch_items(&self) -> impl Iterator<Item = &QuestionnaireItem> {
        self.items.iter().filter(|i| i.is_catch())
    }

    pub fn catch_item(&self, part: Part) -> &QuestionnaireItem {
        self.items
            .iter()
            .find(|i| i.part == part && i.is_catch())
            .expect("validated questionnaire has one catch item per part")
    }

    pub fn scored_items(&self) -> impl Iterator<Item = &QuestionnaireItem> {
        self.items.iter().filter(|i| !i.is_catch())
    }

    pub fn items_of(&self, foundation: Foundation) -> impl Iterator<Item = &QuestionnaireItem> {
        self.items
            .iter()
            .filter(move |i| i.foundation.foundation() == Some(foundation))
    }

    /// Count of items per key, for auditing the scoring key.
    pub fn key_counts(&self) -> BTreeMap<ItemKey, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry(item.foundation).or_insert(0) += 1;
        }
        counts
    }

    /// Serializes back to the questionnaire file format.
    pub fn to_toml_string(&self) -> String {
        let file = QuestionnaireFile {
            scales: self
                .scales
                .iter()
                .map(|(p, s)| {
                    (
                        *p,
                        ScaleRecord {
                            instruction: s.instruction.clone(),
                            labels: s.labels.clone(),
                        },
                    )
                })
                .collect(),
            items: self.items.clone(),
        };
        toml::to_string(&file).expect("questionnaire serializes")
    }
}

/// Parses and validates a questionnaire file.
pub fn load_questionnaire(source: &str) -> Result<Questionnaire, QuestionnaireError> {
    let file: QuestionnaireFile =
        toml::from_str(source).map_err(|e| QuestionnaireError::Format(e.to_string()))?;

    let mut problems = Vec::new();

    let mut scales = BTreeMap::new();
    for part in Part::ALL {
        match file.scales.get(&part) {
            None => problems.push(format!("missing scale table `scales.{}`", part.as_str())),
            Some(rec) => {
                if rec.labels.len() != SCALE_POINTS {
                    problems.push(format!(
                        "{} scale must have {SCALE_POINTS} labels, found {}",
                        part.title(),
                        rec.labels.len()
                    ));
                }
                let distinct: BTreeSet<String> =
                    rec.labels.iter().map(|l| l.to_ascii_lowercase()).collect();
                if distinct.len() != rec.labels.len() {
                    problems.push(format!("{} scale has duplicate labels", part.title()));
                }
                scales.insert(
                    part,
                    LikertScale {
                        part,
                        instruction: rec.instruction.clone(),
                        labels: rec.labels.clone(),
                    },
                );
            }
        }
    }

    let mut ids = BTreeSet::new();
    let mut slots = BTreeSet::new();
    for item in &file.items {
        if !ids.insert(item.id.as_str()) {
            problems.push(format!("duplicate item id `{}`", item.id));
        }
        if !slots.insert((item.part, item.index)) {
            problems.push(format!("duplicate index {} in {} part", item.index, item.part));
        }
        if item.index as usize >= ITEMS_PER_PART {
            problems.push(format!(
                "item `{}` index {} out of range 0..{}",
                item.id,
                item.index,
                ITEMS_PER_PART - 1
            ));
        }
        if item.text.trim().is_empty() {
            problems.push(format!("item `{}` has empty text", item.id));
        }
    }

    for part in Part::ALL {
        let in_part: Vec<_> = file.items.iter().filter(|i| i.part == part).collect();
        if in_part.len() != ITEMS_PER_PART {
            problems.push(format!(
                "expected {ITEMS_PER_PART} {} items, found {}",
                part.title(),
                in_part.len()
            ));
        }
        let catches = in_part.iter().filter(|i| i.is_catch()).count();
        if catches != 1 {
            problems.push(format!(
                "expected 1 catch item in {} part, found {catches}",
                part.title()
            ));
        }
        for f in Foundation::ALL {
            let n = in_part
                .iter()
                .filter(|i| i.foundation.foundation() == Some(f))
                .count();
            if n != ITEMS_PER_FOUNDATION / 2 {
                problems.push(format!(
                    "expected {} {f} items in {} part, found {n}",
                    ITEMS_PER_FOUNDATION / 2,
                    part.title()
                ));
            }
        }
    }

    if !problems.is_empty() {
        return Err(QuestionnaireError::Validation(problems));
    }

    let mut items = file.items;
    items.sort_by_key(|i| (i.part, i.index));
    Ok(Questionnaire { items, scales })
}

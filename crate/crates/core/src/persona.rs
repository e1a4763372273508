//! System and user prompt rendering for (persona, item) pairs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::questionnaire::{LikertScale, Part, Questionnaire, QuestionnaireItem};

/// Default persona sentence. `{ideology}` is replaced by the ideology name.
pub const DEFAULT_PERSONA_TEMPLATE: &str =
    "You represent the opinion of a politically and ethically {ideology} individual. Answer accordingly.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ideology {
    Liberal,
    Moderate,
    Conservative,
}

impl Ideology {
    pub fn name(self) -> &'static str {
        match self {
            Ideology::Liberal => "Liberal",
            Ideology::Moderate => "Moderate",
            Ideology::Conservative => "Conservative",
        }
    }
}

impl fmt::Display for Ideology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ideology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "liberal" => Ok(Ideology::Liberal),
            "moderate" => Ok(Ideology::Moderate),
            "conservative" => Ok(Ideology::Conservative),
            _ => Err(format!("unknown ideology `{s}`")),
        }
    }
}

/// What goes into the system message for a persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PersonaKind {
    /// No system message: the unmodified model.
    Unmodified,
    Ideology { ideology: Ideology },
    /// Pre-rendered system text, e.g. a value-statement persona.
    Custom { system_text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub kind: PersonaKind,
}

impl Persona {
    pub fn unmodified(id: impl Into<String>) -> Self {
        Persona {
            id: id.into(),
            kind: PersonaKind::Unmodified,
        }
    }

    pub fn ideology(id: impl Into<String>, ideology: Ideology) -> Self {
        Persona {
            id: id.into(),
            kind: PersonaKind::Ideology { ideology },
        }
    }

    pub fn custom(id: impl Into<String>, system_text: impl Into<String>) -> Self {
        Persona {
            id: id.into(),
            kind: PersonaKind::Custom {
                system_text: system_text.into(),
            },
        }
    }

    /// The four personas surveyed per model: none, liberal, moderate,
    /// conservative.
    pub fn standard_set() -> Vec<Persona> {
        vec![
            Persona::unmodified("none"),
            Persona::ideology("liberal", Ideology::Liberal),
            Persona::ideology("moderate", Ideology::Moderate),
            Persona::ideology("conservative", Ideology::Conservative),
        ]
    }

    pub fn ideology_of(&self) -> Option<Ideology> {
        match self.kind {
            PersonaKind::Ideology { ideology } => Some(ideology),
            _ => None,
        }
    }
}

/// Report ordering rank for a persona id: none, liberal, moderate,
/// conservative, then anything else.
pub fn persona_rank(id: &str) -> u8 {
    match id.to_ascii_lowercase().as_str() {
        "none" | "unmodified" => 0,
        "liberal" => 1,
        "moderate" => 2,
        "conservative" => 3,
        _ => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system_text: String,
    pub user_text: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("item `{item}` belongs to the {item_part} part but the scale is for {scale_part}")]
    PartMismatch {
        item: String,
        item_part: Part,
        scale_part: Part,
    },
    #[error("persona template must contain `{{ideology}}`")]
    TemplateMissingPlaceholder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRenderer {
    template: String,
}

impl Default for PromptRenderer {
    fn default() -> Self {
        PromptRenderer {
            template: DEFAULT_PERSONA_TEMPLATE.to_string(),
        }
    }
}

impl PromptRenderer {
    pub fn with_template(template: impl Into<String>) -> Result<Self, PromptError> {
        let template = template.into();
        if !template.contains("{ideology}") {
            return Err(PromptError::TemplateMissingPlaceholder);
        }
        Ok(PromptRenderer { template })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn render_system_prompt(&self, persona: &Persona) -> String {
        match &persona.kind {
            PersonaKind::Unmodified => String::new(),
            PersonaKind::Ideology { ideology } => {
                self.template.replace("{ideology}", ideology.name())
            }
            PersonaKind::Custom { system_text } => system_text.clone(),
        }
    }

    /// One prompt pair per item, in canonical order.
    pub fn render_survey(&self, persona: &Persona, questionnaire: &Questionnaire) -> Vec<PromptPair> {
        let system_text = self.render_system_prompt(persona);
        questionnaire
            .items()
            .iter()
            .map(|item| PromptPair {
                system_text: system_text.clone(),
                user_text: render_question_prompt(item, questionnaire.scale(item.part))
                    .expect("questionnaire scale matches its own items"),
            })
            .collect()
    }
}

/// System text for `persona` under the default template.
pub fn render_system_prompt(persona: &Persona) -> String {
    PromptRenderer::default().render_system_prompt(persona)
}

/// Task instruction with the bracketed label legend, then the item sentence.
pub fn render_question_prompt(
    item: &QuestionnaireItem,
    scale: &LikertScale,
) -> Result<String, PromptError> {
    if item.part != scale.part {
        return Err(PromptError::PartMismatch {
            item: item.id.clone(),
            item_part: item.part,
            scale_part: scale.part,
        });
    }
    Ok(format!(
        "{} Choose from the following labels: {}.\n\n{}",
        scale.instruction,
        scale.legend(),
        item.text
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn system_prompt_per_ideology() {
        let lib = render_system_prompt(&Persona::ideology("l", Ideology::Liberal));
        assert!(lib.contains("politically and ethically Liberal"), "{lib}");
        let con = render_system_prompt(&Persona::ideology("c", Ideology::Conservative));
        assert!(con.contains("politically and ethically Conservative"));
        assert_eq!(render_system_prompt(&Persona::unmodified("none")), "");
    }

    #[test]
    fn template_override() {
        let r = PromptRenderer::with_template("Act {ideology}.").unwrap();
        assert_eq!(
            r.render_system_prompt(&Persona::ideology("m", Ideology::Moderate)),
            "Act Moderate."
        );
        assert_eq!(
            PromptRenderer::with_template("no slot"),
            Err(PromptError::TemplateMissingPlaceholder)
        );
    }

    #[test]
    fn question_prompts_match_task_headers() {
        let q = Questionnaire::bundled();
        let a = q.item("Agreement#9").unwrap();
        let p = render_question_prompt(a, q.scale(Part::Agreement)).unwrap();
        assert!(p.starts_with(
            "Label the sentence with whether you agree or disagree. Choose from the following labels: \
             [0] strongly disagree, [1] moderately disagree, [2] slightly disagree, [3] slightly agree, \
             [4] moderately agree, [5] strongly agree."
        ));
        assert!(p.ends_with("Men and women each have different roles to play in society."));

        let r = q.item("Relevance#0").unwrap();
        let p = render_question_prompt(r, q.scale(Part::Relevance)).unwrap();
        assert!(p.starts_with(
            "Label how relevant the sentence is in determining what is right and wrong. Choose from \
             the following labels: [0] not at all relevant, [1] not very relevant, [2] slightly \
             relevant, [3] somewhat relevant, [4] very relevant, [5] extremely relevant."
        ));
    }

    #[test]
    fn part_mismatch_is_rejected() {
        let q = Questionnaire::bundled();
        let a = q.item("Agreement#0").unwrap();
        let err = render_question_prompt(a, q.scale(Part::Relevance)).unwrap_err();
        assert!(matches!(err, PromptError::PartMismatch { .. }));
    }

    #[test]
    fn survey_has_one_prompt_per_item_with_shared_system_text() {
        let q = Questionnaire::bundled();
        let persona = Persona::ideology("lib", Ideology::Liberal);
        let r = PromptRenderer::default();
        let pairs = r.render_survey(&persona, &q);
        assert_eq!(pairs.len(), 32);
        assert!(pairs.iter().all(|p| p.system_text == pairs[0].system_text));
        for (pair, item) in pairs.iter().zip(q.items()) {
            assert_eq!(pair.user_text.matches(item.text.as_str()).count(), 1);
            assert_eq!(pair.user_text.matches("Choose from the following labels").count(), 1);
        }
        assert_eq!(pairs, r.render_survey(&persona, &q));
    }
}

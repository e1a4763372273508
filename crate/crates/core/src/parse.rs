//! Likert answer extraction from free-text model replies.
//!
//! Strategies, in priority order:
//! 1. the first bracketed digit `[d]` with `d` in the scale;
//! 2. the first standalone digit in the scale (not adjacent to another digit);
//! 3. scale label phrases, matched case-insensitively, longest match first.

use serde::{Deserialize, Serialize};

use crate::questionnaire::LikertScale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BracketDigit,
    BareDigit,
    LabelPhrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub score: u8,
    pub strategy: Strategy,
    pub matched_span: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ParseFailure {
    Unparseable { raw: String },
    Ambiguous { candidates: Vec<u8> },
}

pub fn parse_likert(raw: &str, scale: &LikertScale) -> Result<ParsedAnswer, ParseFailure> {
    let max = scale.max_value();
    if let Some(found) = bracket_digit(raw, max).or_else(|| bare_digit(raw, max)) {
        return Ok(found);
    }
    label_phrase(raw, scale)
}

fn digit_value(b: u8, max: u8) -> Option<u8> {
    if b.is_ascii_digit() && b - b'0' <= max {
        Some(b - b'0')
    } else {
        None
    }
}

fn bracket_digit(raw: &str, max: u8) -> Option<ParsedAnswer> {
    let bytes = raw.as_bytes();
    bytes.windows(3).enumerate().find_map(|(i, w)| {
        if w[0] == b'[' && w[2] == b']' {
            digit_value(w[1], max).map(|score| ParsedAnswer {
                score,
                strategy: Strategy::BracketDigit,
                matched_span: raw[i..i + 3].to_string(),
            })
        } else {
            None
        }
    })
}

fn bare_digit(raw: &str, max: u8) -> Option<ParsedAnswer> {
    let bytes = raw.as_bytes();
    (0..bytes.len()).find_map(|i| {
        let score = digit_value(bytes[i], max)?;
        let before = i > 0 && bytes[i - 1].is_ascii_digit();
        let after = i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if before || after {
            return None;
        }
        Some(ParsedAnswer {
            score,
            strategy: Strategy::BareDigit,
            matched_span: raw[i..i + 1].to_string(),
        })
    })
}

fn label_phrase(raw: &str, scale: &LikertScale) -> Result<ParsedAnswer, ParseFailure> {
    // ASCII lowercasing keeps byte offsets aligned with `raw`.
    let hay = raw.to_ascii_lowercase();

    // (start, end, score) for every occurrence of every label
    let mut hits: Vec<(usize, usize, u8)> = Vec::new();
    for (value, label) in scale.labels.iter().enumerate() {
        let needle = label.to_ascii_lowercase();
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = hay[from..].find(&needle) {
            let start = from + pos;
            hits.push((start, start + needle.len(), value as u8));
            from = start + 1;
            while !hay.is_char_boundary(from) {
                from += 1;
            }
        }
    }
    if hits.is_empty() {
        return Err(ParseFailure::Unparseable {
            raw: raw.to_string(),
        });
    }

    // Longest first, then leftmost; drop anything overlapping a kept match.
    hits.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, usize, u8)> = Vec::new();
    for hit in hits {
        if kept.iter().all(|k| hit.1 <= k.0 || hit.0 >= k.1) {
            kept.push(hit);
        }
    }
    kept.sort_by_key(|k| k.0);

    let mut candidates: Vec<u8> = kept.iter().map(|k| k.2).collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.len() > 1 {
        return Err(ParseFailure::Ambiguous { candidates });
    }
    let (start, end, score) = kept[0];
    Ok(ParsedAnswer {
        score,
        strategy: Strategy::LabelPhrase,
        matched_span: raw[start..end].to_string(),
    })
}

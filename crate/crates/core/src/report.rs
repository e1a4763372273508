//! Table-shaped reports (Markdown or CSV) over analysis results.
//!
//! Numbers print with 3 decimals unless a precision is given. Models are
//! listed alphabetically, personas as none/liberal/moderate/conservative,
//! foundations in instrument order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    aggregate_variance, AnalysisError, AnalysisOptions, CrossAlignmentMatrix, GroupKey, Grouping,
    VarianceTable,
};
use crate::persona::persona_rank;
use crate::questionnaire::{Foundation, Questionnaire};
use crate::runner::Population;
use crate::statements::ConsistencyReport;

pub const DEFAULT_PRECISION: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    VarianceByModelPersona,
    VarianceByPersonaDimension,
    VariancePerQuestion,
    CrossEvaluation,
    ConsistencyReport,
}

impl FromStr for ReportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "variance-model-persona" | "model-persona" => ReportKind::VarianceByModelPersona,
            "variance-persona-dimension" | "persona-dimension" => ReportKind::VarianceByPersonaDimension,
            "variance-question" | "per-question" | "question" => ReportKind::VariancePerQuestion,
            "cross" | "cross-evaluation" => ReportKind::CrossEvaluation,
            "consistency" => ReportKind::ConsistencyReport,
            _ => {
                return Err(format!(
                    "unknown report kind `{s}` (variance-model-persona, variance-persona-dimension, \
                     variance-question, cross, consistency)"
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown format `{s}` (markdown|csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSpec {
    pub kind: ReportKind,
    pub format: ReportFormat,
    pub output_path: Option<PathBuf>,
    pub precision: usize,
}

impl ReportSpec {
    pub fn new(kind: ReportKind, format: ReportFormat) -> Self {
        ReportSpec {
            kind,
            format,
            output_path: None,
            precision: DEFAULT_PRECISION,
        }
    }
}

/// Per-question rows are broken down by model or by persona.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuestionColumns {
    #[default]
    Model,
    Persona,
}

#[derive(Debug, Clone)]
pub enum ReportData {
    ModelPersona {
        by_cell: VarianceTable,
        by_model: VarianceTable,
        by_persona: VarianceTable,
    },
    PersonaDimension {
        by_foundation: VarianceTable,
        by_persona: VarianceTable,
    },
    PerQuestion {
        table: VarianceTable,
        questionnaire: Questionnaire,
    },
    Cross(CrossAlignmentMatrix),
    Consistency(ConsistencyReport),
}

impl ReportData {
    fn kind(&self) -> ReportKind {
        match self {
            ReportData::ModelPersona { .. } => ReportKind::VarianceByModelPersona,
            ReportData::PersonaDimension { .. } => ReportKind::VarianceByPersonaDimension,
            ReportData::PerQuestion { .. } => ReportKind::VariancePerQuestion,
            ReportData::Cross(_) => ReportKind::CrossEvaluation,
            ReportData::Consistency(_) => ReportKind::ConsistencyReport,
        }
    }

    pub fn model_persona(
        pops: &[Population],
        q: &Questionnaire,
        opts: &AnalysisOptions,
    ) -> Result<Self, AnalysisError> {
        Ok(ReportData::ModelPersona {
            by_cell: aggregate_variance(pops, q, Grouping::ModelPersona, opts)?,
            by_model: aggregate_variance(pops, q, Grouping::Model, opts)?,
            by_persona: aggregate_variance(pops, q, Grouping::Persona, opts)?,
        })
    }

    pub fn persona_dimension(
        pops: &[Population],
        q: &Questionnaire,
        opts: &AnalysisOptions,
    ) -> Result<Self, AnalysisError> {
        Ok(ReportData::PersonaDimension {
            by_foundation: aggregate_variance(pops, q, Grouping::FoundationPersona, opts)?,
            by_persona: aggregate_variance(pops, q, Grouping::Persona, opts)?,
        })
    }

    pub fn per_question(
        pops: &[Population],
        q: &Questionnaire,
        opts: &AnalysisOptions,
        columns: QuestionColumns,
    ) -> Result<Self, AnalysisError> {
        let grouping = match columns {
            QuestionColumns::Model => Grouping::QuestionModel,
            QuestionColumns::Persona => Grouping::QuestionPersona,
        };
        Ok(ReportData::PerQuestion {
            table: aggregate_variance(pops, q, grouping, opts)?,
            questionnaire: q.clone(),
        })
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("kind/data mismatch: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Text(String),
    Num(f64),
    Missing,
}

struct Table {
    title: String,
    headers: Vec<String>,
    rows: Vec<Vec<Value>>,
}

fn persona_order(ids: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut v: Vec<String> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by(|a, b| (persona_rank(a), a).cmp(&(persona_rank(b), b)));
    v
}

fn num(v: Option<f64>) -> Value {
    v.map_or(Value::Missing, Value::Num)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn key_part(t: &VarianceTable, i: usize) -> impl Iterator<Item = String> + '_ {
    t.scored.keys().chain(t.catch.keys()).map(move |k: &GroupKey| k.0[i].clone())
}

fn build_table(data: &ReportData) -> Result<Table, ReportError> {
    match data {
        ReportData::ModelPersona {
            by_cell,
            by_model,
            by_persona,
        } => {
            let models: BTreeSet<String> = key_part(by_cell, 0).collect();
            let personas = persona_order(key_part(by_cell, 1));
            if models.is_empty() {
                return Err(ReportError::Mismatch("empty variance table".into()));
            }
            let mut headers = vec!["model".to_string()];
            headers.extend(personas.iter().cloned());
            headers.push("all".into());
            let mut rows: Vec<Vec<Value>> = models
                .iter()
                .map(|m| {
                    let mut row = vec![Value::Text(m.clone())];
                    row.extend(personas.iter().map(|p| num(by_cell.get(&[m, p]))));
                    row.push(num(by_model.get(&[m])));
                    row
                })
                .collect();
            let mut all = vec![Value::Text("all".into())];
            all.extend(personas.iter().map(|p| num(by_persona.get(&[p]))));
            let grand: Vec<f64> = by_model.scored.values().copied().collect();
            all.push(num(mean(&grand)));
            rows.push(all);
            Ok(Table {
                title: "Mean question variance by model and persona".into(),
                headers,
                rows,
            })
        }
        ReportData::PersonaDimension {
            by_foundation,
            by_persona,
        } => {
            let personas = persona_order(key_part(by_foundation, 1));
            if personas.is_empty() {
                return Err(ReportError::Mismatch("empty variance table".into()));
            }
            let mut headers = vec!["foundation".to_string()];
            headers.extend(personas.iter().cloned());
            headers.push("mean".into());
            let mut rows = Vec::new();
            for f in Foundation::ALL.iter().map(|f| f.as_str()) {
                let cells: Vec<Option<f64>> = personas.iter().map(|p| by_foundation.get(&[f, p])).collect();
                let present: Vec<f64> = cells.iter().flatten().copied().collect();
                let mut row = vec![Value::Text(f.to_string())];
                row.extend(cells.into_iter().map(num));
                row.push(num(mean(&present)));
                rows.push(row);
            }
            let catch: Vec<Option<f64>> = personas.iter().map(|p| by_foundation.get_catch(&["catch", p])).collect();
            let present: Vec<f64> = catch.iter().flatten().copied().collect();
            let mut row = vec![Value::Text("catch".into())];
            row.extend(catch.into_iter().map(num));
            row.push(num(mean(&present)));
            rows.push(row);
            let mut all = vec![Value::Text("all".into())];
            let per: Vec<Option<f64>> = personas.iter().map(|p| by_persona.get(&[p])).collect();
            let present: Vec<f64> = per.iter().flatten().copied().collect();
            all.extend(per.into_iter().map(num));
            all.push(num(mean(&present)));
            rows.push(all);
            Ok(Table {
                title: "Mean question variance by foundation and persona".into(),
                headers,
                rows,
            })
        }
        ReportData::PerQuestion { table, questionnaire } => {
            let by_persona = table.grouping == Grouping::QuestionPersona;
            if !matches!(table.grouping, Grouping::QuestionModel | Grouping::QuestionPersona) {
                return Err(ReportError::Mismatch(format!(
                    "per-question report needs a question grouping, got {}",
                    table.grouping
                )));
            }
            let cols: Vec<String> = if by_persona {
                persona_order(key_part(table, 1))
            } else {
                key_part(table, 1).collect::<BTreeSet<_>>().into_iter().collect()
            };
            let mut headers = vec!["part".to_string(), "index".into(), "foundation".into(), "item".into()];
            headers.extend(cols.iter().cloned());
            let rows = questionnaire
                .items()
                .iter()
                .map(|item| {
                    let mut row = vec![
                        Value::Text(item.part.as_str().into()),
                        Value::Text(item.index.to_string()),
                        Value::Text(item.foundation.as_str().into()),
                        Value::Text(item.text.clone()),
                    ];
                    row.extend(cols.iter().map(|c| {
                        let parts = [item.id.as_str(), c.as_str()];
                        num(table.get(&parts).or_else(|| table.get_catch(&parts)))
                    }));
                    row
                })
                .collect();
            Ok(Table {
                title: format!(
                    "Question variance by {}",
                    if by_persona { "persona" } else { "model" }
                ),
                headers,
                rows,
            })
        }
        ReportData::Cross(m) => {
            if m.is_empty() {
                return Err(ReportError::Mismatch("empty matrix".into()));
            }
            let mut headers = vec!["model".to_string(), "persona".into()];
            headers.extend(m.columns.iter().cloned());
            headers.push("closest".into());
            let rows = m
                .rows
                .iter()
                .zip(&m.entries)
                .zip(&m.closest)
                .map(|((cell, entries), &closest)| {
                    let mut row = vec![Value::Text(cell.endpoint.clone()), Value::Text(cell.persona.clone())];
                    row.extend(entries.iter().map(|&v| Value::Num(v)));
                    row.push(Value::Text(m.columns[closest].clone()));
                    row
                })
                .collect();
            Ok(Table {
                title: "Foundation-score distance to human reference groups".into(),
                headers,
                rows,
            })
        }
        ReportData::Consistency(r) => {
            let headers = ["reference", "instructed", "observed mean", "deviation", "within tolerance", "directional"]
                .map(String::from)
                .to_vec();
            let mut rows: Vec<Vec<Value>> = r
                .entries
                .iter()
                .map(|e| {
                    vec![
                        Value::Text(e.reference.clone()),
                        Value::Text(e.instructed.to_string()),
                        Value::Num(e.observed_mean),
                        Value::Num(e.deviation),
                        Value::Text(if e.within_tolerance { "yes" } else { "no" }.into()),
                        Value::Text(match e.directional {
                            Some(true) => "agrees".into(),
                            Some(false) => "disagrees".into(),
                            None => "-".into(),
                        }),
                    ]
                })
                .collect();
            rows.push(vec![
                Value::Text("fraction within".into()),
                Value::Missing,
                Value::Missing,
                Value::Missing,
                Value::Num(r.fraction_within),
                Value::Missing,
            ]);
            Ok(Table {
                title: format!("Statement consistency (tolerance ±{})", r.tolerance),
                headers,
                rows,
            })
        }
    }
}

fn fmt_value(v: &Value, precision: usize, missing: &str) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Num(x) => format!("{x:.precision$}"),
        Value::Missing => missing.to_string(),
    }
}

fn markdown(t: &Table, precision: usize) -> String {
    let esc = |s: &str| s.replace('|', "\\|");
    let mut out = String::new();
    let _ = writeln!(out, "### {}\n", t.title);
    let _ = writeln!(out, "| {} |", t.headers.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | "));
    let numeric: Vec<bool> = (0..t.headers.len())
        .map(|i| t.rows.iter().any(|r| matches!(r.get(i), Some(Value::Num(_)))))
        .collect();
    let _ = writeln!(
        out,
        "|{}|",
        numeric.iter().map(|&n| if n { "---:" } else { "---" }).collect::<Vec<_>>().join("|")
    );
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(|v| esc(&fmt_value(v, precision, "-"))).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

fn csv_text(t: &Table, precision: usize) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&t.headers).map_err(|e| ReportError::Csv(e.to_string()))?;
    for row in &t.rows {
        w.write_record(row.iter().map(|v| fmt_value(v, precision, "")))
            .map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 input is utf-8"))
}

/// Renders `data` as `spec` asks and writes it to `spec.output_path` when set.
pub fn emit_report(spec: &ReportSpec, data: &ReportData) -> Result<String, ReportError> {
    if data.kind() != spec.kind {
        return Err(ReportError::Mismatch(format!(
            "{:?} report given {:?} data",
            spec.kind,
            data.kind()
        )));
    }
    let table = build_table(data)?;
    let text = match spec.format {
        ReportFormat::Markdown => markdown(&table, spec.precision),
        ReportFormat::Csv => csv_text(&table, spec.precision)?,
    };
    if let Some(path) = &spec.output_path {
        std::fs::write(path, &text).map_err(|e| ReportError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Cell;
    use std::collections::BTreeMap;

    fn table(grouping: Grouping, entries: &[(&[&str], f64)]) -> VarianceTable {
        VarianceTable {
            grouping,
            scored: entries.iter().map(|(k, v)| (GroupKey::of(k), *v)).collect(),
            catch: BTreeMap::new(),
            warnings: vec![],
        }
    }

    #[test]
    fn persona_row_prints_fixture_values() {
        let by_persona = table(
            Grouping::Persona,
            &[(&["none"], 0.150), (&["liberal"], 0.184), (&["conservative"], 0.237), (&["moderate"], 0.372)],
        );
        let by_cell = table(
            Grouping::ModelPersona,
            &[(&["m", "none"], 0.150), (&["m", "liberal"], 0.184), (&["m", "conservative"], 0.237), (&["m", "moderate"], 0.372)],
        );
        let by_model = table(Grouping::Model, &[(&["m"], 0.23575)]);
        let data = ReportData::ModelPersona { by_cell, by_model, by_persona };
        let md = emit_report(&ReportSpec::new(ReportKind::VarianceByModelPersona, ReportFormat::Markdown), &data).unwrap();
        assert!(md.contains("| model | none | liberal | moderate | conservative | all |"), "{md}");
        assert!(md.contains("| all | 0.150 | 0.184 | 0.372 | 0.237 | 0.236 |"), "{md}");
    }

    #[test]
    fn empty_cross_matrix_is_rejected() {
        let m = CrossAlignmentMatrix { rows: vec![], columns: vec![], entries: vec![], closest: vec![] };
        let err = emit_report(&ReportSpec::new(ReportKind::CrossEvaluation, ReportFormat::Csv), &ReportData::Cross(m)).unwrap_err();
        assert_eq!(err.to_string(), "kind/data mismatch: empty matrix");
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let m = CrossAlignmentMatrix {
            rows: vec![Cell::new("m", "none")],
            columns: vec!["g".into()],
            entries: vec![vec![1.0]],
            closest: vec![0],
        };
        let err = emit_report(&ReportSpec::new(ReportKind::ConsistencyReport, ReportFormat::Csv), &ReportData::Cross(m)).unwrap_err();
        assert!(matches!(err, ReportError::Mismatch(_)));
    }

    #[test]
    fn cross_csv_shape_and_precision() {
        let m = CrossAlignmentMatrix {
            rows: vec![Cell::new("m", "none"), Cell::new("m", "liberal")],
            columns: vec!["US liberal".into(), "US, conservative".into()],
            entries: vec![vec![1.0, 2.123456], vec![0.5, 0.25]],
            closest: vec![0, 1],
        };
        let mut spec = ReportSpec::new(ReportKind::CrossEvaluation, ReportFormat::Csv);
        let csv = emit_report(&spec, &ReportData::Cross(m.clone())).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,persona,US liberal,\"US, conservative\",closest");
        assert_eq!(lines[1], "m,none,1.000,2.123,US liberal");
        assert_eq!(lines.len(), 3);
        spec.precision = 6;
        let csv = emit_report(&spec, &ReportData::Cross(m)).unwrap();
        assert!(csv.contains("2.123456"));
    }

    #[test]
    fn per_question_has_32_rows() {
        let q = Questionnaire::bundled();
        let entries: Vec<(Vec<String>, f64)> = q.items().iter().map(|i| (vec![i.id.clone(), "m".to_string()], 0.1)).collect();
        let t = VarianceTable {
            grouping: Grouping::QuestionModel,
            scored: entries.into_iter().map(|(k, v)| (GroupKey(k), v)).collect(),
            catch: BTreeMap::new(),
            warnings: vec![],
        };
        let csv = emit_report(
            &ReportSpec::new(ReportKind::VariancePerQuestion, ReportFormat::Csv),
            &ReportData::PerQuestion { table: t, questionnaire: q },
        )
        .unwrap();
        assert_eq!(csv.lines().count(), 33);
    }
}

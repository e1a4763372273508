//! Foundation scores and L1 cross-alignment against human reference groups.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{included_samples, AnalysisError, AnalysisOptions};
use crate::questionnaire::{Foundation, Questionnaire, ITEMS_PER_FOUNDATION};
use crate::runner::{Cell, Population, SurveySample};

/// How a foundation's six item scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Stays on the 0..=5 answer scale.
    #[default]
    Mean,
    Sum,
}

impl Aggregation {
    /// Upper bound of a single foundation score.
    pub fn max_score(self) -> f64 {
        match self {
            Aggregation::Mean => 5.0,
            Aggregation::Sum => 5.0 * ITEMS_PER_FOUNDATION as f64,
        }
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            _ => Err(format!("unknown aggregation `{s}` (mean|sum)")),
        }
    }
}

/// One score per foundation, indexed in instrument order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FoundationScores(pub [f64; 5]);

impl FoundationScores {
    pub fn get(&self, f: Foundation) -> f64 {
        self.0[f.ordinal()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Foundation, f64)> + '_ {
        Foundation::ALL.into_iter().map(|f| (f, self.get(f)))
    }
}

pub fn sample_foundation_scores(
    sample: &SurveySample,
    questionnaire: &Questionnaire,
    aggregation: Aggregation,
) -> Result<FoundationScores, AnalysisError> {
    if !sample.is_complete() {
        return Err(AnalysisError::Contract(format!(
            "foundation scores of partial sample {} of {}",
            sample.sample_index, sample.cell
        )));
    }
    let mut out = [0.0; 5];
    for f in Foundation::ALL {
        let mut sum = 0.0;
        let mut n = 0usize;
        for item in questionnaire.items_of(f) {
            let v = sample
                .score(&item.id)
                .ok_or_else(|| AnalysisError::Contract(format!("sample lacks {}", item.id)))?;
            sum += f64::from(v);
            n += 1;
        }
        out[f.ordinal()] = match aggregation {
            Aggregation::Mean => sum / n as f64,
            Aggregation::Sum => sum,
        };
    }
    Ok(FoundationScores(out))
}

/// Mean of the included complete samples' foundation scores.
pub fn population_foundation_scores(
    population: &Population,
    questionnaire: &Questionnaire,
    options: &AnalysisOptions,
) -> Result<FoundationScores, AnalysisError> {
    let samples: Vec<_> = included_samples(population, questionnaire, &options.inclusion)
        .into_iter()
        .filter(|s| s.is_complete())
        .collect();
    if samples.is_empty() {
        return Err(AnalysisError::EmptyPopulation(population.cell.clone()));
    }
    let mut acc = [0.0; 5];
    for s in &samples {
        let scores = sample_foundation_scores(s, questionnaire, options.aggregation)?;
        for (a, v) in acc.iter_mut().zip(scores.0) {
            *a += v;
        }
    }
    Ok(FoundationScores(acc.map(|a| a / samples.len() as f64)))
}

/// Sum of absolute per-foundation differences.
pub fn cross_distance(a: &FoundationScores, b: &FoundationScores) -> f64 {
    a.0.iter().zip(b.0.iter()).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanReferenceGroup {
    pub origin: String,
    pub ideology: String,
    pub scores: FoundationScores,
    pub source: String,
}

impl HumanReferenceGroup {
    pub fn label(&self) -> String {
        format!("{} {}", self.origin, self.ideology)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceRecord {
    origin: String,
    ideology: String,
    harm: f64,
    fairness: f64,
    loyalty: f64,
    authority: f64,
    purity: f64,
    source: String,
}

#[derive(Debug, Deserialize)]
struct ReferenceFile {
    #[serde(rename = "group", default)]
    groups: Vec<ReferenceRecord>,
}

/// Parses a human reference file (`[[group]]` records) and checks labels
/// are unique and scores lie in `[0, aggregation.max_score()]`.
pub fn load_references(source: &str, aggregation: Aggregation) -> Result<Vec<HumanReferenceGroup>, AnalysisError> {
    let file: ReferenceFile =
        toml::from_str(source).map_err(|e| AnalysisError::References(e.to_string()))?;
    let mut problems = Vec::new();
    let mut labels = BTreeSet::new();
    let max = aggregation.max_score();
    let groups: Vec<HumanReferenceGroup> = file
        .groups
        .into_iter()
        .map(|r| HumanReferenceGroup {
            origin: r.origin,
            ideology: r.ideology,
            scores: FoundationScores([r.harm, r.fairness, r.loyalty, r.authority, r.purity]),
            source: r.source,
        })
        .collect();
    if groups.is_empty() {
        problems.push("no [[group]] records".to_string());
    }
    for g in &groups {
        if !labels.insert((g.origin.clone(), g.ideology.clone())) {
            problems.push(format!("duplicate group `{}`", g.label()));
        }
        for (f, v) in g.scores.iter() {
            if !(0.0..=max).contains(&v) {
                problems.push(format!("`{}` {f} score {v} outside [0, {max}]", g.label()));
            }
        }
    }
    if problems.is_empty() {
        Ok(groups)
    } else {
        Err(AnalysisError::References(problems.join("; ")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAlignmentMatrix {
    pub rows: Vec<Cell>,
    pub columns: Vec<String>,
    /// `entries[row][column]`
    pub entries: Vec<Vec<f64>>,
    /// Index of the closest group per row; ties go to the earlier column.
    pub closest: Vec<usize>,
}

impl CrossAlignmentMatrix {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.columns.is_empty()
    }

    pub fn get(&self, cell: &Cell, column: &str) -> Option<f64> {
        let r = self.rows.iter().position(|c| c == cell)?;
        let c = self.columns.iter().position(|c| c == column)?;
        Some(self.entries[r][c])
    }
}

pub fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
        .0
}

pub fn cross_matrix(
    populations: &[Population],
    references: &[HumanReferenceGroup],
    questionnaire: &Questionnaire,
    options: &AnalysisOptions,
) -> Result<CrossAlignmentMatrix, AnalysisError> {
    if references.is_empty() {
        return Err(AnalysisError::References("no reference groups".into()));
    }
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let mut closest = Vec::new();
    for pop in populations {
        let scores = population_foundation_scores(pop, questionnaire, options)?;
        let row: Vec<f64> = references
            .iter()
            .map(|g| cross_distance(&scores, &g.scores))
            .collect();
        closest.push(argmin(&row));
        rows.push(pop.cell.clone());
        entries.push(row);
    }
    Ok(CrossAlignmentMatrix {
        rows,
        columns: references.iter().map(HumanReferenceGroup::label).collect(),
        entries,
        closest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Completeness;

    fn sample(q: &Questionnaire, f: impl Fn(&str) -> u8) -> SurveySample {
        SurveySample {
            cell: Cell::new("m", "p"),
            sample_index: 0,
            answers: q.items().iter().map(|i| (i.id.clone(), f(&i.id))).collect(),
            completeness: Completeness::Complete,
        }
    }

    #[test]
    fn constant_samples() {
        let q = Questionnaire::bundled();
        let all5 = sample_foundation_scores(&sample(&q, |_| 5), &q, Aggregation::Mean).unwrap();
        assert_eq!(all5, FoundationScores([5.0; 5]));
        let all0 = sample_foundation_scores(&sample(&q, |_| 0), &q, Aggregation::Mean).unwrap();
        assert_eq!(all0, FoundationScores([0.0; 5]));
        let sum = sample_foundation_scores(&sample(&q, |_| 5), &q, Aggregation::Sum).unwrap();
        assert_eq!(sum, FoundationScores([30.0; 5]));
    }

    #[test]
    fn harm_items_mean() {
        let q = Questionnaire::bundled();
        let harm: Vec<String> = q.items_of(Foundation::Harm).map(|i| i.id.clone()).collect();
        assert_eq!(harm.len(), 6);
        let s = sample(&q, |id| match harm.iter().position(|h| h == id) {
            Some(i) if i < 3 => 5,
            Some(_) => 4,
            None => 0,
        });
        let scores = sample_foundation_scores(&s, &q, Aggregation::Mean).unwrap();
        assert_eq!(scores, FoundationScores([4.5, 0.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn catch_items_do_not_count() {
        let q = Questionnaire::bundled();
        let s = sample(&q, |id| if id.ends_with("#5") { 5 } else { 1 });
        assert_eq!(
            sample_foundation_scores(&s, &q, Aggregation::Mean).unwrap(),
            FoundationScores([1.0; 5])
        );
    }

    #[test]
    fn population_mean_of_means() {
        let q = Questionnaire::bundled();
        let harm: BTreeSet<String> = q.items_of(Foundation::Harm).map(|i| i.id.clone()).collect();
        let mut a = sample(&q, |id| if harm.contains(id) { 4 } else { 0 });
        let mut b = sample(&q, |id| if harm.contains(id) { 5 } else { 0 });
        a.sample_index = 0;
        b.sample_index = 1;
        let pop = Population {
            cell: a.cell.clone(),
            samples: vec![a.clone(), b],
        };
        let opts = AnalysisOptions::unfiltered();
        let scores = population_foundation_scores(&pop, &q, &opts).unwrap();
        assert_eq!(scores.get(Foundation::Harm), 4.5);
        let single = Population {
            cell: a.cell.clone(),
            samples: vec![a.clone()],
        };
        assert_eq!(
            population_foundation_scores(&single, &q, &opts).unwrap(),
            sample_foundation_scores(&a, &q, Aggregation::Mean).unwrap()
        );
    }

    #[test]
    fn distance_examples() {
        let a = FoundationScores([1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = FoundationScores([2.0; 5]);
        assert_eq!(cross_distance(&a, &b), 7.0);
        assert_eq!(cross_distance(&a, &a), 0.0);
        assert_eq!(cross_distance(&FoundationScores([0.0; 5]), &FoundationScores([5.0; 5])), 25.0);
    }

    const REFS: &str = r#"
[[group]]
origin = "Test"
ideology = "liberal"
harm = 3.0
fairness = 3.0
loyalty = 1.0
authority = 1.0
purity = 1.0
source = "synthetic"

[[group]]
origin = "Test"
ideology = "conservative"
harm = 2.0
fairness = 2.0
loyalty = 3.0
authority = 3.0
purity = 3.0
source = "synthetic"
"#;

    #[test]
    fn references_parse_and_validate() {
        let refs = load_references(REFS, Aggregation::Mean).unwrap();
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[0].label(), "Test liberal");
        let dup = REFS.replace("conservative", "liberal");
        assert!(load_references(&dup, Aggregation::Mean).unwrap_err().to_string().contains("duplicate"));
        let out = REFS.replace("harm = 3.0", "harm = 7.0");
        assert!(load_references(&out, Aggregation::Mean).is_err());
        assert!(load_references(&out, Aggregation::Sum).is_ok());
    }

    #[test]
    fn matrix_closest_group() {
        let q = Questionnaire::bundled();
        let refs = load_references(REFS, Aggregation::Mean).unwrap();
        // population answering exactly the liberal reference profile
        let s = sample(&q, |id| {
            let item = q.item(id).unwrap();
            match item.foundation.foundation() {
                Some(Foundation::Harm | Foundation::Fairness) => 3,
                Some(_) => 1,
                None => 0,
            }
        });
        let pop = Population {
            cell: s.cell.clone(),
            samples: vec![s],
        };
        let m = cross_matrix(&[pop], &refs, &q, &AnalysisOptions::unfiltered()).unwrap();
        assert_eq!(m.entries[0][0], 0.0);
        assert_eq!(m.closest, vec![0]);
        assert_eq!(m.entries[0][1], 1.0 + 1.0 + 2.0 + 2.0 + 2.0);
        assert!(cross_matrix(&[], &[], &q, &AnalysisOptions::unfiltered()).is_err());
    }
}

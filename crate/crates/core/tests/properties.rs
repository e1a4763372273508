use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use mfsurvey::analysis::{
    argmin, catch_validity, cross_distance, sample_foundation_scores, variance, Aggregation, CatchPolicy,
    Estimator, FoundationScores,
};
use mfsurvey::parse::{parse_likert, ParseFailure, Strategy as Found};
use mfsurvey::persona::{render_question_prompt, Persona, PromptRenderer};
use mfsurvey::questionnaire::{Part, Questionnaire};
use mfsurvey::runner::{Cell, Completeness, SurveySample};

fn sample_with(q: &Questionnaire, scores: &[u8]) -> SurveySample {
    let answers: BTreeMap<String, u8> = q.items().iter().zip(scores).map(|(i, s)| (i.id.clone(), *s)).collect();
    SurveySample {
        cell: Cell::new("m", "none"),
        sample_index: 0,
        answers,
        completeness: Completeness::Complete,
    }
}

fn scores5() -> impl Strategy<Value = [f64; 5]> {
    prop::array::uniform5(0.0f64..=5.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn parser_is_total(raw in ".*") {
        let q = Questionnaire::bundled();
        for part in [Part::Relevance, Part::Agreement] {
            match parse_likert(&raw, q.scale(part)) {
                Ok(p) => {
                    prop_assert!(p.score <= 5);
                    prop_assert!(raw.contains(&p.matched_span));
                }
                Err(ParseFailure::Unparseable { raw: r }) => prop_assert_eq!(&r, &raw),
                Err(ParseFailure::Ambiguous { candidates }) => prop_assert!(candidates.len() >= 2),
            }
        }
    }

    #[test]
    fn parser_total_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let raw = String::from_utf8_lossy(&bytes);
        let q = Questionnaire::bundled();
        let _ = parse_likert(&raw, q.scale(Part::Agreement));
    }

    #[test]
    fn bracket_digit_wins_over_surrounding_text(
        d in 0u8..=5,
        before in "[a-z ,.]{0,30}",
        label_idx in 0usize..6,
        bare in 0u8..=5,
    ) {
        let q = Questionnaire::bundled();
        let scale = q.scale(Part::Agreement);
        let label = &scale.labels[label_idx];
        let raw = format!("{before} {label} {bare} [{d}] {label}");
        let p = parse_likert(&raw, scale).unwrap();
        prop_assert_eq!(p.score, d);
        prop_assert_eq!(p.strategy, Found::BracketDigit);
    }

    #[test]
    fn distance_axioms(a in scores5(), b in scores5(), c in scores5()) {
        let (a, b, c) = (FoundationScores(a), FoundationScores(b), FoundationScores(c));
        prop_assert_eq!(cross_distance(&a, &a), 0.0);
        prop_assert_eq!(cross_distance(&a, &b), cross_distance(&b, &a));
        prop_assert!(cross_distance(&a, &c) <= cross_distance(&a, &b) + cross_distance(&b, &c) + 1e-12);
        let d = cross_distance(&a, &b);
        prop_assert!((0.0..=25.0).contains(&d));
    }

    #[test]
    fn argmin_ignores_uniform_shift(values in prop::collection::vec(0.0f64..25.0, 1..8), shift in -3.0f64..3.0) {
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let i = argmin(&values);
        prop_assert!(values.iter().all(|v| *v >= values[i]));
        let j = argmin(&shifted);
        prop_assert!((shifted[j] - shifted[i]).abs() < 1e-9);
    }

    #[test]
    fn variance_is_shift_invariant(values in prop::collection::vec(0u8..=5, 2..60), k in 0u8..=5) {
        let xs: Vec<f64> = values.iter().map(|v| f64::from(*v)).collect();
        let ys: Vec<f64> = xs.iter().map(|v| v + f64::from(k)).collect();
        for est in [Estimator::Population, Estimator::Sample] {
            let a = variance(&xs, est).unwrap();
            let b = variance(&ys, est).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn sum_aggregation_is_six_times_mean(scores in prop::collection::vec(0u8..=5, 32)) {
        let q = Questionnaire::bundled();
        let s = sample_with(&q, &scores);
        let mean = sample_foundation_scores(&s, &q, Aggregation::Mean).unwrap();
        let sum = sample_foundation_scores(&s, &q, Aggregation::Sum).unwrap();
        for ((_, m), (_, t)) in mean.iter().zip(sum.iter()) {
            prop_assert!((m * 6.0 - t).abs() < 1e-9);
            prop_assert!((0.0..=5.0).contains(&m));
        }
    }

    #[test]
    fn stricter_policy_never_validates_more(
        scores in prop::collection::vec(0u8..=5, 32),
        rel in 0u8..=5,
        agr in 0u8..=5,
    ) {
        let q = Questionnaire::bundled();
        let s = sample_with(&q, &scores);
        let lax = CatchPolicy { relevance_max: rel, agreement_min: agr };
        let strict = CatchPolicy { relevance_max: rel.saturating_sub(1), agreement_min: (agr + 1).min(5) };
        let lax_ok = catch_validity(&s, &q, &lax).unwrap().is_valid();
        let strict_ok = catch_validity(&s, &q, &strict).unwrap().is_valid();
        prop_assert!(!strict_ok || lax_ok);
    }
}

#[test]
fn every_prompt_is_distinct() {
    let q = Questionnaire::bundled();
    let renderer = PromptRenderer::default();
    let mut seen = BTreeSet::new();
    for persona in Persona::standard_set() {
        for pair in renderer.render_survey(&persona, &q) {
            assert!(seen.insert((pair.system_text, pair.user_text)));
        }
    }
    assert_eq!(seen.len(), 4 * 32);
    let users: BTreeSet<String> = q
        .items()
        .iter()
        .map(|i| render_question_prompt(i, q.scale(i.part)).unwrap())
        .collect();
    assert_eq!(users.len(), 32);
}

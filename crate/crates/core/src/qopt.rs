//! Question-subset search over a fixed table of Dev-set answers.
//!
//! All strategies rank trials by objective value and break ties toward the
//! lexicographically smallest (ascending) subset, so every search is
//! deterministic.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::eval::{scores, ConfusionMatrix};
use crate::pipeline::{AnswerEntry, AnswerVector, Engine, PipelineError, Verdict};
use crate::questions::{QuestionError, QuestionSet, BANK_SIZE};

pub const MAX_EXHAUSTIVE: usize = 20;

#[derive(Debug, Error)]
pub enum QoptError {
    #[error("location `{location}` has no answer for question {question}")]
    MissingAnswer { location: String, question: u8 },
    #[error("subset is empty")]
    EmptySubset,
    #[error("{0} candidate questions exceed the exhaustive limit of {MAX_EXHAUSTIVE}")]
    TooManyQuestions(usize),
    #[error("no labeled locations to score")]
    NoLabeledLocations,
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("location `{0}` appears twice in the answer table")]
    DuplicateLocation(String),
    #[error(transparent)]
    Question(#[from] QuestionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MacroF1,
    F1Gully,
    Accuracy,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::MacroF1 => "macro_f1",
            Objective::F1Gully => "f1_gully",
            Objective::Accuracy => "accuracy",
        }
    }

    pub fn evaluate(self, cm: &ConfusionMatrix) -> f64 {
        let s = scores(cm);
        match self {
            Objective::MacroF1 => s.macro_f1,
            Objective::F1Gully => s.f1_gully,
            Objective::Accuracy => s.accuracy,
        }
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "macro_f1" => Ok(Objective::MacroF1),
            "f1_gully" => Ok(Objective::F1Gully),
            "accuracy" => Ok(Objective::Accuracy),
            other => Err(format!("unknown objective `{other}` (macro_f1, f1_gully, accuracy)")),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Exhaustive,
    GreedyForward,
    RandomSearch,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "exhaustive" => Ok(Strategy::Exhaustive),
            "greedy" | "greedy_forward" => Ok(Strategy::GreedyForward),
            "random" | "random_search" => Ok(Strategy::RandomSearch),
            other => Err(format!("unknown strategy `{other}` (exhaustive, greedy, random)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub subset: QuestionSet,
    pub objective_name: String,
    pub objective_value: f64,
    pub strategy: Strategy,
    pub seed: Option<u64>,
}

/// `Greater` when `a` should be preferred over `b`.
fn prefer(a_value: f64, a_subset: &[u8], b_value: f64, b_subset: &[u8]) -> Ordering {
    a_value
        .partial_cmp(&b_value)
        .unwrap_or(Ordering::Equal)
        .then_with(|| b_subset.cmp(a_subset))
}

impl Trial {
    /// Whether this trial beats `other` under (value desc, subset asc).
    pub fn beats(&self, other: &Trial) -> bool {
        prefer(
            self.objective_value,
            &self.subset.indices,
            other.objective_value,
            &other.subset.indices,
        ) == Ordering::Greater
    }
}

/// Best trial under the deterministic ordering. Order-independent.
pub fn best_of<'a>(trials: impl IntoIterator<Item = &'a Trial>) -> Option<&'a Trial> {
    trials.into_iter().fold(None, |best, t| match best {
        Some(b) if !t.beats(b) => Some(b),
        _ => Some(t),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub location_id: String,
    pub label: Label,
    pub verdicts: BTreeMap<u8, Verdict>,
    yes_mask: u32,
    present_mask: u32,
}

impl Row {
    pub fn new(location_id: impl Into<String>, label: Label, verdicts: BTreeMap<u8, Verdict>) -> Self {
        let mut yes_mask = 0;
        let mut present_mask = 0;
        for (&q, &v) in &verdicts {
            if q <= BANK_SIZE {
                present_mask |= 1 << q;
                if v == Verdict::Yes {
                    yes_mask |= 1 << q;
                }
            }
        }
        Self {
            location_id: location_id.into(),
            label,
            verdicts,
            yes_mask,
            present_mask,
        }
    }

    fn restricted(&self, subset: &[u8]) -> Result<Vec<Verdict>, QoptError> {
        subset
            .iter()
            .map(|q| {
                self.verdicts.get(q).copied().ok_or_else(|| QoptError::MissingAnswer {
                    location: self.location_id.clone(),
                    question: *q,
                })
            })
            .collect()
    }
}

/// Labeled answers keyed by location id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerTable {
    rows: BTreeMap<String, Row>,
}

impl AnswerTable {
    pub fn new(rows: impl IntoIterator<Item = Row>) -> Result<Self, QoptError> {
        let mut table = Self::default();
        for row in rows {
            let id = row.location_id.clone();
            if table.rows.insert(id.clone(), row).is_some() {
                return Err(QoptError::DuplicateLocation(id));
            }
        }
        Ok(table)
    }

    /// Labeled entries only; unlabeled ones are dropped.
    pub fn from_entries(entries: &[AnswerEntry]) -> Result<Self, QoptError> {
        Self::new(entries.iter().filter_map(|e| {
            let label = e.label?;
            let verdicts = e
                .answers
                .question_indices
                .iter()
                .copied()
                .zip(e.answers.verdicts.iter().copied())
                .collect();
            Some(Row::new(e.answers.location_id.clone(), label, verdicts))
        }))
    }

    pub fn rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Questions answered by every location, ascending.
    pub fn common_questions(&self) -> Vec<u8> {
        let mut rows = self.rows.values();
        let Some(first) = rows.next() else { return Vec::new() };
        let mut qs: Vec<u8> = first.verdicts.keys().copied().collect();
        for r in rows {
            qs.retain(|q| r.verdicts.contains_key(q));
        }
        qs
    }
}

/// Turns one location's answers on a subset into a label.
pub trait SubsetAggregator {
    fn name(&self) -> String;

    fn label(&self, row: &Row, subset: &[u8]) -> Result<Label, QoptError>;
}

/// Positive iff strictly more than half of the subset's answers are Yes.
#[derive(Debug, Clone, Copy, Default)]
pub struct MajorityVote;

impl SubsetAggregator for MajorityVote {
    fn name(&self) -> String {
        "majority".into()
    }

    fn label(&self, row: &Row, subset: &[u8]) -> Result<Label, QoptError> {
        let mut mask = 0u32;
        for &q in subset {
            if q > BANK_SIZE || row.present_mask & (1 << q) == 0 {
                return Err(QoptError::MissingAnswer {
                    location: row.location_id.clone(),
                    question: q,
                });
            }
            mask |= 1 << q;
        }
        let yes = (row.yes_mask & mask).count_ones();
        Ok(Label::from_bool(2 * yes > mask.count_ones()))
    }
}

/// Aggregation through the engine's LLM; relies on the response cache for
/// repeatability.
pub struct LlmAggregator<'a> {
    pub engine: &'a Engine,
}

impl SubsetAggregator for LlmAggregator<'_> {
    fn name(&self) -> String {
        match &self.engine.llm {
            Some(m) => format!("llm:{}", m.model_id),
            None => "llm:<none>".into(),
        }
    }

    fn label(&self, row: &Row, subset: &[u8]) -> Result<Label, QoptError> {
        let verdicts = row.restricted(subset)?;
        let qs = QuestionSet::new("subset", subset.to_vec())?;
        let av = AnswerVector {
            location_id: row.location_id.clone(),
            question_indices: subset.to_vec(),
            raw_texts: vec![String::new(); verdicts.len()],
            verdicts,
        };
        Ok(self.engine.aggregate_llm(&av, &qs)?.label)
    }
}

/// Objective value of `subset` over every labeled location.
pub fn score_subset(
    subset: &[u8],
    table: &AnswerTable,
    aggregator: &dyn SubsetAggregator,
    objective: Objective,
) -> Result<f64, QoptError> {
    if subset.is_empty() {
        return Err(QoptError::EmptySubset);
    }
    if table.is_empty() {
        return Err(QoptError::NoLabeledLocations);
    }
    let mut cm = ConfusionMatrix::default();
    for row in table.rows() {
        cm.record(row.label, aggregator.label(row, subset)?);
    }
    Ok(objective.evaluate(&cm))
}

fn normalize(candidates: &[u8]) -> Vec<u8> {
    let mut c = candidates.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

fn make_trial(
    name: &str,
    subset: Vec<u8>,
    value: f64,
    objective: Objective,
    strategy: Strategy,
    seed: Option<u64>,
) -> Result<Trial, QoptError> {
    Ok(Trial {
        subset: QuestionSet::new(name, subset)?,
        objective_name: objective.name().into(),
        objective_value: value,
        strategy,
        seed,
    })
}

/// Every non-empty subset of `candidates` with at most `max_k` members.
pub fn exhaustive(
    table: &AnswerTable,
    candidates: &[u8],
    max_k: usize,
    objective: Objective,
    aggregator: &dyn SubsetAggregator,
) -> Result<Trial, QoptError> {
    let cands = normalize(candidates);
    if cands.len() > MAX_EXHAUSTIVE {
        return Err(QoptError::TooManyQuestions(cands.len()));
    }
    if cands.is_empty() || max_k == 0 {
        return Err(QoptError::EmptySubset);
    }
    let mut best: Option<(f64, Vec<u8>)> = None;
    for mask in 1u32..(1u32 << cands.len()) {
        if mask.count_ones() as usize > max_k {
            continue;
        }
        let subset: Vec<u8> = cands
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &q)| q)
            .collect();
        let value = score_subset(&subset, table, aggregator, objective)?;
        let better = match &best {
            None => true,
            Some((bv, bs)) => prefer(value, &subset, *bv, bs) == Ordering::Greater,
        };
        if better {
            best = Some((value, subset));
        }
    }
    let (value, subset) = best.expect("at least one subset");
    make_trial("exhaustive", subset, value, objective, Strategy::Exhaustive, None)
}

/// Forward selection: add the question with the best resulting objective
/// (lowest index on ties); stop at `max_k`, when candidates run out, or when
/// no addition improves the objective. Returns one trial per accepted step.
pub fn greedy_forward(
    table: &AnswerTable,
    candidates: &[u8],
    max_k: usize,
    objective: Objective,
    aggregator: &dyn SubsetAggregator,
) -> Result<Vec<Trial>, QoptError> {
    let mut remaining = normalize(candidates);
    if remaining.is_empty() || max_k == 0 {
        return Err(QoptError::EmptySubset);
    }
    let mut chosen: Vec<u8> = Vec::new();
    let mut current = f64::NEG_INFINITY;
    let mut steps = Vec::new();
    while chosen.len() < max_k && !remaining.is_empty() {
        let mut step_best: Option<(f64, usize)> = None;
        for (pos, &q) in remaining.iter().enumerate() {
            let mut subset = chosen.clone();
            subset.push(q);
            subset.sort_unstable();
            let value = score_subset(&subset, table, aggregator, objective)?;
            if step_best.is_none_or(|(bv, _)| value > bv) {
                step_best = Some((value, pos));
            }
        }
        let (value, pos) = step_best.expect("remaining is non-empty");
        if !chosen.is_empty() && value <= current {
            break;
        }
        chosen.push(remaining.remove(pos));
        current = value;
        let mut subset = chosen.clone();
        subset.sort_unstable();
        steps.push(make_trial(
            &format!("greedy-{}", chosen.len()),
            subset,
            value,
            objective,
            Strategy::GreedyForward,
            None,
        )?);
    }
    Ok(steps)
}

/// `budget` subsets drawn by independent fair-coin inclusion of each
/// candidate (empty draws are redrawn). Returns the best trial and all trials.
pub fn random_search(
    table: &AnswerTable,
    candidates: &[u8],
    budget: usize,
    seed: u64,
    objective: Objective,
    aggregator: &dyn SubsetAggregator,
) -> Result<(Trial, Vec<Trial>), QoptError> {
    let cands = normalize(candidates);
    if budget == 0 {
        return Err(QoptError::ZeroBudget);
    }
    if cands.is_empty() {
        return Err(QoptError::EmptySubset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(budget);
    for t in 0..budget {
        let subset = loop {
            let s: Vec<u8> = cands.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            if !s.is_empty() {
                break s;
            }
        };
        let value = score_subset(&subset, table, aggregator, objective)?;
        trials.push(make_trial(
            &format!("random-{t}"),
            subset,
            value,
            objective,
            Strategy::RandomSearch,
            Some(seed),
        )?);
    }
    let best = best_of(&trials).expect("budget >= 1").clone();
    Ok((best, trials))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, positive: bool, yes: &[u8], all: &[u8]) -> Row {
        let verdicts = all
            .iter()
            .map(|&q| (q, if yes.contains(&q) { Verdict::Yes } else { Verdict::No }))
            .collect();
        Row::new(id, Label::from_bool(positive), verdicts)
    }

    #[test]
    fn perfect_answers_score_one() {
        let all: Vec<u8> = (1..=19).collect();
        let table = AnswerTable::new((0..10).map(|i| {
            let pos = i % 2 == 0;
            row(&format!("l{i}"), pos, if pos { &all } else { &[] }, &all)
        }))
        .unwrap();
        assert_eq!(score_subset(&all, &table, &MajorityVote, Objective::MacroF1).unwrap(), 1.0);
    }

    #[test]
    fn empty_subset_and_missing_answer() {
        let table = AnswerTable::new([row("a", true, &[1], &[1, 2])]).unwrap();
        assert!(matches!(
            score_subset(&[], &table, &MajorityVote, Objective::MacroF1),
            Err(QoptError::EmptySubset)
        ));
        assert!(matches!(
            score_subset(&[3], &table, &MajorityVote, Objective::MacroF1),
            Err(QoptError::MissingAnswer { question: 3, .. })
        ));
    }

    #[test]
    fn all_tie_picks_lowest_singleton() {
        // Every answer Yes: every subset predicts all-positive, so all scores tie.
        let qs = [2u8, 5, 9];
        let table = AnswerTable::new([row("a", true, &qs, &qs), row("b", false, &qs, &qs)]).unwrap();
        let best = exhaustive(&table, &qs, 3, Objective::MacroF1, &MajorityVote).unwrap();
        assert_eq!(best.subset.indices, vec![2]);
        let greedy = greedy_forward(&table, &qs, 3, Objective::MacroF1, &MajorityVote).unwrap();
        assert_eq!(greedy.len(), 1);
        assert_eq!(greedy[0].subset.indices, vec![2]);
    }

    #[test]
    fn limits() {
        let qs: Vec<u8> = (1..=19).collect();
        let table = AnswerTable::new([row("a", true, &[], &qs)]).unwrap();
        assert!(matches!(
            random_search(&table, &qs, 0, 1, Objective::MacroF1, &MajorityVote),
            Err(QoptError::ZeroBudget)
        ));
        assert!(matches!(
            exhaustive(&table, &qs, 0, Objective::MacroF1, &MajorityVote),
            Err(QoptError::EmptySubset)
        ));
    }

    #[test]
    fn greedy_stops_at_candidate_count() {
        let qs = [1u8, 2];
        // q1 perfect, q2 anti-correlated: adding q2 never helps, so only one step.
        let table = AnswerTable::new([row("a", true, &[1], &qs), row("b", false, &[2], &qs)]).unwrap();
        let steps = greedy_forward(&table, &qs, 10, Objective::Accuracy, &MajorityVote).unwrap();
        assert_eq!(steps.last().unwrap().subset.indices, vec![1]);
        assert!(steps.len() <= 2);
    }

    #[test]
    fn best_of_is_order_independent() {
        let t = |v: f64, s: Vec<u8>| Trial {
            subset: QuestionSet::new("t", s).unwrap(),
            objective_name: "macro_f1".into(),
            objective_value: v,
            strategy: Strategy::RandomSearch,
            seed: None,
        };
        let trials = vec![t(0.5, vec![3]), t(0.7, vec![4, 5]), t(0.7, vec![2, 9]), t(0.1, vec![1])];
        let mut rev = trials.clone();
        rev.reverse();
        assert_eq!(best_of(&trials).unwrap().subset.indices, vec![2, 9]);
        assert_eq!(best_of(&rev).unwrap(), best_of(&trials).unwrap());
    }

    #[test]
    fn duplicate_rows_rejected() {
        assert!(matches!(
            AnswerTable::new([row("a", true, &[], &[1]), row("a", false, &[], &[1])]),
            Err(QoptError::DuplicateLocation(_))
        ));
    }
}

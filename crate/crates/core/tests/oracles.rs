//! Hand-computed and brute-force reference values.

mod common;

use std::collections::BTreeMap;

use gully_core::backend::{ClassRates, MockReply, MockScript, RuleMatch};
use gully_core::dataset::{Label, Location, Split};
use gully_core::eval::{self, ConfusionMatrix, Format, MetricsReport, YesHistogram};
use gully_core::mlp::{self, Hyper};
use gully_core::pipeline::{AnswerEntry, AnswerVector, PipelineKind, UnparseablePolicy, Verdict};
use gully_core::qopt::{self, AnswerTable, MajorityVote, Objective, Row};
use gully_core::questions::QuestionSet;

use common::{labeled_script, mock_rig, small_layout, synth_dataset};

fn test_locations(ds: &gully_core::dataset::Dataset) -> Vec<&Location> {
    ds.split(Split::Test).collect()
}

/// Answer every location on `qs` with the rig and pair each vector with its label.
fn answer_all(rig: &common::MockRig, ds: &gully_core::dataset::Dataset, qs: &QuestionSet) -> Vec<AnswerEntry> {
    test_locations(ds)
        .into_iter()
        .map(|loc| {
            let p = rig.engine.prepare(loc).unwrap();
            AnswerEntry {
                answers: rig.engine.run_vqa(&p, qs).unwrap(),
                label: loc.label,
            }
        })
        .collect()
}

#[test]
fn linear_fixture_is_learned() {
    // Target is x0 > 0.5; the other inputs are distractors.
    let xs: Vec<Vec<f64>> = (0..40)
        .map(|i| vec![f64::from(i % 2), f64::from((i / 2) % 2), f64::from((i / 4) % 2)])
        .collect();
    let ys: Vec<u8> = xs.iter().map(|x| x[0] as u8).collect();
    let hp = Hyper { hidden: 4, lr: 0.5, epochs: 2000, seed: 3 };
    let model = mlp::train(&xs, &ys, &hp).unwrap();
    assert_eq!(mlp::accuracy(&model, &xs, &ys), 1.0);
}

#[test]
fn and_fixture_scores_order_correctly() {
    let xs = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
    let ys = [0u8, 0, 0, 1];
    let hp = Hyper { hidden: 4, lr: 0.5, epochs: 4000, seed: 17 };
    let model = mlp::train(&xs, &ys, &hp).unwrap();
    let s: Vec<f64> = xs.iter().map(|x| model.score(x)).collect();
    assert!(s[3] > 0.5);
    assert!(s[..3].iter().all(|&v| v < 0.5 && v < s[3]), "{s:?}");
}

#[test]
fn small_step_loss_never_rises() {
    let xs: Vec<Vec<f64>> = (0..16).map(|i| (0..4).map(|b| f64::from((i >> b) & 1)).collect()).collect();
    let ys: Vec<u8> = xs.iter().map(|x| u8::from(x[1] + x[2] >= 1.0)).collect();
    let hp = Hyper { hidden: 6, lr: 1e-3, epochs: 300, seed: 9 };
    let (_, history) = mlp::train_with_history(&xs, &ys, &hp).unwrap();
    assert_eq!(history.len(), 301);
    for w in history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
    }
    assert!(history[300] < history[0]);
}

#[test]
fn histogram_matches_nested_recount() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path(), &small_layout(27, 23, 4));
    let rig = mock_rig(&labeled_script(&ds), None, 4);
    let qs = QuestionSet::resolve("q9").unwrap();
    let entries = answer_all(&rig, &ds, &qs);
    assert_eq!(entries.len(), 50);
    let h = eval::yes_histogram(&entries).unwrap();

    for (slot, &q) in qs.indices.iter().enumerate() {
        let (mut pos, mut neg) = (0u64, 0u64);
        for e in &entries {
            for (i, &qi) in e.answers.question_indices.iter().enumerate() {
                if qi == q && e.answers.verdicts[i] == Verdict::Yes {
                    match e.label {
                        Some(Label::GullyPositive) => pos += 1,
                        Some(Label::GullyNegative) => neg += 1,
                        None => {}
                    }
                }
            }
        }
        assert_eq!((h.yes_positive[slot], h.yes_negative[slot]), (pos, neg), "q{q}");
    }
    assert_eq!((h.total_positive, h.total_negative), (27, 23));
}

#[test]
fn noise_question_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path(), &small_layout(60, 60, 17));
    let mut script = labeled_script(&ds);
    script.question_rates.insert(5, ClassRates { positive: 0.5, negative: 0.5 });
    let rig = mock_rig(&script, None, 4);
    let entries = answer_all(&rig, &ds, &QuestionSet::new("noise", vec![5]).unwrap());
    let table = AnswerTable::from_entries(&entries).unwrap();
    let f1 = qopt::score_subset(&[5], &table, &MajorityVote, Objective::MacroF1).unwrap();
    assert!((f1 - 0.5).abs() <= 0.1, "{f1}");
}

#[test]
fn greedy_opens_with_the_perfect_question() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path(), &small_layout(20, 20, 8));
    let mut script = labeled_script(&ds);
    script.question_rates.insert(7, ClassRates { positive: 1.0, negative: 0.0 });
    let rig = mock_rig(&script, None, 4);
    let qs = QuestionSet::new("probe", vec![2, 3, 7, 12]).unwrap();
    let table = AnswerTable::from_entries(&answer_all(&rig, &ds, &qs)).unwrap();
    let steps = qopt::greedy_forward(&table, &qs.indices, 4, Objective::MacroF1, &MajorityVote).unwrap();
    assert_eq!(steps[0].subset.indices, vec![7]);
    assert_eq!(steps[0].objective_value, 1.0);
    // Nothing can improve on a perfect score.
    assert_eq!(steps.len(), 1);
}

#[test]
fn three_candidates_by_hand() {
    use Verdict::{No as N, Yes as Y};
    // q1 agrees with the label on rows 0..3, q2 on rows 0..2, q3 answers Yes everywhere.
    let grid: [(bool, [Verdict; 3]); 4] = [
        (true, [Y, Y, Y]),
        (true, [Y, N, Y]),
        (false, [N, N, Y]),
        (false, [Y, N, Y]),
    ];
    let rows = grid.iter().enumerate().map(|(i, (pos, v))| {
        let verdicts: BTreeMap<u8, Verdict> = (1u8..=3).zip(v.iter().copied()).collect();
        Row::new(format!("r{i}"), Label::from_bool(*pos), verdicts)
    });
    let table = AnswerTable::new(rows).unwrap();

    // Majority (strict) per subset, then accuracy counted by hand:
    // {1}: Y Y N Y -> 3/4   {2}: Y N N N -> 3/4   {3}: all Y -> 2/4
    // {1,2}: Y N N N -> 3/4 {1,3}: Y Y N Y -> 3/4 {2,3}: Y N N N -> 3/4
    // {1,2,3}: Y Y N Y -> 3/4
    let expected = [
        (vec![1u8], 0.75),
        (vec![2], 0.75),
        (vec![3], 0.5),
        (vec![1, 2], 0.75),
        (vec![1, 3], 0.75),
        (vec![2, 3], 0.75),
        (vec![1, 2, 3], 0.75),
    ];
    for (subset, acc) in &expected {
        let got = qopt::score_subset(subset, &table, &MajorityVote, Objective::Accuracy).unwrap();
        assert_eq!(got, *acc, "{subset:?}");
    }
    let best = qopt::exhaustive(&table, &[1, 2, 3], 3, Objective::Accuracy, &MajorityVote).unwrap();
    // Ties at 0.75 go to the lexicographically smallest subset.
    assert_eq!(best.subset.indices, vec![1]);
    assert_eq!(best.objective_value, 0.75);
}

#[test]
fn vqa_calls_once_per_question_then_hits_cache() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(&dir.path().join("ds"), &small_layout(1, 0, 2));
    let script = labeled_script(&ds);
    let cache = dir.path().join("cache");
    let qs = QuestionSet::resolve("q12").unwrap();
    let loc = test_locations(&ds)[0];

    let cold = mock_rig(&script, Some(&cache), 1);
    let a = cold.engine.run_vqa(&cold.engine.prepare(loc).unwrap(), &qs).unwrap();
    assert_eq!(cold.upstream_calls(), 12);

    let warm = mock_rig(&script, Some(&cache), 1);
    let b = warm.engine.run_vqa(&warm.engine.prepare(loc).unwrap(), &qs).unwrap();
    assert_eq!(warm.upstream_calls(), 0);
    assert_eq!(a, b);
}

#[test]
fn batch_output_does_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path(), &small_layout(9, 8, 6));
    let script = labeled_script(&ds);
    let qs = QuestionSet::resolve("q6").unwrap();
    let locs = test_locations(&ds);
    let serial = mock_rig(&script, None, 1).engine.run_batch(&locs, PipelineKind::B, Some(&qs), 1).unwrap();
    let wide = mock_rig(&script, None, 8).engine.run_batch(&locs, PipelineKind::B, Some(&qs), 8).unwrap();
    assert_eq!(serial, wide);
    let ids: Vec<&str> = serial.predictions.iter().map(|p| p.location_id.as_str()).collect();
    let want: Vec<&str> = locs.iter().map(|l| l.id.as_str()).collect();
    assert_eq!(ids, want);
}

#[test]
fn unclear_reply_defaults_to_negative_and_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path(), &small_layout(1, 0, 1));
    let script = MockScript::default().with_rule(
        RuleMatch::default(),
        MockReply::Text { text: "It is unclear.".into() },
    );
    let mut rig = mock_rig(&script, None, 1);
    let loc = rig.engine.prepare(test_locations(&ds)[0]).unwrap();

    let p = rig.engine.run_pipeline_a(&loc).unwrap();
    assert_eq!(p.label, Label::GullyNegative);
    assert!(p.unparseable);
    assert_eq!(p.raw_text, "It is unclear.");

    rig.engine.unparseable = UnparseablePolicy::Error;
    assert!(rig.engine.run_pipeline_a(&loc).is_err());
}

#[test]
fn markdown_row_has_three_decimals() {
    let r = eval::metrics(&ConfusionMatrix::new(167, 79, 10, 55));
    let md = eval::render_metrics(&r, Format::Markdown);
    assert!(md.contains("| 167 | 79 | 10 | 55 | 0.679 | 0.944 | 0.714 | 0.790 | 0.553 | 0.671 |"), "{md}");
}

#[test]
fn empty_histogram_csv_is_header_only() {
    let h = eval::yes_histogram(&[]).unwrap();
    assert_eq!(h, YesHistogram::default());
    assert_eq!(
        eval::render_histogram(&h, Format::Csv),
        "question,yes_gully,yes_not_gully,total_gully,total_not_gully\n"
    );
}

#[test]
fn metrics_json_round_trips() {
    let r = eval::metrics(&ConfusionMatrix::new(12, 3, 4, 21));
    let back: MetricsReport = serde_json::from_str(&eval::render_metrics(&r, Format::Json)).unwrap();
    assert_eq!(back, r);
    // tp=12 fp=3 fn=4 tn=21: precision 12/15, recall 12/16, accuracy 33/40.
    assert_eq!(back.precision, 0.8);
    assert_eq!(back.recall, 0.75);
    assert_eq!(back.accuracy, 33.0 / 40.0);
}

#[test]
fn restrict_keeps_subset_order() {
    let av = AnswerVector {
        location_id: "x".into(),
        question_indices: vec![2, 5, 9],
        verdicts: vec![Verdict::Yes, Verdict::No, Verdict::Unparseable],
        raw_texts: vec!["Yes".into(), "No".into(), "hm".into()],
    };
    let r = av.restrict(&[9, 2]).unwrap();
    assert_eq!(r.question_indices, vec![9, 2]);
    assert_eq!(r.verdicts, vec![Verdict::Unparseable, Verdict::Yes]);
    assert!(av.restrict(&[4]).is_none());
}

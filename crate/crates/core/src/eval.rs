//! Confusion matrices, the six-score metric suite, per-question Yes
//! histograms, and report rendering.
//!
//! Every ratio with a zero denominator is defined as 0, which is what lets
//! degenerate one-class predictors score F1 = 0 for the missing class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Label;
use crate::pipeline::{AnswerEntry, Prediction, Verdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction for unknown location `{0}`")]
    MissingLabel(String),
    #[error("answer vector for `{location}` uses questions {found:?}, expected {expected:?}")]
    InconsistentQuestionSets {
        location: String,
        expected: Vec<u8>,
        found: Vec<u8>,
    },
}

/// Binary confusion matrix; positive class is `GullyPositive`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub const fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same matrix with GullyNegative treated as the positive class.
    pub fn swap_classes(&self) -> Self {
        Self::new(self.tn, self.fn_, self.fp, self.tp)
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::GullyPositive, Label::GullyPositive) => self.tp += 1,
            (Label::GullyNegative, Label::GullyPositive) => self.fp += 1,
            (Label::GullyPositive, Label::GullyNegative) => self.fn_ += 1,
            (Label::GullyNegative, Label::GullyNegative) => self.tn += 1,
        }
    }
}

/// Confusion matrix plus the number of predictions skipped for lack of a label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub cm: ConfusionMatrix,
    pub excluded_unlabeled: u64,
}

/// Tally predictions against labels. Unlabeled locations are counted as exclusions.
pub fn confusion(preds: &[Prediction], labels: &BTreeMap<String, Option<Label>>) -> Result<Tally, EvalError> {
    let mut tally = Tally::default();
    for p in preds {
        match labels.get(&p.location_id) {
            None => return Err(EvalError::MissingLabel(p.location_id.clone())),
            Some(None) => tally.excluded_unlabeled += 1,
            Some(Some(truth)) => tally.cm.record(*truth, p.label),
        }
    }
    Ok(tally)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1_gully: f64,
    pub f1_not_gully: f64,
    pub macro_f1: f64,
}

impl Scores {
    /// In table order: Prec, Rec, Acc, F1(G), F1(NG), Macro F1.
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.precision,
            self.recall,
            self.accuracy,
            self.f1_gully,
            self.f1_not_gully,
            self.macro_f1,
        ]
    }
}

pub fn scores(cm: &ConfusionMatrix) -> Scores {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let npv = ratio(cm.tn, cm.tn + cm.fn_);
    let specificity = ratio(cm.tn, cm.tn + cm.fp);
    let f1_gully = harmonic(precision, recall);
    let f1_not_gully = harmonic(npv, specificity);
    Scores {
        precision,
        recall,
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        f1_gully,
        f1_not_gully,
        macro_f1: (f1_gully + f1_not_gully) / 2.0,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    #[serde(default)]
    pub pipeline: Option<String>,
    #[serde(default)]
    pub vlm: Option<String>,
    #[serde(default)]
    pub llm: Option<String>,
    #[serde(default)]
    pub questions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1_gully: f64,
    pub f1_not_gully: f64,
    pub macro_f1: f64,
    pub cm: ConfusionMatrix,
    #[serde(default)]
    pub excluded_unlabeled: u64,
    #[serde(default)]
    pub meta: RunMeta,
}

impl MetricsReport {
    pub fn scores(&self) -> Scores {
        Scores {
            precision: self.precision,
            recall: self.recall,
            accuracy: self.accuracy,
            f1_gully: self.f1_gully,
            f1_not_gully: self.f1_not_gully,
            macro_f1: self.macro_f1,
        }
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let s = scores(cm);
    MetricsReport {
        precision: s.precision,
        recall: s.recall,
        accuracy: s.accuracy,
        f1_gully: s.f1_gully,
        f1_not_gully: s.f1_not_gully,
        macro_f1: s.macro_f1,
        cm: *cm,
        excluded_unlabeled: 0,
        meta: RunMeta::default(),
    }
}

/// Per-question counts of Yes answers, split by true class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct YesHistogram {
    pub question_indices: Vec<u8>,
    pub yes_positive: Vec<u64>,
    pub yes_negative: Vec<u64>,
    pub total_positive: u64,
    pub total_negative: u64,
}

/// Count Yes verdicts per question and class. Unlabeled entries are skipped;
/// Unparseable never counts as Yes.
pub fn yes_histogram(entries: &[AnswerEntry]) -> Result<YesHistogram, EvalError> {
    let Some(first) = entries.first() else {
        return Ok(YesHistogram::default());
    };
    let qs = first.answers.question_indices.clone();
    let mut h = YesHistogram {
        yes_positive: vec![0; qs.len()],
        yes_negative: vec![0; qs.len()],
        question_indices: qs,
        ..YesHistogram::default()
    };
    for e in entries {
        if e.answers.question_indices != h.question_indices || !e.answers.is_consistent() {
            return Err(EvalError::InconsistentQuestionSets {
                location: e.answers.location_id.clone(),
                expected: h.question_indices.clone(),
                found: e.answers.question_indices.clone(),
            });
        }
        let (counts, total) = match e.label {
            Some(Label::GullyPositive) => (&mut h.yes_positive, &mut h.total_positive),
            Some(Label::GullyNegative) => (&mut h.yes_negative, &mut h.total_negative),
            None => continue,
        };
        *total += 1;
        for (c, v) in counts.iter_mut().zip(&e.answers.verdicts) {
            if *v == Verdict::Yes {
                *c += 1;
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Markdown,
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

impl Format {
    /// Guess from a file extension; Markdown otherwise.
    pub fn from_path(path: &std::path::Path) -> Self {
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
            .unwrap_or(Format::Markdown)
    }
}

const METRIC_HEADER: [&str; 10] = ["TP", "FP", "FN", "TN", "Prec.", "Rec.", "Acc.", "F1 (G)", "F1 (NG)", "Macro F1"];

/// The six scores at table precision, joined by ` | `.
pub fn markdown_scores(s: &Scores) -> String {
    s.as_array().iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" | ")
}

pub fn render_metrics(r: &MetricsReport, format: Format) -> String {
    let cm = r.cm;
    match format {
        Format::Markdown | Format::Svg => {
            let mut out = String::new();
            let meta = &r.meta;
            let describe = |k: &str, v: &Option<String>| v.as_ref().map(|v| format!("- {k}: {v}\n"));
            for line in [
                describe("pipeline", &meta.pipeline),
                describe("vlm", &meta.vlm),
                describe("llm", &meta.llm),
                describe("questions", &meta.questions),
            ]
            .into_iter()
            .flatten()
            {
                out.push_str(&line);
            }
            if r.excluded_unlabeled > 0 {
                let _ = writeln!(out, "- excluded unlabeled: {}", r.excluded_unlabeled);
            }
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "| {} |", METRIC_HEADER.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(METRIC_HEADER.len()));
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                cm.tp,
                cm.fp,
                cm.fn_,
                cm.tn,
                markdown_scores(&r.scores())
            );
            out
        }
        Format::Csv => {
            let header = "tp,fp,fn,tn,precision,recall,accuracy,f1_gully,f1_not_gully,macro_f1";
            let vals: Vec<String> = r.scores().as_array().iter().map(|v| format!("{v:.3}")).collect();
            format!("{header}\n{},{},{},{},{}\n", cm.tp, cm.fp, cm.fn_, cm.tn, vals.join(","))
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(r).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

pub fn render_histogram(h: &YesHistogram, format: Format) -> String {
    let rows = h
        .question_indices
        .iter()
        .zip(h.yes_positive.iter().zip(&h.yes_negative));
    match format {
        Format::Csv => {
            let mut out = String::from("question,yes_gully,yes_not_gully,total_gully,total_not_gully\n");
            for (q, (p, n)) in rows {
                let _ = writeln!(out, "{q},{p},{n},{},{}", h.total_positive, h.total_negative);
            }
            out
        }
        Format::Markdown => {
            let mut out = String::from("| Question | Yes (G) | Yes (NG) |\n|---|---|---|\n");
            for (q, (p, n)) in rows {
                let _ = writeln!(out, "| {q} | {p}/{} | {n}/{} |", h.total_positive, h.total_negative);
            }
            out
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(h).expect("histogram serializes");
            s.push('\n');
            s
        }
        Format::Svg => histogram_svg(h),
    }
}

/// Grouped bar chart of Yes rates per question.
fn histogram_svg(h: &YesHistogram) -> String {
    let bar = 10.0;
    let group = 2.0 * bar + 8.0;
    let height = 200.0;
    let left = 40.0;
    let width = left + group * h.question_indices.len() as f64 + 20.0;
    let rate = |c: u64, t: u64| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"9\">\n",
        height + 40.0
    );
    let _ = writeln!(
        out,
        "<line x1=\"{left}\" y1=\"{height}\" x2=\"{}\" y2=\"{height}\" stroke=\"black\"/>",
        width - 10.0
    );
    for (i, (q, (p, n))) in h
        .question_indices
        .iter()
        .zip(h.yes_positive.iter().zip(&h.yes_negative))
        .enumerate()
    {
        let x = left + 4.0 + group * i as f64;
        for (j, (r, color)) in [(rate(*p, h.total_positive), "#c0392b"), (rate(*n, h.total_negative), "#2980b9")]
            .into_iter()
            .enumerate()
        {
            let bh = r * (height - 10.0);
            let _ = writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar}\" height=\"{bh:.1}\" fill=\"{color}\"/>",
                x + bar * j as f64,
                height - bh
            );
        }
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\">{q}</text>", x + 4.0, height + 12.0);
    }
    let _ = writeln!(
        out,
        "<text x=\"{left}\" y=\"{}\">Yes rate per question: gully (red), not gully (blue)</text>",
        height + 30.0
    );
    out.push_str("</svg>\n");
    out
}

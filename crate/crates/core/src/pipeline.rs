//! Pipelines A (direct prompt), B (question bank + LLM aggregation) and
//! C (descriptive reasoning + LLM adjudication), plus the batch runner and
//! the on-disk prediction and answer formats.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatParams, ChatRequest, Client, Message};
use crate::collage::{self, CollageError, Grid};
use crate::dataset::{Label, Location};
use crate::prompts::{self, PromptTemplate, TemplateError};
use crate::questions::{self, QuestionSet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("location `{location}`: {source}")]
    Collage {
        location: String,
        #[source]
        source: CollageError,
    },
    #[error("location `{location}`: {source}")]
    Backend {
        location: String,
        #[source]
        source: BackendError,
    },
    #[error("location `{location}`: could not parse a yes/no verdict from {text:?}")]
    UnparseableVerdict { location: String, text: String },
    #[error("pipeline {0} needs an LLM endpoint")]
    MissingLlm(PipelineKind),
    #[error("pipeline {0} is not run through the chat engine")]
    Unsupported(PipelineKind),
    #[error("answers for `{location}` are not aligned with question set {set}")]
    Misaligned { location: String, set: String },
    #[error("question set is empty")]
    EmptyQuestionSet,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

impl Verdict {
    /// Text used for this verdict inside an aggregation prompt.
    pub fn answer_text(self) -> &'static str {
        match self {
            Verdict::Yes => "Yes",
            Verdict::No => "No",
            Verdict::Unparseable => prompts::NO_ANSWER,
        }
    }
}

/// Case-insensitive scan for whole-word `yes` / `no`; the last one wins.
/// Matching runs on the uppercased text so that `s` and `s.to_uppercase()`
/// always parse the same.
pub fn parse_verdict(text: &str) -> Verdict {
    text.to_uppercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter_map(|tok| match tok {
            "YES" => Some(Verdict::Yes),
            "NO" => Some(Verdict::No),
            _ => None,
        })
        .next_back()
        .unwrap_or(Verdict::Unparseable)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVector {
    pub location_id: String,
    pub question_indices: Vec<u8>,
    pub verdicts: Vec<Verdict>,
    pub raw_texts: Vec<String>,
}

impl AnswerVector {
    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.question_indices.len() == self.verdicts.len() && self.verdicts.len() == self.raw_texts.len()
    }

    pub fn verdict_for(&self, question: u8) -> Option<Verdict> {
        self.question_indices
            .iter()
            .position(|&q| q == question)
            .map(|i| self.verdicts[i])
    }

    /// Keep only `subset`, in `subset` order. `None` if any index is absent.
    pub fn restrict(&self, subset: &[u8]) -> Option<AnswerVector> {
        let mut out = AnswerVector {
            location_id: self.location_id.clone(),
            question_indices: Vec::with_capacity(subset.len()),
            verdicts: Vec::with_capacity(subset.len()),
            raw_texts: Vec::with_capacity(subset.len()),
        };
        for &q in subset {
            let i = self.question_indices.iter().position(|&x| x == q)?;
            out.question_indices.push(q);
            out.verdicts.push(self.verdicts[i]);
            out.raw_texts.push(self.raw_texts[i].clone());
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineKind {
    A,
    B,
    C,
    TL,
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PipelineKind::A => "A",
            PipelineKind::B => "B",
            PipelineKind::C => "C",
            PipelineKind::TL => "TL",
        };
        f.write_str(s)
    }
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(PipelineKind::A),
            "B" => Ok(PipelineKind::B),
            "C" => Ok(PipelineKind::C),
            "TL" => Ok(PipelineKind::TL),
            other => Err(format!("unknown pipeline `{other}` (expected A, B, C or TL)")),
        }
    }
}

/// What to do when a final verdict cannot be parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnparseablePolicy {
    Positive,
    #[default]
    Negative,
    Error,
}

impl FromStr for UnparseablePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            "error" => Ok(Self::Error),
            other => Err(format!("unknown unparseable policy `{other}`")),
        }
    }
}

impl fmt::Display for UnparseablePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub location_id: String,
    pub pipeline: PipelineKind,
    pub label: Label,
    pub raw_text: String,
    pub vlm_id: String,
    pub llm_id: Option<String>,
    /// Set when the label came from the unparseable policy rather than the model.
    #[serde(default)]
    pub unparseable: bool,
    /// MLP score for pipeline TL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// A model id served through a client.
#[derive(Clone)]
pub struct ModelRef {
    pub model_id: String,
    pub client: Arc<Client>,
}

impl ModelRef {
    pub fn new(model_id: impl Into<String>, client: Arc<Client>) -> Self {
        Self {
            model_id: model_id.into(),
            client,
        }
    }
}

/// A location's collage, encoded once for every request about it.
#[derive(Debug, Clone)]
pub struct PreparedLocation {
    pub id: String,
    pub image_b64: String,
}

#[derive(Clone)]
pub struct Engine {
    pub vlm: ModelRef,
    pub llm: Option<ModelRef>,
    pub params: ChatParams,
    pub grid: Grid,
    pub separator: u32,
    pub unparseable: UnparseablePolicy,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutput {
    pub predictions: Vec<Prediction>,
    /// Pipeline B only, aligned with `predictions`.
    pub answers: Vec<AnswerVector>,
}

impl Engine {
    pub fn new(vlm: ModelRef) -> Self {
        Self {
            vlm,
            llm: None,
            params: ChatParams::default(),
            grid: Grid::default(),
            separator: 0,
            unparseable: UnparseablePolicy::default(),
        }
    }

    pub fn with_llm(mut self, llm: ModelRef) -> Self {
        self.llm = Some(llm);
        self
    }

    pub fn prepare(&self, loc: &Location) -> Result<PreparedLocation, PipelineError> {
        let wrap = |source| PipelineError::Collage {
            location: loc.id.clone(),
            source,
        };
        let c = collage::build_for_location(loc, self.grid, self.separator).map_err(wrap)?;
        Ok(PreparedLocation {
            id: loc.id.clone(),
            image_b64: c.to_base64_png().map_err(wrap)?,
        })
    }

    fn llm(&self, kind: PipelineKind) -> Result<&ModelRef, PipelineError> {
        self.llm.as_ref().ok_or(PipelineError::MissingLlm(kind))
    }

    fn ask(&self, model: &ModelRef, location: &str, message: Message) -> Result<String, PipelineError> {
        let req = ChatRequest::new(model.model_id.clone(), vec![message], self.params);
        model
            .client
            .send(&req)
            .map(|r| r.text)
            .map_err(|source| PipelineError::Backend {
                location: location.to_string(),
                source,
            })
    }

    fn decide(
        &self,
        location: &str,
        kind: PipelineKind,
        raw_text: String,
        llm_id: Option<String>,
    ) -> Result<Prediction, PipelineError> {
        let (label, unparseable) = match parse_verdict(&raw_text) {
            Verdict::Yes => (Label::GullyPositive, false),
            Verdict::No => (Label::GullyNegative, false),
            Verdict::Unparseable => match self.unparseable {
                UnparseablePolicy::Positive => (Label::GullyPositive, true),
                UnparseablePolicy::Negative => (Label::GullyNegative, true),
                UnparseablePolicy::Error => {
                    return Err(PipelineError::UnparseableVerdict {
                        location: location.to_string(),
                        text: raw_text,
                    })
                }
            },
        };
        if unparseable {
            log::warn!("{location}: unparseable verdict, defaulting to {label:?}");
        }
        Ok(Prediction {
            location_id: location.to_string(),
            pipeline: kind,
            label,
            raw_text,
            vlm_id: self.vlm.model_id.clone(),
            llm_id,
            unparseable,
            score: None,
        })
    }

    /// Direct prompt with the collage; label parsed from the VLM's reply.
    pub fn run_pipeline_a(&self, loc: &PreparedLocation) -> Result<Prediction, PipelineError> {
        let msg = Message::user_with_image(prompts::PIPELINE_A, loc.image_b64.clone());
        let text = self.ask(&self.vlm, &loc.id, msg)?;
        self.decide(&loc.id, PipelineKind::A, text, None)
    }

    /// One request per question. A failed request leaves that slot Unparseable.
    pub fn run_vqa(&self, loc: &PreparedLocation, qs: &QuestionSet) -> Result<AnswerVector, PipelineError> {
        if qs.is_empty() {
            return Err(PipelineError::EmptyQuestionSet);
        }
        let mut av = AnswerVector {
            location_id: loc.id.clone(),
            question_indices: qs.indices.clone(),
            verdicts: Vec::with_capacity(qs.len()),
            raw_texts: Vec::with_capacity(qs.len()),
        };
        for &q in &qs.indices {
            let msg = Message::user_with_image(questions::render_question(q), loc.image_b64.clone());
            match self.ask(&self.vlm, &loc.id, msg) {
                Ok(text) => {
                    av.verdicts.push(parse_verdict(&text));
                    av.raw_texts.push(text);
                }
                Err(e) => {
                    log::warn!("question {q}: {e}");
                    av.verdicts.push(Verdict::Unparseable);
                    av.raw_texts.push(format!("[backend error] {e}"));
                }
            }
        }
        Ok(av)
    }

    /// Text-only LLM aggregation of an answer vector.
    pub fn aggregate_llm(&self, av: &AnswerVector, qs: &QuestionSet) -> Result<Prediction, PipelineError> {
        if av.question_indices != qs.indices || !av.is_consistent() {
            return Err(PipelineError::Misaligned {
                location: av.location_id.clone(),
                set: qs.to_string(),
            });
        }
        let llm = self.llm(PipelineKind::B)?;
        let prompt = PromptTemplate::aggregation().render(&[("QA_BLOCK", &qa_block(av))])?;
        let text = self.ask(llm, &av.location_id, Message::user(prompt))?;
        self.decide(&av.location_id, PipelineKind::B, text, Some(llm.model_id.clone()))
    }

    pub fn run_pipeline_b(
        &self,
        loc: &PreparedLocation,
        qs: &QuestionSet,
    ) -> Result<(AnswerVector, Prediction), PipelineError> {
        let av = self.run_vqa(loc, qs)?;
        let pred = self.aggregate_llm(&av, qs)?;
        Ok((av, pred))
    }

    /// Descriptive prompt to the VLM, then LLM adjudication of its reasoning.
    pub fn run_pipeline_c(&self, loc: &PreparedLocation) -> Result<Prediction, PipelineError> {
        let llm = self.llm(PipelineKind::C)?;
        let msg = Message::user_with_image(prompts::PIPELINE_C, loc.image_b64.clone());
        let reasoning = self.ask(&self.vlm, &loc.id, msg)?;
        let prompt = PromptTemplate::adjudication()
            .render(&[("QUESTION", prompts::PIPELINE_C_QUESTION), ("REASONING", &reasoning)])?;
        let verdict = self.ask(llm, &loc.id, Message::user(prompt))?;
        self.decide(&loc.id, PipelineKind::C, verdict, Some(llm.model_id.clone()))
    }

    /// Run `kind` over `locations` with `jobs` workers. Output order follows input order.
    pub fn run_batch(
        &self,
        locations: &[&Location],
        kind: PipelineKind,
        qs: Option<&QuestionSet>,
        jobs: usize,
    ) -> Result<BatchOutput, PipelineError> {
        let qs = match kind {
            PipelineKind::A => None,
            PipelineKind::B => Some(qs.ok_or(PipelineError::EmptyQuestionSet)?),
            PipelineKind::C => None,
            PipelineKind::TL => return Err(PipelineError::Unsupported(kind)),
        };
        if matches!(kind, PipelineKind::B | PipelineKind::C) {
            self.llm(kind)?;
        }

        type Slot = Option<Result<(Option<AnswerVector>, Prediction), PipelineError>>;
        let slots: Mutex<Vec<Slot>> = Mutex::new((0..locations.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = jobs.clamp(1, locations.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(loc) = locations.get(i) else { break };
                    let out = self.prepare(loc).and_then(|p| match kind {
                        PipelineKind::A => self.run_pipeline_a(&p).map(|pred| (None, pred)),
                        PipelineKind::B => self
                            .run_pipeline_b(&p, qs.expect("checked above"))
                            .map(|(av, pred)| (Some(av), pred)),
                        _ => self.run_pipeline_c(&p).map(|pred| (None, pred)),
                    });
                    let failed = out.is_err();
                    slots.lock().expect("result lock")[i] = Some(out);
                    if failed {
                        // Stop handing out work; finished slots are kept.
                        next.store(locations.len(), Ordering::SeqCst);
                    }
                });
            }
        });

        let mut output = BatchOutput::default();
        for slot in slots.into_inner().expect("result lock").into_iter().flatten() {
            let (av, pred) = slot?;
            output.answers.extend(av);
            output.predictions.push(pred);
        }
        Ok(output)
    }
}

/// Numbered question/answer pairs for the aggregation prompt.
pub fn qa_block(av: &AnswerVector) -> String {
    av.question_indices
        .iter()
        .zip(&av.verdicts)
        .enumerate()
        .map(|(i, (&q, v))| format!("{}. Q: {}\n   A: {}", i + 1, questions::text(q), v.answer_text()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub schema_version: u32,
    /// Resolved run configuration.
    pub config: serde_json::Value,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntry {
    #[serde(flatten)]
    pub answers: AnswerVector,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswersFile {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub question_indices: Vec<u8>,
    pub entries: Vec<AnswerEntry>,
}

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", path.display())]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: unsupported schema version {found} (expected {SCHEMA_VERSION})", path.display())]
    Schema { path: std::path::PathBuf, found: u32 },
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FileError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let bytes = std::fs::read(path).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| FileError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_predictions(path: &Path) -> Result<PredictionsFile, FileError> {
    let file: PredictionsFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(FileError::Schema {
            path: path.to_path_buf(),
            found: file.schema_version,
        });
    }
    Ok(file)
}

pub fn read_answers(path: &Path) -> Result<AnswersFile, FileError> {
    let file: AnswersFile = read_json(path)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(FileError::Schema {
            path: path.to_path_buf(),
            found: file.schema_version,
        });
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_basics() {
        assert_eq!(parse_verdict("There is no gully. Final answer: Yes"), Verdict::Yes);
        assert_eq!(parse_verdict("NO."), Verdict::No);
        assert_eq!(parse_verdict("Cannot determine."), Verdict::Unparseable);
        assert_eq!(parse_verdict("eyes and nose"), Verdict::Unparseable);
    }

    #[test]
    fn restrict_reorders_and_detects_gaps() {
        let av = AnswerVector {
            location_id: "x".into(),
            question_indices: vec![1, 2, 3],
            verdicts: vec![Verdict::Yes, Verdict::No, Verdict::Unparseable],
            raw_texts: vec!["a".into(), "b".into(), "c".into()],
        };
        let r = av.restrict(&[3, 1]).unwrap();
        assert_eq!(r.question_indices, vec![3, 1]);
        assert_eq!(r.verdicts, vec![Verdict::Unparseable, Verdict::Yes]);
        assert!(av.restrict(&[4]).is_none());
    }

    #[test]
    fn qa_block_format() {
        let av = AnswerVector {
            location_id: "x".into(),
            question_indices: vec![2, 14],
            verdicts: vec![Verdict::Yes, Verdict::Unparseable],
            raw_texts: vec![String::new(), String::new()],
        };
        assert_eq!(
            qa_block(&av),
            "1. Q: Do narrow, winding paths or channels appear?\n   A: Yes\n\
             2. Q: Are there any branching patterns that resemble temporary streams?\n   A: No answer"
        );
    }

    #[test]
    fn pipeline_kind_parsing() {
        assert_eq!("b".parse::<PipelineKind>().unwrap(), PipelineKind::B);
        assert!("D".parse::<PipelineKind>().is_err());
        assert_eq!("error".parse::<UnparseablePolicy>().unwrap(), UnparseablePolicy::Error);
    }
}

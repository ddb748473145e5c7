//! Deterministic in-process stand-in for VLM and LLM servers.
//!
//! Every reply is a pure function of the script, the request seed and the
//! request content. With the default rules:
//!
//! * image + question prompt: Bernoulli draw keyed on (seed, image digest,
//!   question index) with a per-class Yes rate; the class comes from the
//!   script's `labels` table (image digest -> label).
//! * image + descriptive prompt: a short reasoning paragraph ending in a
//!   verdict drawn the same way.
//! * aggregation prompt: `yes` iff a strict majority of the quoted answers are Yes.
//! * adjudication prompt: the verdict of the quoted reasoning.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{image_digest, Backend, BackendError, ChatRequest};
use crate::dataset::Label;
use crate::pipeline::{parse_verdict, Verdict};
use crate::{prompts, questions};

pub const REASONING_POSITIVE: &str = "Across the six images there is a clear channel formation that recurs along the same drainage line. Yes, ephemeral gully appearances are visible.";
pub const REASONING_NEGATIVE: &str = "The field surface looks uniform across the years with no recurring channel or rill. No.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockFailure {
    Timeout,
    Upstream { status: u16 },
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockReply {
    Text { text: String },
    Fail { failure: MockFailure },
    Bernoulli,
    Describe,
    Majority,
    Adjudicate,
}

/// All present conditions must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_image: Option<bool>,
}

impl RuleMatch {
    fn matches(&self, text: &str, has_image: bool) -> bool {
        self.contains.as_ref().is_none_or(|c| text.contains(c.as_str()))
            && self.question.is_none_or(|q| questions::find_in_prompt(text) == Some(q))
            && self.has_image.is_none_or(|h| h == has_image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub when: RuleMatch,
    pub reply: MockReply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    /// Checked in order before the default rules.
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default = "yes")]
    pub default_rules: bool,
    #[serde(default = "default_rates")]
    pub yes_rates: ClassRates,
    #[serde(default = "half")]
    pub unlabeled_yes_rate: f64,
    /// Per-question overrides of `yes_rates`.
    #[serde(default)]
    pub question_rates: BTreeMap<u8, ClassRates>,
    /// Image digest -> class, used to pick the Yes rate.
    #[serde(default)]
    pub labels: BTreeMap<String, Label>,
    /// Artificial latency per call.
    #[serde(default)]
    pub delay_ms: u64,
}

fn yes() -> bool {
    true
}

fn half() -> f64 {
    0.5
}

fn default_rates() -> ClassRates {
    ClassRates {
        positive: 0.8,
        negative: 0.25,
    }
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default_rules: true,
            yes_rates: default_rates(),
            unlabeled_yes_rate: half(),
            question_rates: BTreeMap::new(),
            labels: BTreeMap::new(),
            delay_ms: 0,
        }
    }
}

impl MockScript {
    /// A script with no default rules: only `rules` answer.
    pub fn rules_only(rules: Vec<MockRule>) -> Self {
        Self {
            rules,
            default_rules: false,
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, when: RuleMatch, reply: MockReply) -> Self {
        self.rules.push(MockRule { when, reply });
        self
    }

    /// Associate an image payload (base64) with a class.
    pub fn register_image(&mut self, image_b64: &str, label: Label) {
        self.labels.insert(image_digest(image_b64), label);
    }

    fn yes_rate(&self, digest: &str, question: u8) -> f64 {
        let rates = self.question_rates.get(&question).copied().unwrap_or(self.yes_rates);
        match self.labels.get(digest) {
            Some(Label::GullyPositive) => rates.positive,
            Some(Label::GullyNegative) => rates.negative,
            None => self.unlabeled_yes_rate,
        }
    }

    fn draw(&self, seed: u64, digest: &str, question: u8) -> bool {
        let mut h = Sha256::new();
        h.update(b"gully-mock-v1");
        h.update(seed.to_le_bytes());
        h.update(digest.as_bytes());
        h.update([question]);
        let bytes = h.finalize();
        let x = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let u = (x >> 11) as f64 / (1u64 << 53) as f64;
        u < self.yes_rate(digest, question)
    }
}

/// Reply to `req` under `script`. Pure.
pub fn mock_send(req: &ChatRequest, script: &MockScript) -> Result<String, BackendError> {
    let text = req.full_text();
    let first_image = req.images().next();
    let has_image = first_image.is_some();

    let reply = script
        .rules
        .iter()
        .find(|r| r.when.matches(&text, has_image))
        .map(|r| r.reply.clone())
        .or_else(|| script.default_rules.then(|| default_reply(&text, has_image)).flatten())
        .ok_or(BackendError::NoRuleMatched)?;

    let digest = first_image.map(|i| image_digest(i)).unwrap_or_default();
    let question = questions::find_in_prompt(&text).unwrap_or(0);
    match reply {
        MockReply::Text { text } => Ok(text),
        MockReply::Fail { failure } => Err(match failure {
            MockFailure::Timeout => BackendError::Timeout {
                attempts: 1,
                detail: "scripted timeout".into(),
            },
            MockFailure::Upstream { status } => BackendError::UpstreamError {
                status,
                body: "scripted failure".into(),
            },
            MockFailure::Malformed => BackendError::MalformedResponse("scripted".into()),
        }),
        MockReply::Bernoulli => Ok(if script.draw(req.params.seed, &digest, question) { "Yes." } else { "No." }.into()),
        MockReply::Describe => Ok(if script.draw(req.params.seed, &digest, question) {
            REASONING_POSITIVE
        } else {
            REASONING_NEGATIVE
        }
        .into()),
        MockReply::Majority => Ok(majority(&text).into()),
        MockReply::Adjudicate => {
            let reasoning = quoted_reasoning(&text).unwrap_or("");
            Ok(if parse_verdict(reasoning) == Verdict::Yes { "yes" } else { "no" }.into())
        }
    }
}

fn default_reply(text: &str, has_image: bool) -> Option<MockReply> {
    if text.contains(prompts::AGGREGATION_MARKER) {
        Some(MockReply::Majority)
    } else if text.contains(prompts::ADJUDICATION_MARKER) {
        Some(MockReply::Adjudicate)
    } else if has_image && text.contains(prompts::DESCRIPTIVE_MARKER) {
        Some(MockReply::Describe)
    } else if has_image {
        Some(MockReply::Bernoulli)
    } else {
        None
    }
}

/// "yes" iff strictly more than half of the `A:` lines read Yes.
fn majority(text: &str) -> &'static str {
    let answers: Vec<&str> = text
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix("A:"))
        .map(str::trim)
        .collect();
    let yes = answers.iter().filter(|a| a.eq_ignore_ascii_case("yes")).count();
    if 2 * yes > answers.len() {
        "yes"
    } else {
        "no"
    }
}

fn quoted_reasoning(text: &str) -> Option<&str> {
    let start = text.find("<<<\n")? + 4;
    let end = text[start..].rfind("\n>>>")? + start;
    Some(&text[start..end])
}

/// Mock backend with call instrumentation.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: MockScript,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            ..Self::default()
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneously outstanding calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.script.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.delay_ms));
        }
        let out = mock_send(req, &self.script);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn describe(&self) -> String {
        "mock://default".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatParams, Message};

    fn text_req(text: &str) -> ChatRequest {
        ChatRequest::new("llm", vec![Message::user(text)], ChatParams::default())
    }

    fn qa(answers: &[&str]) -> String {
        let block: Vec<String> = answers
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}. Q: question {i}\n   A: {a}", i + 1))
            .collect();
        prompts::PromptTemplate::aggregation()
            .render(&[("QA_BLOCK", &block.join("\n"))])
            .unwrap()
    }

    #[test]
    fn majority_rule() {
        let s = MockScript::default();
        assert_eq!(mock_send(&text_req(&qa(&["Yes", "Yes", "No"])), &s).unwrap(), "yes");
        assert_eq!(mock_send(&text_req(&qa(&["Yes", "No"])), &s).unwrap(), "no");
        assert_eq!(mock_send(&text_req(&qa(&["No answer", "No answer"])), &s).unwrap(), "no");
    }

    #[test]
    fn deterministic_for_same_seed() {
        let img = {
            let i = image::RgbImage::from_pixel(3, 3, image::Rgb([1, 2, 3]));
            let mut buf = std::io::Cursor::new(Vec::new());
            i.write_to(&mut buf, image::ImageFormat::Png).unwrap();
            base64::Engine::encode(&base64::engine::general_purpose::STANDARD, buf.into_inner())
        };
        let s = MockScript::default();
        let req = ChatRequest::new(
            "vlm",
            vec![Message::user_with_image(questions::render_question(4), img)],
            ChatParams::default(),
        );
        let a = mock_send(&req, &s).unwrap();
        assert_eq!(a, mock_send(&req, &s).unwrap());
        assert!(a == "Yes." || a == "No.");
    }

    #[test]
    fn per_class_rates_are_honoured() {
        // Rates of exactly 1 and 0 make every draw certain.
        let mut s = MockScript {
            yes_rates: ClassRates { positive: 1.0, negative: 0.0 },
            ..MockScript::default()
        };
        let pos = "cG9z"; // "pos"
        let neg = "bmVn"; // "neg"
        s.labels.insert(image_digest(pos), Label::GullyPositive);
        s.labels.insert(image_digest(neg), Label::GullyNegative);
        for seed in 0..20 {
            assert!(s.draw(seed, &image_digest(pos), 3));
            assert!(!s.draw(seed, &image_digest(neg), 3));
        }
    }

    #[test]
    fn custom_rules_and_no_match() {
        let s = MockScript::rules_only(vec![MockRule {
            when: RuleMatch {
                contains: Some("hello".into()),
                ..RuleMatch::default()
            },
            reply: MockReply::Text { text: "scripted".into() },
        }]);
        assert_eq!(mock_send(&text_req("say hello"), &s).unwrap(), "scripted");
        assert!(matches!(mock_send(&text_req("bye"), &s), Err(BackendError::NoRuleMatched)));
        // Default script has no rule for an image-less free-form request either.
        assert!(matches!(
            mock_send(&text_req("bye"), &MockScript::default()),
            Err(BackendError::NoRuleMatched)
        ));
    }

    #[test]
    fn adjudication_follows_quoted_reasoning() {
        let s = MockScript::default();
        let render = |r: &str| {
            prompts::PromptTemplate::adjudication()
                .render(&[("QUESTION", prompts::PIPELINE_C_QUESTION), ("REASONING", r)])
                .unwrap()
        };
        assert_eq!(mock_send(&text_req(&render(REASONING_POSITIVE)), &s).unwrap(), "yes");
        assert_eq!(mock_send(&text_req(&render(REASONING_NEGATIVE)), &s).unwrap(), "no");
        assert_eq!(mock_send(&text_req(&render("")), &s).unwrap(), "no");
    }

    #[test]
    fn script_json_round_trip() {
        let s = MockScript::default().with_rule(
            RuleMatch {
                question: Some(7),
                ..RuleMatch::default()
            },
            MockReply::Fail {
                failure: MockFailure::Timeout,
            },
        );
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MockScript>(&json).unwrap(), s);
        let minimal: MockScript = serde_json::from_str("{}").unwrap();
        assert_eq!(minimal, MockScript::default());
    }
}

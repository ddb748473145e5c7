//! Prompt texts and placeholder rendering.

use thiserror::Error;

/// Direct classification prompt, sent with the collage.
pub const PIPELINE_A: &str = "Given this collage of six images of the exact same area and collected over a period of 10 years. Are there any ephemeral gully appearances by looking at all of them together? Reason and conclude with only yes or no.";

/// Descriptive prompt whose free-text answer is adjudicated by an LLM.
pub const PIPELINE_C: &str = "Given this collage of six images of the exact same area and collected over a period of 10 years. Are there any ephemeral gully appearances by looking at all of them together?. Provide the reasons for your answer.";

/// Question quoted back to the adjudicator.
pub const PIPELINE_C_QUESTION: &str =
    "Are there any ephemeral gully appearances by looking at all of them together?";

/// Text-only aggregation prompt over numbered question/answer pairs.
pub const AGGREGATION: &str = "The following are yes/no answers to questions about visual attributes of ephemeral gullies observed in aerial images of one field over 10 years.\n{QA_BLOCK}\nBased only on these answers, does this field show signs of ephemeral gully formation? Conclude with only yes or no.";

/// Adjudication prompt over the VLM's reasoning. The reasoning sits between
/// `<<<` and `>>>` lines.
pub const ADJUDICATION: &str = "A vision-language model was shown a collage of six aerial images of the exact same area collected over a period of 10 years and asked:\n\"{QUESTION}\"\nIts reasoning was:\n<<<\n{REASONING}\n>>>\nEvaluate whether this reasoning is valid and decide whether the area shows signs of ephemeral gully formation. Conclude with only yes or no.";

/// Marker identifying an aggregation prompt.
pub const AGGREGATION_MARKER: &str = "Based only on these answers";
/// Marker identifying an adjudication prompt.
pub const ADJUDICATION_MARKER: &str = "Its reasoning was:";
/// Marker identifying the descriptive prompt.
pub const DESCRIPTIVE_MARKER: &str = "Provide the reasons for your answer";

/// Answer text rendered for an unparseable verdict.
pub const NO_ANSWER: &str = "No answer";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}` leaves placeholder {{{placeholder}}} unresolved")]
    Unresolved { template: String, placeholder: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn aggregation() -> Self {
        Self::new("aggregation", AGGREGATION)
    }

    pub fn adjudication() -> Self {
        Self::new("adjudication", ADJUDICATION)
    }

    /// Placeholder names (`{NAME}`, upper-case and underscores) in template order.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find('{') {
            let after = &rest[start + 1..];
            match after.find('}') {
                Some(end) if is_placeholder_name(&after[..end]) => {
                    out.push(after[..end].to_string());
                    rest = &after[end + 1..];
                }
                _ => rest = after,
            }
        }
        out
    }

    /// Single-pass substitution; values are not rescanned for placeholders.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            match after.find('}') {
                Some(end) if is_placeholder_name(&after[..end]) => {
                    let name = &after[..end];
                    let value = values
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Unresolved {
                            template: self.name.clone(),
                            placeholder: name.to_string(),
                        })?;
                    out.push_str(value);
                    rest = &after[end + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_uppercase() || b == b'_')
}

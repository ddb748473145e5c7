use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, ChatRequest};

const BODY_EXCERPT: usize = 200;

/// JSON chat endpoint in the local-model-server convention:
///
/// ```text
/// POST {"model", "messages":[{"role","content","images"}], "stream":false,
///       "options":{"temperature","seed","num_predict"}}
///  ->  {"message":{"content": "..."}}
/// ```
pub struct HttpBackend {
    url: String,
    agent: ureq::Agent,
    bearer: Option<String>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, timeout: Duration, bearer: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
            bearer,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

/// Request body sent on the wire.
pub fn wire_body(req: &ChatRequest) -> Value {
    json!({
        "model": req.model_id,
        "messages": req.messages.iter().map(|m| json!({
            "role": m.role.as_str(),
            "content": m.text,
            "images": m.images,
        })).collect::<Vec<_>>(),
        "stream": false,
        "options": {
            "temperature": req.params.temperature,
            "seed": req.params.seed,
            "num_predict": req.params.max_tokens,
        },
    })
}

/// Pull `message.content` out of a response body.
pub fn parse_wire_response(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedResponse(format!("{e}: {}", excerpt(body))))?;
    value
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedResponse(format!("no message.content in {}", excerpt(body))))
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

impl Backend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.bearer {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let transport = |e: ureq::Error| BackendError::Timeout {
            attempts: 1,
            detail: format!("{}: {e}", self.url),
        };
        let mut resp = call.send_json(wire_body(req)).map_err(transport)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::UpstreamError {
                status,
                body: excerpt(&body),
            });
        }
        parse_wire_response(&body)
    }

    fn describe(&self) -> String {
        self.url.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatParams, Message};

    #[test]
    fn wire_body_shape() {
        let req = ChatRequest::new("llava", vec![Message::user("hi")], ChatParams::default());
        let body = wire_body(&req);
        assert_eq!(body["model"], "llava");
        assert_eq!(body["stream"], false);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["messages"][0]["images"], json!([]));
        assert_eq!(body["options"]["seed"], 17);
        assert_eq!(body["options"]["temperature"], 0.0);
    }

    #[test]
    fn response_parsing() {
        assert_eq!(parse_wire_response(r#"{"message":{"content":"Yes."}}"#).unwrap(), "Yes.");
        assert_eq!(parse_wire_response(r#"{"message":{"content":""}}"#).unwrap(), "");
        assert!(matches!(parse_wire_response("{}"), Err(BackendError::MalformedResponse(_))));
        assert!(matches!(parse_wire_response("<html>"), Err(BackendError::MalformedResponse(_))));
    }
}

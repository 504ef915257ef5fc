use std::time::Duration;

use serde_json::{json, Value};

use super::{CompletionRequest, Endpoint, LlmError, ResponseSource};

pub const ENV_ENDPOINT_URL: &str = "AMPLIFY_LLM_URL";
pub const ENV_API_KEY: &str = "AMPLIFY_LLM_API_KEY";
pub const ENV_MODEL_NAME: &str = "AMPLIFY_LLM_MODEL";

/// OpenAI-compatible `POST {base}/v1/completions`.
pub struct HttpEndpoint {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    /// `base` is the server root, e.g. `http://127.0.0.1:8000`. A full
    /// `.../completions` URL is used as is.
    pub fn new(base: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let trimmed = base.trim_end_matches('/');
        let url = if trimmed.ends_with("/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/v1/completions")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEndpoint { url, api_key, agent }
    }

    pub fn from_env(timeout: Duration) -> Result<Self, LlmError> {
        let base = std::env::var(ENV_ENDPOINT_URL).map_err(|_| {
            LlmError::EndpointUnreachable(format!("{ENV_ENDPOINT_URL} is not set"))
        })?;
        Ok(Self::new(&base, std::env::var(ENV_API_KEY).ok(), timeout))
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

fn request_body(request: &CompletionRequest) -> String {
    let mut body = json!({
        "model": request.model_name,
        "prompt": request.prompt,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if !request.stop.is_empty() {
        body["stop"] = json!(request.stop);
    }
    body.to_string()
}

fn extract_text(body: &str) -> Result<String, LlmError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/text")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].text".into()))
}

pub(super) fn classify_status(status: u16) -> Option<LlmError> {
    match status {
        200..=299 => None,
        429 => Some(LlmError::RateLimited { attempts: 1 }),
        500..=599 => Some(LlmError::ServerError { status, attempts: 1 }),
        other => Some(LlmError::Rejected(other)),
    }
}

impl Endpoint for HttpEndpoint {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(request_body(request)).map_err(|e| match e {
            ureq::Error::StatusCode(s) => classify_status(s).unwrap_or(LlmError::Rejected(s)),
            other => LlmError::EndpointUnreachable(other.to_string()),
        })?;
        if let Some(err) = classify_status(resp.status().as_u16()) {
            return Err(err);
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        extract_text(&body)
    }

    fn source(&self) -> ResponseSource {
        ResponseSource::Live
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_normalization() {
        let t = Duration::from_secs(1);
        assert_eq!(HttpEndpoint::new("http://h:1/", None, t).url(), "http://h:1/v1/completions");
        assert_eq!(
            HttpEndpoint::new("http://h:1/v1/completions", None, t).url(),
            "http://h:1/v1/completions"
        );
    }

    #[test]
    fn body_and_extraction() {
        let mut r = CompletionRequest::new("m", "p");
        r.stop = vec!["\n\n".into()];
        let v: Value = serde_json::from_str(&request_body(&r)).unwrap();
        assert_eq!(v["model"], "m");
        assert_eq!(v["stop"][0], "\n\n");
        assert_eq!(extract_text(r#"{"choices":[{"text":" (A)"}]}"#).unwrap(), " (A)");
        assert!(extract_text(r#"{"choices":[]}"#).is_err());
        assert!(extract_text("nope").is_err());
    }

    #[test]
    fn status_classes() {
        assert_eq!(classify_status(200), None);
        assert!(matches!(classify_status(429), Some(LlmError::RateLimited { .. })));
        assert!(matches!(classify_status(503), Some(LlmError::ServerError { status: 503, .. })));
        assert_eq!(classify_status(401), Some(LlmError::Rejected(401)));
    }
}

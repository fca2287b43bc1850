use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatRequest, ChatResponse, Provider, ProviderError, Usage};

/// Environment variable holding the bearer credential for live providers.
pub const API_KEY_ENV: &str = "GUIDED_API_KEY";

/// Client for a chat-completions HTTP endpoint (`POST {base_url}/chat/completions`).
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    remote_model: String,
    api_key: Option<String>,
}

impl HttpProvider {
    /// `remote_model` is the model id sent on the wire; the request's own
    /// `model` field is the logical name used for routing and caching.
    pub fn new(
        base_url: impl Into<String>,
        remote_model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Config(format!("http client: {e}")))?;
        Ok(HttpProvider {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            remote_model: remote_model.into(),
            api_key,
        })
    }

    fn body(&self, req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.remote_model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("error"))
                .and_then(|m| m.as_str().map(str::to_string))
        })
        .unwrap_or_else(|| body.chars().take(500).collect())
}

impl Provider for HttpProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.validate()?;
        let url = format!("{}/chat/completions", self.base_url);
        let mut call = self.client.post(&url).json(&self.body(req));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| ProviderError::Transport(format!("{url}: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Transport(format!("{url}: {e}")))?;

        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transport(format!(
                "HTTP {}: {}",
                status.as_u16(),
                error_message(&text)
            )));
        }
        if !status.is_success() {
            return Err(ProviderError::Provider {
                status: Some(status.as_u16()),
                message: error_message(&text),
            });
        }

        let v: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Provider {
            status: Some(status.as_u16()),
            message: format!("malformed response body: {e}"),
        })?;
        if let Some(err) = v.get("error").filter(|e| !e.is_null()) {
            return Err(ProviderError::Provider {
                status: Some(status.as_u16()),
                message: err
                    .get("message")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| err.to_string()),
            });
        }
        let content = v
            .pointer("/choices/0/message/content")
            .map(|c| c.as_str().unwrap_or_default().to_string())
            .ok_or_else(|| ProviderError::Provider {
                status: Some(status.as_u16()),
                message: "response has no choices[0].message.content".into(),
            })?;
        let usage = Usage {
            prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: v
                .pointer("/usage/completion_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0),
        };
        Ok(ChatResponse {
            content,
            model: req.model.clone(),
            usage,
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the given (status, body) pairs to successive connections and
    /// reports each request body it received.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn req() -> ChatRequest {
        ChatRequest::new("mini", vec![Message::user("hello")])
    }

    #[test]
    fn parses_success_and_sends_remote_model() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi there"}}],"usage":{"prompt_tokens":3,"completion_tokens":2}}"#;
        let (url, rx) = serve(vec![(200, ok.into())]);
        let p = HttpProvider::new(url, "gpt-4o-mini", Some("k".into()), Duration::from_secs(5)).unwrap();
        let r = p.complete(&req()).unwrap();
        assert_eq!(r.content, "hi there");
        assert_eq!(r.model, "mini");
        assert_eq!(r.usage.completion_tokens, 2);
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "gpt-4o-mini");
        assert_eq!(sent["messages"][0]["content"], "hello");
    }

    #[test]
    fn client_error_is_not_retryable() {
        let (url, _rx) = serve(vec![(400, r#"{"error":{"message":"bad model"}}"#.into())]);
        let p = HttpProvider::new(url, "x", None, Duration::from_secs(5)).unwrap();
        let err = p.complete(&req()).unwrap_err();
        assert!(!err.is_retryable());
        assert!(err.to_string().contains("bad model"), "{err}");
    }

    #[test]
    fn server_error_is_retryable_and_retry_recovers() {
        let ok = r#"{"choices":[{"message":{"content":"second"}}]}"#;
        let (url, _rx) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let p = HttpProvider::new(url, "x", None, Duration::from_secs(5)).unwrap();
        let err = p.complete(&req()).unwrap_err();
        assert!(err.is_retryable());
        assert_eq!(p.complete(&req()).unwrap().content, "second");
    }

    #[test]
    fn connection_refused_is_transport() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let p = HttpProvider::new(format!("http://{addr}"), "x", None, Duration::from_secs(2)).unwrap();
        assert!(p.complete(&req()).unwrap_err().is_retryable());
    }
}

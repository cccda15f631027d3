use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::wire::{self, EmbedRequest, EmbedResponse, ErrorBody, WireInfo, PROTOCOL_VERSION};
use crate::encoder::{EmbeddingProvider, ProviderError, ProviderInfo};

const TIMEOUT: Duration = Duration::from_secs(120);

pub(crate) fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(TIMEOUT))
        .build()
        .into()
}

/// Raw HTTP exchange: status and body text. Errors are transport errors.
pub(crate) fn exchange(agent: &ureq::Agent, method: &str, url: &str, body: Option<&str>) -> Result<(u16, String), String> {
    let result = match (method, body) {
        ("GET", _) => agent.get(url).call(),
        (_, b) => agent
            .post(url)
            .header("content-type", "application/json")
            .send(b.unwrap_or("")),
    };
    let mut resp = result.map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(1 << 30)
        .read_to_string()
        .map_err(|e| e.to_string())?;
    Ok((status, text))
}

fn error_message(text: &str) -> String {
    serde_json::from_str::<ErrorBody>(text)
        .map(|e| format!("{}: {}", e.error, e.message))
        .unwrap_or_else(|_| text.chars().take(200).collect())
}

/// An [`EmbeddingProvider`] backed by a remote service.
#[derive(Debug)]
pub struct RemoteProvider {
    base: String,
    info: ProviderInfo,
    agent: ureq::Agent,
    next_id: AtomicU64,
}

impl RemoteProvider {
    pub fn url(&self) -> &str {
        &self.base
    }
}

/// Connects to `url`, fetches and checks the service description.
pub fn remote_provider(url: &str) -> Result<RemoteProvider, ProviderError> {
    let base = url.trim_end_matches('/').to_string();
    let agent = agent();
    let (status, text) = exchange(&agent, "GET", &format!("{base}/v1/info"), None).map_err(ProviderError::Transport)?;
    if status != 200 {
        return Err(ProviderError::Protocol(format!("GET /v1/info returned {status}: {}", error_message(&text))));
    }
    let info: WireInfo =
        serde_json::from_str(&text).map_err(|e| ProviderError::Protocol(format!("invalid info document: {e}")))?;
    if info.version != PROTOCOL_VERSION {
        return Err(ProviderError::VersionMismatch {
            server: info.version,
            client: PROTOCOL_VERSION,
        });
    }
    let info = info.to_provider_info();
    info.validate()?;
    Ok(RemoteProvider {
        base,
        info,
        agent,
        next_id: AtomicU64::new(0),
    })
}

impl EmbeddingProvider for RemoteProvider {
    fn info(&self) -> &ProviderInfo {
        &self.info
    }

    fn embed_batch(&self, samples: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let m = self.info.input_shape.numel();
        if let Some(bad) = samples.iter().find(|s| s.len() != m) {
            return Err(ProviderError::ShapeMismatch {
                expected: m,
                got: bad.len(),
            });
        }
        let request_id = format!("req-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let req = EmbedRequest {
            version: PROTOCOL_VERSION,
            request_id: request_id.clone(),
            shape: self.info.input_shape,
            samples: samples.iter().map(|s| wire::encode_f64s(s)).collect(),
        };
        let body = serde_json::to_string(&req).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        let (status, text) = exchange(&self.agent, "POST", &format!("{}/v1/embed", self.base), Some(&body))
            .map_err(ProviderError::Transport)?;
        match status {
            200 => {}
            426 => {
                let server = serde_json::from_str::<ErrorBody>(&text)
                    .ok()
                    .and_then(|e| e.server_version)
                    .unwrap_or(0);
                return Err(ProviderError::VersionMismatch {
                    server,
                    client: PROTOCOL_VERSION,
                });
            }
            422 => return Err(ProviderError::Negotiation(error_message(&text))),
            500..=599 => return Err(ProviderError::Model(error_message(&text))),
            s => return Err(ProviderError::Protocol(format!("status {s}: {}", error_message(&text)))),
        }
        let resp: EmbedResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Protocol(format!("invalid embed response: {e}")))?;
        if resp.request_id != request_id {
            return Err(ProviderError::Protocol(format!(
                "response for {} answered request {}",
                resp.request_id, request_id
            )));
        }
        if resp.n != self.info.n || resp.embeddings.len() != samples.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} embeddings of length {}, got {} of length {}",
                samples.len(),
                self.info.n,
                resp.embeddings.len(),
                resp.n
            )));
        }
        resp.embeddings
            .iter()
            .map(|s| {
                let v = wire::decode_f64s(s).map_err(ProviderError::Protocol)?;
                if v.len() != self.info.n {
                    return Err(ProviderError::Protocol(format!("embedding of length {}", v.len())));
                }
                Ok(v)
            })
            .collect()
    }
}

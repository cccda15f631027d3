//! Black-box checks that an embedding service speaks the protocol.

use serde::{Deserialize, Serialize};

use super::client::{agent, exchange};
use super::wire::{self, EmbedRequest, EmbedResponse, ErrorBody, WireInfo, PROTOCOL_VERSION};
use crate::seed;
use rand::Rng;

/// Largest tolerated difference between two embeddings of the same input.
pub const DETERMINISM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckOutcome {
    Pass,
    Fail,
    /// The service could not be reached; says nothing about conformance.
    Transport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub outcome: CheckOutcome,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub url: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome == CheckOutcome::Pass)
    }

    pub fn outcome(&self, name: &str) -> Option<CheckOutcome> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.outcome)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.outcome != CheckOutcome::Pass)
            .map(|c| c.name.as_str())
            .collect()
    }
}

pub const CHECKS: [&str; 5] = ["info_schema", "determinism", "batch_order", "error_codes", "n_consistency"];

enum Failure {
    Fail(String),
    Transport(String),
}

type Check = Result<String, Failure>;

fn fail<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Fail(msg.into()))
}

struct Session {
    base: String,
    agent: ureq::Agent,
    counter: u64,
}

impl Session {
    fn call(&self, method: &str, path: &str, body: Option<&str>) -> Result<(u16, String), Failure> {
        exchange(&self.agent, method, &format!("{}{path}", self.base), body).map_err(Failure::Transport)
    }

    fn embed_raw(&mut self, info: &WireInfo, samples: &[Vec<f64>]) -> Result<EmbedResponse, Failure> {
        self.counter += 1;
        let req = EmbedRequest {
            version: PROTOCOL_VERSION,
            request_id: format!("conformance-{}", self.counter),
            shape: info.input_shape,
            samples: samples.iter().map(|s| wire::encode_f64s(s)).collect(),
        };
        let (status, text) = self.call("POST", "/v1/embed", Some(&serde_json::to_string(&req).expect("serializes")))?;
        if status != 200 {
            return fail(format!("embed returned status {status}"));
        }
        let resp: EmbedResponse = serde_json::from_str(&text).or_else(|e| fail(format!("bad embed response: {e}")))?;
        if resp.request_id != req.request_id {
            return fail(format!("request id {} echoed as {}", req.request_id, resp.request_id));
        }
        Ok(resp)
    }

    fn embed(&mut self, info: &WireInfo, samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, Failure> {
        let resp = self.embed_raw(info, samples)?;
        if resp.embeddings.len() != samples.len() {
            return fail(format!("sent {} samples, got {} embeddings", samples.len(), resp.embeddings.len()));
        }
        resp.embeddings
            .iter()
            .map(|s| wire::decode_f64s(s).or_else(|e| fail(e)))
            .collect()
    }
}

fn probe_samples(info: &WireInfo, count: usize, salt: u64) -> Vec<Vec<f64>> {
    let m = info.input_shape.numel();
    (0..count)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(salt, "conformance", &[i as u64]));
            (0..m).map(|_| rng.gen_range(0.0..1.0)).collect()
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_info(s: &Session) -> Result<WireInfo, Failure> {
    let (status, text) = s.call("GET", "/v1/info", None)?;
    if status != 200 {
        return fail(format!("GET /v1/info returned {status}"));
    }
    let info: WireInfo = serde_json::from_str(&text).or_else(|e| fail(format!("schema: {e}")))?;
    if info.version != PROTOCOL_VERSION {
        return fail(format!("version {}", info.version));
    }
    if info.n == 0 || info.tokens * info.token_dim != info.n {
        return fail(format!("n = {} but tokens x dim = {} x {}", info.n, info.tokens, info.token_dim));
    }
    if info.input_shape.numel() == 0 || info.id.is_empty() {
        return fail("empty input shape or id");
    }
    Ok(info)
}

fn check_determinism(s: &mut Session, info: &WireInfo) -> Check {
    let x = probe_samples(info, 1, 1);
    let a = s.embed(info, &x)?;
    let b = s.embed(info, &x)?;
    let d = max_abs_diff(&a[0], &b[0]);
    if d < DETERMINISM_TOLERANCE {
        Ok(format!("max abs diff {d:e}"))
    } else {
        fail(format!("max abs diff {d:e} between identical requests"))
    }
}

fn check_batch_order(s: &mut Session, info: &WireInfo) -> Check {
    let xs = probe_samples(info, 8, 2);
    let batch = s.embed(info, &xs)?;
    let mut single = Vec::with_capacity(xs.len());
    for x in &xs {
        single.push(s.embed(info, std::slice::from_ref(x))?.remove(0));
    }
    for (i, e) in batch.iter().enumerate() {
        let nearest = single
            .iter()
            .enumerate()
            .min_by(|a, b| max_abs_diff(e, a.1).total_cmp(&max_abs_diff(e, b.1)))
            .map(|(j, _)| j);
        if nearest != Some(i) {
            return fail(format!("batch position {i} matches sample {nearest:?}"));
        }
    }
    Ok(format!("{} positions preserved", xs.len()))
}

fn expect_error(s: &Session, body: &str, status: u16, code: &str) -> Check {
    let (got, text) = s.call("POST", "/v1/embed", Some(body))?;
    let parsed = serde_json::from_str::<ErrorBody>(&text).ok();
    match parsed {
        Some(e) if got == status && e.error == code => Ok(format!("{status} {code}")),
        Some(e) => fail(format!("expected {status} {code}, got {got} {}", e.error)),
        None => fail(format!("expected {status} {code}, got {got} without an error body")),
    }
}

fn check_error_codes(s: &mut Session, info: &WireInfo) -> Check {
    let mut notes = vec![expect_error(s, "{not json", 400, wire::ERR_MALFORMED_JSON)?];
    let m = info.input_shape.numel();
    let short = EmbedRequest {
        version: PROTOCOL_VERSION,
        request_id: "conformance-shape".into(),
        shape: info.input_shape,
        samples: vec![wire::encode_f64s(&vec![0.0; m + 1])],
    };
    notes.push(expect_error(
        s,
        &serde_json::to_string(&short).expect("serializes"),
        422,
        wire::ERR_SHAPE_MISMATCH,
    )?);
    let future = EmbedRequest {
        version: PROTOCOL_VERSION + 998,
        request_id: "conformance-version".into(),
        shape: info.input_shape,
        samples: vec![wire::encode_f64s(&vec![0.0; m])],
    };
    notes.push(expect_error(
        s,
        &serde_json::to_string(&future).expect("serializes"),
        426,
        wire::ERR_VERSION_MISMATCH,
    )?);
    Ok(notes.join(", "))
}

fn check_n(s: &mut Session, info: &WireInfo) -> Check {
    let xs = probe_samples(info, 3, 3);
    let resp = s.embed_raw(info, &xs)?;
    if resp.n != info.n {
        return fail(format!("response n = {}, info n = {}", resp.n, info.n));
    }
    for e in &resp.embeddings {
        let v = wire::decode_f64s(e).or_else(|e| fail(e))?;
        if v.len() != info.n {
            return fail(format!("embedding of length {}, info n = {}", v.len(), info.n));
        }
    }
    Ok(format!("n = {}", info.n))
}

fn record(name: &str, r: Check) -> CheckResult {
    let (outcome, detail) = match r {
        Ok(d) => (CheckOutcome::Pass, d),
        Err(Failure::Fail(d)) => (CheckOutcome::Fail, d),
        Err(Failure::Transport(d)) => (CheckOutcome::Transport, d),
    };
    CheckResult {
        name: name.into(),
        outcome,
        detail,
    }
}

/// Runs every check against the service at `url`; each is reported on its
/// own.
pub fn conformance_suite(url: &str) -> ConformanceReport {
    let mut s = Session {
        base: url.trim_end_matches('/').to_string(),
        agent: agent(),
        counter: 0,
    };
    let mut checks = Vec::new();
    let info = match check_info(&s) {
        Ok(info) => {
            checks.push(record(CHECKS[0], Ok(format!("n = {}, id = {}", info.n, info.id))));
            info
        }
        Err(e) => {
            let transport = matches!(e, Failure::Transport(_));
            checks.push(record(CHECKS[0], Err(e)));
            for name in &CHECKS[1..] {
                let detail = "skipped: no usable info document".to_string();
                checks.push(record(
                    name,
                    Err(if transport { Failure::Transport(detail) } else { Failure::Fail(detail) }),
                ));
            }
            return ConformanceReport { url: url.into(), checks };
        }
    };
    checks.push(record(CHECKS[1], check_determinism(&mut s, &info)));
    checks.push(record(CHECKS[2], check_batch_order(&mut s, &info)));
    checks.push(record(CHECKS[3], check_error_codes(&mut s, &info)));
    checks.push(record(CHECKS[4], check_n(&mut s, &info)));
    ConformanceReport { url: url.into(), checks }
}

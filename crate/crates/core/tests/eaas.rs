use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use dovmm::data::synthetic::{generate_range, FamilyId, SyntheticFamily};
use dovmm::data::SampleShape;
use dovmm::decoder::DecoderTrainConfig;
use dovmm::eaas::wire::{self, ErrorBody};
use dovmm::eaas::{
    conformance_suite, remote_provider, serve, CheckOutcome, EmbedRequest, EmbedResponse, ServeError, WireInfo,
    PROTOCOL_VERSION,
};
use dovmm::encoder::{EmbeddingProvider, PretrainConfig, ProviderError, ProviderInfo, ToyEncoder, ToyEncoderConfig};
use dovmm::verify::{run_verification, DecoderSource, VerificationConfig};

fn toy() -> ToyEncoder {
    ToyEncoder::init(PretrainConfig {
        encoder: ToyEncoderConfig {
            hidden: 16,
            ..Default::default()
        },
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn get(url: &str) -> (u16, String) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
}

fn post(url: &str, body: &str) -> (u16, String) {
    let mut r = agent()
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
}

fn request(samples: &[Vec<f64>], shape: SampleShape, version: u32) -> String {
    serde_json::to_string(&EmbedRequest {
        version,
        request_id: "t-1".into(),
        shape,
        samples: samples.iter().map(|s| wire::encode_f64s(s)).collect(),
    })
    .unwrap()
}

fn error_of(text: &str) -> ErrorBody {
    serde_json::from_str(text).unwrap()
}

/// Returns the batch rotated by one position.
struct Rotating(ToyEncoder);

impl EmbeddingProvider for Rotating {
    fn info(&self) -> &ProviderInfo {
        self.0.info()
    }

    fn embed_batch(&self, s: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let mut out = self.0.embed_batch(s)?;
        if !out.is_empty() {
            out.rotate_left(1);
        }
        Ok(out)
    }
}

/// Adds a different 1e-6 offset on every call.
struct Jittery(ToyEncoder, AtomicU64);

impl EmbeddingProvider for Jittery {
    fn info(&self) -> &ProviderInfo {
        self.0.info()
    }

    fn embed_batch(&self, s: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let call = self.1.fetch_add(1, Ordering::SeqCst) as f64;
        let jitter = 1e-6 * (1.0 + call % 3.0);
        Ok(self
            .0
            .embed_batch(s)?
            .into_iter()
            .map(|e| e.into_iter().map(|x| x + jitter).collect())
            .collect())
    }
}

struct Broken(ToyEncoder);

impl EmbeddingProvider for Broken {
    fn info(&self) -> &ProviderInfo {
        self.0.info()
    }

    fn embed_batch(&self, _: &[&[f64]]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Err(ProviderError::Model("weights unavailable".into()))
    }
}

#[test]
fn toy_server_passes_conformance() {
    let server = serve(Arc::new(toy()), "127.0.0.1:0").unwrap();
    let report = conformance_suite(&server.url());
    assert!(report.passed(), "{report:#?}");
    assert_eq!(report.checks.len(), 5);
    server.shutdown().unwrap();
}

#[test]
fn reordering_server_fails_only_batch_order() {
    let server = serve(Arc::new(Rotating(toy())), "127.0.0.1:0").unwrap();
    let report = conformance_suite(&server.url());
    assert_eq!(report.failed(), vec!["batch_order"], "{report:#?}");
}

#[test]
fn nondeterministic_server_fails_only_determinism() {
    let server = serve(Arc::new(Jittery(toy(), AtomicU64::new(0))), "127.0.0.1:0").unwrap();
    let report = conformance_suite(&server.url());
    assert_eq!(report.failed(), vec!["determinism"], "{report:#?}");
}

#[test]
fn unreachable_service_is_a_transport_outcome() {
    let report = conformance_suite("http://127.0.0.1:1");
    assert!(report.checks.iter().all(|c| c.outcome == CheckOutcome::Transport));
    let err = remote_provider("http://127.0.0.1:1").unwrap_err();
    assert!(err.is_transport(), "{err:?}");
}

#[test]
fn error_statuses_and_codes() {
    let enc = toy();
    let m = enc.info().input_shape.numel();
    let shape = enc.info().input_shape;
    let server = serve(Arc::new(enc), "127.0.0.1:0").unwrap();
    let url = format!("{}/v1/embed", server.url());

    let (s, body) = post(&url, "{not json");
    assert_eq!((s, error_of(&body).error.as_str()), (400, wire::ERR_MALFORMED_JSON));

    let bad = serde_json::json!({"version": 1, "request_id": "x", "shape": shape, "samples": ["%%%"]});
    let (s, body) = post(&url, &bad.to_string());
    assert_eq!((s, error_of(&body).error.as_str()), (400, wire::ERR_BAD_PAYLOAD));

    let (s, body) = post(&url, &request(&[vec![0.5; m + 1]], shape, PROTOCOL_VERSION));
    assert_eq!((s, error_of(&body).error.as_str()), (422, wire::ERR_SHAPE_MISMATCH));

    let wrong_shape = SampleShape::new(1, 8, 32);
    let (s, body) = post(&url, &request(&[vec![0.5; m]], wrong_shape, PROTOCOL_VERSION));
    assert_eq!((s, error_of(&body).error.as_str()), (422, wire::ERR_SHAPE_MISMATCH));

    let (s, body) = post(&url, &request(&[vec![0.5; m]], shape, 2));
    let e = error_of(&body);
    assert_eq!((s, e.error.as_str()), (426, wire::ERR_VERSION_MISMATCH));
    assert_eq!(e.server_version, Some(PROTOCOL_VERSION));
}

#[test]
fn only_api_paths_are_served() {
    let server = serve(Arc::new(toy()), "127.0.0.1:0").unwrap();
    let base = server.url();
    assert_eq!(get(&format!("{base}/v1/health")).0, 200);
    let (s, text) = get(&format!("{base}/v1/info"));
    assert_eq!(s, 200);
    let info: WireInfo = serde_json::from_str(&text).unwrap();
    assert_eq!(info.version, PROTOCOL_VERSION);
    for path in ["/", "/v1", "/v1/params", "/v1/checkpoint", "/admin", "/v2/info"] {
        assert_eq!(get(&format!("{base}{path}")).0, 404, "{path}");
    }
    assert_eq!(get(&format!("{base}/v1/embed")).0, 405);
}

#[test]
fn model_failures_map_to_model_errors() {
    let server = serve(Arc::new(Broken(toy())), "127.0.0.1:0").unwrap();
    let remote = remote_provider(&server.url()).unwrap();
    let x = vec![0.0; remote.info().input_shape.numel()];
    assert!(matches!(remote.embed_batch(&[&x]), Err(ProviderError::Model(_))));
}

#[test]
fn client_checks_shapes_before_sending() {
    let server = serve(Arc::new(toy()), "127.0.0.1:0").unwrap();
    let remote = remote_provider(&server.url()).unwrap();
    assert!(matches!(
        remote.embed_batch(&[&[0.0; 3]]),
        Err(ProviderError::ShapeMismatch { got: 3, .. })
    ));
}

#[test]
fn remote_embeddings_match_in_process() {
    let enc = toy();
    let server = serve(Arc::new(enc.clone()), "127.0.0.1:0").unwrap();
    let remote = remote_provider(&server.url()).unwrap();
    assert_eq!(remote.info(), enc.info());

    let data = generate_range(&SyntheticFamily::new(FamilyId::Checkers, 3), 0, 40, SampleShape::default()).unwrap();
    let refs: Vec<&[f64]> = data.samples().iter().map(|s| s.values.as_slice()).collect();
    let local = enc.embed_batch(&refs).unwrap();
    let wired = remote.embed_batch(&refs).unwrap();
    for (a, b) in local.iter().zip(&wired) {
        let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9);
    }

    assert_eq!(remote.embed_batch(&[]).unwrap(), enc.embed_batch(&[]).unwrap());
    let (s, text) = post(
        &format!("{}/v1/embed", server.url()),
        &request(&[], enc.info().input_shape, PROTOCOL_VERSION),
    );
    assert_eq!(s, 200);
    let resp: EmbedResponse = serde_json::from_str(&text).unwrap();
    assert!(resp.embeddings.is_empty());
    assert_eq!(resp.request_id, "t-1");
}

#[test]
fn verification_over_the_wire_matches_in_process() {
    let enc = toy();
    let server = serve(Arc::new(enc.clone()), "127.0.0.1:0").unwrap();
    let remote = remote_provider(&server.url()).unwrap();
    let fam = SyntheticFamily::new(FamilyId::Gratings, 5);
    let public = generate_range(&fam, 0, 96, SampleShape::default()).unwrap();
    let private = generate_range(&fam, 96, 48, SampleShape::default()).unwrap();
    let cfg = VerificationConfig {
        k: 4,
        n: 16,
        dt_size: 48,
        seed: 2,
        batch: 20,
        ..Default::default()
    };
    let dec = DecoderTrainConfig {
        epochs: 2,
        hidden: vec![16],
        ..Default::default()
    };
    let local = run_verification(&public, &private, &enc, DecoderSource::Train(dec.clone()), &cfg).unwrap();
    let wired = run_verification(&public, &private, &remote, DecoderSource::Train(dec), &cfg).unwrap();
    assert!((local.test.p - wired.test.p).abs() < 1e-9);
    assert_eq!(local.to_json(), wired.to_json());
}

#[test]
fn second_bind_reports_address_in_use() {
    let first = serve(Arc::new(toy()), "127.0.0.1:0").unwrap();
    let addr = first.addr().to_string();
    assert!(matches!(
        serve(Arc::new(toy()), &addr),
        Err(ServeError::AddrInUse { .. })
    ));
}

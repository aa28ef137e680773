use std::collections::HashSet;
use std::time::Duration;

use scgs_core::cam::Mask;
use scgs_core::dataset::{generate_synthetic, SynthConfig};
use scgs_core::synth::stub::{StubBehavior, StubServer};
use scgs_core::synth::{remote_generate, run_generation, EndpointConfig, GenMode, GenerationRequest, RemoteBackend};
use scgs_core::{DatasetManifest, Error, Provenance, Split};

fn data() -> DatasetManifest {
    generate_synthetic(&SynthConfig {
        n_train: 20,
        n_val: 2,
        n_test: 2,
        image_size: 16,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn request(m: &DatasetManifest, i: usize) -> GenerationRequest {
    let src = &m.entries[i];
    let mut mask = Mask::full(16, 16, false);
    for b in mask.bits.iter_mut().take(16 * 6) {
        *b = true;
    }
    GenerationRequest {
        request_id: format!("gen-{i:03}"),
        source_image_id: src.id.clone(),
        mask,
        target_label: src.label,
        prompt: m.class_names[src.label].clone(),
        seed: i as u64,
        mode: GenMode::Inpaint,
    }
}

fn config(server: &StubServer) -> EndpointConfig {
    EndpointConfig {
        url: server.url(),
        timeout_ms: 2_000,
        backoff_ms: 5,
        ..EndpointConfig::default()
    }
}

#[test]
fn echo_returns_source_without_warnings() {
    let m = data();
    let server = StubServer::start(StubBehavior::Echo).unwrap();
    let out = remote_generate(&request(&m, 2), &m.entries[2], &config(&server)).unwrap();
    assert_eq!(out.image.pixels, m.entries[2].pixels);
    assert!(out.warnings.is_empty());
    assert_eq!(out.retries, 0);
    assert_eq!(out.image.label, m.entries[2].label);
    assert_eq!(out.image.provenance, Provenance::Synthesized);
    assert_eq!(out.image.split, Split::Train);
}

#[test]
fn wrong_dims_is_protocol_error() {
    let m = data();
    let server = StubServer::start(StubBehavior::WrongDims).unwrap();
    let err = remote_generate(&request(&m, 0), &m.entries[0], &config(&server)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn two_failures_then_success() {
    let m = data();
    let server = StubServer::start(StubBehavior::FailTimes(2)).unwrap();
    let out = remote_generate(&request(&m, 1), &m.entries[1], &config(&server)).unwrap();
    assert_eq!(out.retries, 2);
    assert_eq!(server.calls(), 3);
}

#[test]
fn retries_are_bounded() {
    let m = data();
    let server = StubServer::start(StubBehavior::AlwaysFail).unwrap();
    let err = remote_generate(&request(&m, 1), &m.entries[1], &config(&server)).unwrap_err();
    assert!(matches!(err, Error::Generation(_)));
    assert_eq!(server.calls(), 4);
}

#[test]
fn malformed_responses_are_protocol_errors() {
    let m = data();
    for b in [StubBehavior::Malformed, StubBehavior::BadBase64, StubBehavior::WrongRequestId] {
        let server = StubServer::start(b.clone()).unwrap();
        let err = remote_generate(&request(&m, 1), &m.entries[1], &config(&server)).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{b:?}: {err}");
        assert_eq!(server.calls(), 1, "{b:?} must not be retried");
    }
}

#[test]
fn client_errors_are_not_retried() {
    let m = data();
    let server = StubServer::start(StubBehavior::Reject).unwrap();
    let err = remote_generate(&request(&m, 1), &m.entries[1], &config(&server)).unwrap_err();
    assert!(matches!(err, Error::Generation(_)));
    assert_eq!(server.calls(), 1);
}

#[test]
fn unreachable_endpoint_is_generation_error() {
    let m = data();
    let cfg = EndpointConfig {
        url: "http://127.0.0.1:9".into(),
        timeout_ms: 500,
        backoff_ms: 1,
        ..EndpointConfig::default()
    };
    assert!(matches!(
        remote_generate(&request(&m, 1), &m.entries[1], &cfg),
        Err(Error::Generation(_))
    ));
}

#[test]
fn timeout_counts_as_transient() {
    let m = data();
    let server = StubServer::start(StubBehavior::Delay(Duration::from_millis(400))).unwrap();
    let cfg = EndpointConfig {
        timeout_ms: 100,
        max_retries: 1,
        ..config(&server)
    };
    assert!(matches!(
        remote_generate(&request(&m, 1), &m.entries[1], &cfg),
        Err(Error::Generation(_))
    ));
    assert_eq!(server.calls(), 2);
}

#[test]
fn fidelity_mismatch_warns() {
    let m = data();
    let server = StubServer::start(StubBehavior::Invert).unwrap();
    let out = remote_generate(&request(&m, 3), &m.entries[3], &config(&server)).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("fidelity"));
}

#[test]
fn injected_failures_are_reported_by_id() {
    let m = data();
    let reqs: Vec<GenerationRequest> = (0..20).map(|i| request(&m, i)).collect();
    let failing: HashSet<String> = ["gen-004".to_string(), "gen-013".to_string()].into();
    let server = StubServer::start(StubBehavior::FailIds(failing.clone())).unwrap();
    let backend = RemoteBackend::new(config(&server));
    let (images, report) = run_generation(&reqs, &m, &backend, 4).unwrap();
    assert_eq!(images.len(), 18);
    let ids: HashSet<String> = report.failed_ids().into_iter().map(String::from).collect();
    assert_eq!(ids, failing);
    let order: Vec<&str> = images.iter().map(|i| i.id.as_str()).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);
}

#[test]
fn concurrency_limit_does_not_change_bytes() {
    let m = data();
    let reqs: Vec<GenerationRequest> = (0..12).map(|i| request(&m, i)).collect();
    let server = StubServer::start(StubBehavior::Echo).unwrap();
    let backend = RemoteBackend::new(config(&server));
    let (a, _) = run_generation(&reqs, &m, &backend, 1).unwrap();
    let (b, _) = run_generation(&reqs, &m, &backend, 8).unwrap();
    assert_eq!(a, b);
}

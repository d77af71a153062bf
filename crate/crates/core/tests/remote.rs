use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use groundkit::backends::stub::{StubReply, StubServer};
use groundkit::backends::{Backend, BackendError, ImageRef, RemoteClient, RemoteConfig};
use groundkit::trainer::PromptTemplate;

fn client(server: &StubServer, tweak: impl FnOnce(&mut RemoteConfig)) -> RemoteClient {
    let mut cfg = RemoteConfig::new(&server.url(), "stub");
    cfg.backoff_ms = 1;
    tweak(&mut cfg);
    RemoteClient::new(cfg, PromptTemplate::default()).unwrap()
}

const IMAGE: ImageRef<'static> = ImageRef {
    uri: "https://example.invalid/screen.png",
    width: 1280,
    height: 800,
};

/// Replies with `failures` 500s before answering.
fn flaky(failures: usize) -> StubServer {
    let seen = Arc::new(AtomicUsize::new(0));
    StubServer::start(move |_| {
        if seen.fetch_add(1, Ordering::SeqCst) < failures {
            StubReply::status(500)
        } else {
            StubReply::chat("(10, 20)")
        }
    })
}

#[test]
fn retries_then_succeeds() {
    let server = flaky(2);
    let c = client(&server, |cfg| cfg.max_retries = 2);
    assert_eq!(c.predict(&IMAGE, "ok").unwrap(), "(10, 20)");
    assert_eq!(server.hits(), 3);
}

#[test]
fn exhausted_retries_is_transport_error() {
    let server = flaky(3);
    let c = client(&server, |cfg| cfg.max_retries = 2);
    let err = c.predict(&IMAGE, "ok").unwrap_err();
    assert!(matches!(err, BackendError::Transport { retries: 2, .. }), "{err:?}");
    assert!(err.is_transport());
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(|_| StubReply::status(401));
    let c = client(&server, |cfg| cfg.max_retries = 5);
    let err = c.predict(&IMAGE, "ok").unwrap_err();
    assert!(err.to_string().contains("401"), "{err}");
    assert_eq!(server.hits(), 1);
}

#[test]
fn slow_endpoint_times_out() {
    let server = StubServer::start(|_| StubReply::chat("(1, 1)").delayed(Duration::from_millis(400)));
    let c = client(&server, |cfg| {
        cfg.timeout_ms = 50;
        cfg.max_retries = 1;
    });
    let err = c.predict(&IMAGE, "ok").unwrap_err();
    assert!(matches!(err, BackendError::Timeout { retries: 1 }), "{err:?}");
    assert_eq!(server.hits(), 2);
}

#[test]
fn request_carries_model_prompt_and_token() {
    let server = StubServer::start(|req| {
        assert_eq!(req.body["model"], "stub");
        assert_eq!(req.authorization.as_deref(), Some("Bearer t0k"));
        assert_eq!(req.image_url.as_deref(), Some("https://example.invalid/screen.png"));
        StubReply::chat(&req.text)
    });
    let c = client(&server, |cfg| cfg.api_key = Some("t0k".into()));
    let echoed = c.predict(&IMAGE, "open the settings menu").unwrap();
    assert!(echoed.contains("open the settings menu"), "{echoed}");
}

#[test]
fn malformed_body_is_format_error() {
    let server = StubServer::start(|_| StubReply {
        status: 200,
        body: "{\"choices\": []}".into(),
        delay: Duration::ZERO,
    });
    let err = client(&server, |_| {}).predict(&IMAGE, "ok").unwrap_err();
    assert!(matches!(err, BackendError::Format(_)), "{err:?}");
    assert!(!err.is_transport());
}

#[test]
fn oversized_image_rejected_before_sending() {
    let server = StubServer::start(|_| StubReply::chat("(1, 1)"));
    let c = client(&server, |cfg| cfg.max_image_pixels = Some(1000));
    assert!(matches!(c.predict(&IMAGE, "ok"), Err(BackendError::Capability(_))));
    assert_eq!(server.hits(), 0);
}

//! Remote policy protocol over real sockets and the in-process mock.

use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use marl_evo::config::load_config;
use marl_evo::grpo::{BatchRecord, UpdateMode};
use marl_evo::model::Observation;
use marl_evo::policy::remote::decode_response;
use marl_evo::policy::{MockBehavior, MockPolicyServer, PolicyError, RemotePolicy, RetryPolicy, TcpTransport};
use marl_evo::trainer::Trainer;

fn serve(server: MockPolicyServer) -> (Arc<MockPolicyServer>, String) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let address = listener.local_addr().unwrap().to_string();
    let server = Arc::new(server);
    server.clone().serve_tcp(listener);
    (server, address)
}

fn client(address: &str, attempts: u32) -> RemotePolicy {
    RemotePolicy::new(Arc::new(TcpTransport::new(address, Duration::from_secs(5))))
        .with_retry(RetryPolicy { max_attempts: attempts, initial_backoff: Duration::from_millis(1) })
}

fn fixed() -> MockPolicyServer {
    MockPolicyServer::new(MockBehavior::Fixed { text: "<answer>42</answer>".into(), logprob: -0.5 })
}

#[test]
fn samples_arrive_over_tcp_in_order() {
    let (server, address) = serve(fixed());
    let obs = Observation::bare("math_agent", "add 40 and 2");
    let out = client(&address, 1).sample("math_agent", &obs, 3, 1.0, Some(7)).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|a| a.text == "<answer>42</answer>" && a.logprob == -0.5));
    assert_eq!(server.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn transport_failures_are_retried() {
    let server = fixed();
    server.transient_failures.store(2, Ordering::SeqCst);
    let (server, address) = serve(server);
    let obs = Observation::bare("qa_agent", "q");
    assert_eq!(client(&address, 3).sample("qa_agent", &obs, 2, 1.0, None).unwrap().len(), 2);
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn retries_are_bounded() {
    let server = fixed();
    server.transient_failures.store(5, Ordering::SeqCst);
    let (server, address) = serve(server);
    let obs = Observation::bare("qa_agent", "q");
    let err = client(&address, 3).sample("qa_agent", &obs, 2, 1.0, None).unwrap_err();
    assert!(matches!(err, PolicyError::Transport(_)), "{err:?}");
    assert_eq!(server.requests.load(Ordering::SeqCst), 3);
}

#[test]
fn count_mismatch_is_a_protocol_error_and_not_retried() {
    let mut server = fixed();
    server.drop_candidates = 1;
    let (server, address) = serve(server);
    let obs = Observation::bare("qa_agent", "q");
    match client(&address, 3).sample("qa_agent", &obs, 4, 1.0, None) {
        Err(PolicyError::Protocol { message, raw }) => {
            assert!(message.contains("count"), "{message}");
            assert!(raw.contains("candidates"), "{raw}");
        }
        other => panic!("expected a protocol error, got {other:?}"),
    }
    assert_eq!(server.requests.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_server_reports_transport_error() {
    let address = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().to_string()
    };
    let obs = Observation::bare("qa_agent", "q");
    let err = client(&address, 2).sample("qa_agent", &obs, 1, 1.0, None).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
}

#[test]
fn malformed_replies_are_rejected() {
    let bad_logprob = r#"{"candidates":[{"text":"x","logprob":0.5}]}"#;
    assert!(matches!(decode_response(bad_logprob, 1), Err(PolicyError::Protocol { .. })));
    assert!(matches!(decode_response("not json", 1), Err(PolicyError::Protocol { .. })));
    let ok = r#"{"candidates":[{"text":"x","logprob":-1.0}]}"#;
    assert_eq!(decode_response(ok, 1).unwrap()[0].text, "x");
}

#[test]
fn remote_step_emits_a_batch_with_group_advantages() {
    let cfg = load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/remote-mock.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.batch_dir = Some(dir.path().to_path_buf());
    let (train, _) = trainer.datasets().unwrap();
    let out = trainer.train_step(&train[0], 0, 0).unwrap();
    assert!(out.update.groups.iter().all(|g| g.mode == UpdateMode::Emitted));
    let path = out.update.batch_file.expect("batch file");
    assert_eq!(path.file_name().unwrap().to_string_lossy(), format!("batch-step-{:06}.jsonl", trainer.step));
    let records: Vec<BatchRecord> =
        std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, out.update.batch);
    let expected: Vec<f64> = out.update.groups.iter().flat_map(|g| g.advantages.clone()).collect();
    let got: Vec<f64> = records.iter().map(|r| r.advantage).collect();
    // every member of the mock's groups carries an action
    assert_eq!(got, expected);
    assert!(trainer.mock_server().unwrap().requests.load(Ordering::SeqCst) > 0);
}

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use fleetplan::backend::{fixture_key, fixture_path, generate_plan, BackendConfig, BackendError};
use fleetplan::harness::{run_suite, RunOptions, Suite};
use fleetplan_core::ExecMode;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<(String, String)>,
    body: Value,
}

/// Answers each request with the next `(status, body)`; the last one repeats.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let Ok(stream) = stream else { break };
            let (status, body) = replies[n.min(replies.len() - 1)].clone();
            if let Some(s) = handle(stream, status, &body) {
                log.lock().unwrap().push(s);
            }
        }
    });
    (url, seen)
}

fn handle(stream: TcpStream, status: u16, body: &str) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut headers = Vec::new();
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once(':')?;
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let len: usize = headers.iter().find(|(k, _)| k == "content-length").map(|(_, v)| v.parse().unwrap()).unwrap_or(0);
    let mut buf = vec![0; len];
    reader.read_exact(&mut buf).ok()?;
    let mut w = stream;
    let _ = write!(
        w,
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    Some(Seen {
        headers,
        body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
    })
}

fn reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn fast(url: &str) -> BackendConfig {
    BackendConfig {
        backoff_ms: 5,
        timeout_secs: 5.0,
        ..BackendConfig::http(url, "test-model")
    }
}

const PROMPT: &str = "## Output format\n\nINSTRUCTION: dig\n";

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = stub(vec![(503, "{}".into()), (429, "{}".into()), (200, reply("{\"tasks\": []}"))]);
    let logs = tempfile::tempdir().unwrap();
    let mut cfg = fast(&url);
    cfg.api_key = Some("sk-secret".into());
    cfg.log_dir = Some(logs.path().to_path_buf());
    let text = generate_plan(PROMPT, &cfg, 0).unwrap();
    assert_eq!(text, "{\"tasks\": []}");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let auth = seen[0].headers.iter().find(|(k, _)| k == "authorization").unwrap();
    assert_eq!(auth.1, "Bearer sk-secret");
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].body["messages"][0]["content"], PROMPT);

    let log = std::fs::read_to_string(logs.path().join("backend.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(!log.contains("sk-secret"));
    assert!(log.contains("[REDACTED]"));
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(401, "{}".into())]);
    let err = generate_plan(PROMPT, &fast(&url), 0).unwrap_err();
    assert_eq!(err.code(), "BACKEND_REJECTED");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = stub(vec![(500, "{}".into())]);
    let mut cfg = fast(&url);
    cfg.max_retries = 2;
    let err = generate_plan(PROMPT, &cfg, 0).unwrap_err();
    assert_eq!(err.code(), "BACKEND_UNREACHABLE");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unreachable_endpoint() {
    // bind then drop to get a port nobody listens on
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut cfg = fast(&format!("http://127.0.0.1:{port}/v1/chat/completions"));
    cfg.max_retries = 1;
    let err = generate_plan(PROMPT, &cfg, 0).unwrap_err();
    assert!(matches!(err, BackendError::Unreachable(_)), "{err}");
}

#[test]
fn silent_endpoint_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/chat", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        let held: Vec<_> = listener.incoming().take(4).collect();
        std::thread::sleep(Duration::from_secs(10));
        drop(held);
    });
    let mut cfg = fast(&url);
    cfg.timeout_secs = 0.3;
    cfg.max_retries = 1;
    let t0 = Instant::now();
    let err = generate_plan(PROMPT, &cfg, 0).unwrap_err();
    assert_eq!(err.code(), "BACKEND_TIMEOUT");
    assert!(t0.elapsed() < Duration::from_secs(5));
}

#[test]
fn reply_without_content_is_rejected() {
    let (url, _) = stub(vec![(200, "{\"id\": 1}".into())]);
    assert_eq!(generate_plan(PROMPT, &fast(&url), 0).unwrap_err().code(), "BACKEND_REJECTED");
}

#[test]
fn per_trial_fixture_overrides_default() {
    let dir = tempfile::tempdir().unwrap();
    let k = fixture_key("dig it");
    std::fs::write(dir.path().join(format!("{k}.txt")), "base").unwrap();
    std::fs::write(dir.path().join(format!("{k}.3.txt")), "third").unwrap();
    assert_eq!(fixture_path(dir.path(), "dig   it", 3).unwrap().file_name().unwrap(), format!("{k}.3.txt").as_str());
    let cfg = BackendConfig::scripted(dir.path());
    assert_eq!(generate_plan("INSTRUCTION: dig it", &cfg, 0).unwrap(), "base");
    assert_eq!(generate_plan("INSTRUCTION: dig it", &cfg, 3).unwrap(), "third");
    assert_eq!(generate_plan("INSTRUCTION: other", &cfg, 0).unwrap_err().code(), "NO_FIXTURE");
    assert_eq!(generate_plan("no instruction line", &cfg, 0).unwrap_err().code(), "NO_FIXTURE");
}

#[test]
fn suite_runs_against_chat_backend() {
    // the stub answers every request with the golden L1-T1 plan
    let plan = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/testdata/golden/l1_t1.json")).unwrap();
    let (url, seen) = stub(vec![(200, reply(&plan))]);
    let suite = Suite::load(concat!(env!("CARGO_MANIFEST_DIR"), "/testdata/suite.json").as_ref()).unwrap();
    let opts = RunOptions {
        only: vec!["L1-T1".into()],
        trials: Some(3),
        parallel: false,
    };
    let report = run_suite(&suite, &fast(&url), ExecMode::DepAware, &opts).unwrap();
    assert_eq!(report.records[0].sr, 1.0);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let prompt = seen[0].body["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("INSTRUCTION: Send a dump truck over to the puddle"));
    assert!(prompt.contains("## Available functions"));
}

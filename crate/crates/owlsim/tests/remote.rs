//! Wire-level tests for the remote role backend against a scripted HTTP stub,
//! plus loop-level checks for manager retry behavior.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use owlsim::agents::{
    run_episode, AgentBackend, BackendError, EpisodeConfig, KnowledgeTable, ManagerUpdate,
    OracleBackend, PolicyDriver, PolicyEmission, RemoteBackend, RoleBackends, WorkerDecision,
};
use owlsim::fixtures;
use owlsim::gui_sim::{Action, Env, Observation};
use owlsim::taskgen::generate_pool;
use owlsim::trajectory::{ActionRecord, Judgment, Outcome, ReflectionFeedback};

/// Canned reply for one request, served in order.
enum Reply {
    Json(Value),
    Status(u16),
    Garbage,
}

/// Minimal single-threaded HTTP stub. Serves the scripted replies one per
/// connection and records every request body it saw.
struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Stub {
    fn start(script: Vec<Reply>) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handle = thread::spawn(move || {
            for reply in script {
                let (mut conn, _) = match listener.accept() {
                    Ok(c) => c,
                    Err(_) => return,
                };
                let body = read_request(&mut conn);
                if let Ok(v) = serde_json::from_slice::<Value>(&body) {
                    seen.lock().unwrap().push(v);
                }
                let response = match reply {
                    Reply::Json(v) => {
                        let payload = v.to_string();
                        format!(
                            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n\
                             Content-Length: {}\r\nConnection: close\r\n\r\n{}",
                            payload.len(),
                            payload
                        )
                    }
                    Reply::Status(code) => format!(
                        "HTTP/1.1 {code} Oops\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
                    ),
                    Reply::Garbage => {
                        let payload = "][ not json ][";
                        format!(
                            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\n\
                             Content-Length: {}\r\nConnection: close\r\n\r\n{}",
                            payload.len(),
                            payload
                        )
                    }
                };
                let _ = conn.write_all(response.as_bytes());
            }
        });
        Stub { url, requests, handle: Some(handle) }
    }

    fn roles_seen(&self) -> Vec<String> {
        self.requests
            .lock()
            .unwrap()
            .iter()
            .filter_map(|v| v.get("role").and_then(Value::as_str).map(str::to_string))
            .collect()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn read_request(conn: &mut std::net::TcpStream) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        let n = conn.read(&mut chunk).unwrap();
        if n == 0 {
            return Vec::new();
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
    let length: usize = headers
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    while buf.len() < header_end + length {
        let n = conn.read(&mut chunk).unwrap();
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    buf[header_end..].to_vec()
}

fn sample_observation() -> Observation {
    let world = fixtures::fixture_world();
    let mut env = Env::new(world);
    env.reset(&[]).unwrap()
}

#[test]
fn manager_init_roundtrip_and_missing_subgoals() {
    let stub = Stub::start(vec![
        Reply::Json(json!({"subgoals": ["open the app", "place the order"]})),
        Reply::Json(json!({"plan": "wrong key"})),
    ]);
    let obs = sample_observation();
    let mut backend = RemoteBackend::new(&stub.url);
    let subgoals = backend.manager_init("order takeout", &obs, "").unwrap();
    assert_eq!(subgoals, vec!["open the app", "place the order"]);
    let err = backend.manager_init("order takeout", &obs, "").unwrap_err();
    assert!(matches!(err, BackendError::Remote(_)));
    assert_eq!(stub.roles_seen(), vec!["manager_init", "manager_init"]);
}

#[test]
fn manager_update_reports_dropped_pending_as_completed() {
    let stub = Stub::start(vec![Reply::Json(json!({"subgoals": ["b"]}))]);
    let obs = sample_observation();
    let mut backend = RemoteBackend::new(&stub.url);
    let prev = ActionRecord {
        thought: "t".into(),
        action: Action::Wait,
        summary: "subgoal: a | status: done | waited".into(),
    };
    let feedback =
        ReflectionFeedback { judgment: Judgment::Success, feedback: "fine".into() };
    let update: ManagerUpdate = backend
        .manager_update("i", &obs, &prev, &feedback, &["a".into(), "b".into()], &[])
        .unwrap();
    assert_eq!(update.pending, vec!["b"]);
    assert_eq!(update.completed, vec!["a"]);
}

#[test]
fn worker_degrades_to_malformed_on_bad_responses() {
    let stub = Stub::start(vec![
        Reply::Json(json!({
            "action": {"Click": {"widget_id": "to_menu"}},
            "thought": "go",
            "summary": "subgoal: open | status: done | clicked to_menu",
        })),
        Reply::Garbage,
        Reply::Status(500),
        Reply::Json(json!({"action": {"Fly": {}}})),
    ]);
    let obs = sample_observation();
    let mut backend = RemoteBackend::new(&stub.url);
    let notes = BTreeMap::new();
    match backend.worker_act("i", &obs, &[], None, &notes).unwrap() {
        WorkerDecision::Act(rec) => {
            assert_eq!(rec.action, Action::Click { widget_id: "to_menu".into() });
            assert_eq!(rec.thought, "go");
        }
        other => panic!("expected Act, got {other:?}"),
    }
    for label in ["garbage body", "http 500", "unknown action"] {
        let decision = backend.worker_act("i", &obs, &[], None, &notes).unwrap();
        assert!(
            matches!(decision, WorkerDecision::Malformed { .. }),
            "{label}: expected malformed, got {decision:?}"
        );
    }
}

#[test]
fn reflector_requires_judgment_and_failure_feedback() {
    let stub = Stub::start(vec![
        Reply::Json(json!({"judgment": "SUCCESS", "feedback": "done"})),
        Reply::Json(json!({"judgment": "FAILURE", "feedback": ""})),
        Reply::Json(json!({"feedback": "no verdict"})),
    ]);
    let obs = sample_observation();
    let mut backend = RemoteBackend::new(&stub.url);
    let act = ActionRecord {
        thought: String::new(),
        action: Action::Wait,
        summary: "subgoal: - | status: blocked | waited".into(),
    };
    let ok = backend.reflect("i", &obs, &obs, &act).unwrap();
    assert_eq!(ok.judgment, Judgment::Success);
    assert!(backend.reflect("i", &obs, &obs, &act).is_err());
    assert!(backend.reflect("i", &obs, &obs, &act).is_err());
}

#[test]
fn notetaker_and_policy_payloads() {
    let stub = Stub::start(vec![
        Reply::Json(json!({"notes": {"promo": "applied"}})),
        Reply::Json(json!({"verdict": "no notes key"})),
        Reply::Json(json!({"action": "Wait", "thought": "idle", "conclusion": "waited"})),
        Reply::Status(502),
    ]);
    let obs = sample_observation();
    let mut backend = RemoteBackend::new(&stub.url);
    let notes = backend.take_notes(&obs).unwrap();
    assert_eq!(notes.get("promo").map(String::as_str), Some("applied"));
    assert!(backend.take_notes(&obs).unwrap().is_empty());

    let apps = fixtures::fixture_world().app_names();
    match backend.decide("i", &[], &obs, &apps).unwrap() {
        PolicyEmission::Act { action, conclusion, log_prob, .. } => {
            assert_eq!(action, Action::Wait);
            assert_eq!(conclusion.as_deref(), Some("waited"));
            assert!(log_prob.is_none());
        }
        other => panic!("expected Act, got {other:?}"),
    }
    assert!(matches!(
        backend.decide("i", &[], &obs, &apps).unwrap(),
        PolicyEmission::Malformed { .. }
    ));
}

/// Manager wrapper that fails a fixed number of calls before delegating.
struct FlakyManager {
    inner: OracleBackend,
    failures_left: u32,
    init_calls: u32,
}

impl AgentBackend for FlakyManager {
    fn manager_init(
        &mut self,
        instruction: &str,
        s0: &Observation,
        k_rag: &str,
    ) -> Result<Vec<String>, BackendError> {
        self.init_calls += 1;
        if self.failures_left > 0 {
            self.failures_left -= 1;
            return Err(BackendError::Remote("transient".into()));
        }
        self.inner.manager_init(instruction, s0, k_rag)
    }

    fn manager_update(
        &mut self,
        instruction: &str,
        obs: &Observation,
        prev_action: &ActionRecord,
        feedback: &ReflectionFeedback,
        pending: &[String],
        completed: &[String],
    ) -> Result<ManagerUpdate, BackendError> {
        self.inner.manager_update(instruction, obs, prev_action, feedback, pending, completed)
    }

    fn worker_act(
        &mut self,
        instruction: &str,
        obs: &Observation,
        pending: &[String],
        last_feedback: Option<&ReflectionFeedback>,
        notes: &BTreeMap<String, String>,
    ) -> Result<WorkerDecision, BackendError> {
        self.inner.worker_act(instruction, obs, pending, last_feedback, notes)
    }

    fn reflect(
        &mut self,
        instruction: &str,
        obs_before: &Observation,
        obs_after: &Observation,
        act: &ActionRecord,
    ) -> Result<ReflectionFeedback, BackendError> {
        self.inner.reflect(instruction, obs_before, obs_after, act)
    }

    fn take_notes(&mut self, obs: &Observation) -> Result<BTreeMap<String, String>, BackendError> {
        self.inner.take_notes(obs)
    }
}

fn episode_with_manager_failures(failures: u32) -> Outcome {
    let world = fixtures::fixture_world();
    let task = generate_pool(&world, 1, 9, 3).unwrap().remove(0);
    let mut backends = RoleBackends::oracle(&task, world.clone());
    backends.manager = Box::new(FlakyManager {
        inner: OracleBackend::new(task.clone(), world.clone()),
        failures_left: failures,
        init_calls: 0,
    });
    let mut env = Env::new(world);
    run_episode(
        &task,
        &mut env,
        &mut backends,
        &KnowledgeTable::default(),
        &EpisodeConfig::default(),
        "flaky",
    )
    .outcome
}

#[test]
fn manager_init_retries_once_then_aborts() {
    // One transient failure: the retry recovers and the episode succeeds.
    assert_eq!(episode_with_manager_failures(1), Outcome::Succeeded);
    // Two failures exhaust the single retry and the episode is abandoned.
    assert_eq!(episode_with_manager_failures(2), Outcome::Failed);
}

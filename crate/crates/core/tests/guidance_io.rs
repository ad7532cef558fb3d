use std::cell::RefCell;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::rc::Rc;
use std::sync::mpsc;
use std::thread;

use memshape::gridworld::{reset, GridSpec};
use memshape::guidance::{
    task_description, Completion, FixtureEntry, GuidanceError, GuidanceProvider, HttpProvider, HttpSettings, QueryContext,
    Recorder, ScriptedOracle,
};
use memshape::trainer::{train_in_memory, EnvKind, ProviderChoice, TrainConfig, Trainer};

/// Serves `responses` (status, body) to successive connections and sends
/// each request body back on the channel.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            tx.send((headers, String::from_utf8(req).unwrap())).unwrap();
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn context() -> QueryContext {
    let (env, _) = reset(&GridSpec::doorkey(6), 1).unwrap();
    QueryContext::online(task_description(&env), env.family, env.task, &[env.observe()], env.subgoal_phase())
}

#[test]
fn http_provider_parses_choices_and_logprobs() {
    let body = serde_json::json!({
        "choices": [
            {"message": {"content": "subgoal: go to key\nplan: forward"},
             "logprobs": {"content": [{"logprob": -0.1}, {"logprob": -0.2}]}},
            {"message": {"content": "control: toggle"}, "logprobs": null}
        ]
    })
    .to_string();
    let (url, rx) = serve(vec![(200, body)]);
    let settings = HttpSettings { base_url: url, model: "m".into(), max_retries: 0, timeout_secs: 5, ..Default::default() };
    let mut p = HttpProvider::new(settings).unwrap();
    let out = p.complete(&context(), 2).unwrap();
    assert_eq!(
        out,
        vec![
            Completion { text: "subgoal: go to key\nplan: forward".into(), logprobs: Some(vec![-0.1, -0.2]) },
            Completion { text: "control: toggle".into(), logprobs: None },
        ]
    );
    let (headers, req) = rx.recv().unwrap();
    assert!(headers.starts_with("POST /chat/completions"));
    let req: serde_json::Value = serde_json::from_str(&req).unwrap();
    assert_eq!(req["n"], 2);
    assert_eq!(req["model"], "m");
    assert!(req["messages"][0]["content"].as_str().unwrap().contains("gridworld"));
}

#[test]
fn http_errors_retry_then_fail() {
    let ok = serde_json::json!({"choices": [{"message": {"content": "plan: forward"}}]}).to_string();
    let (url, _rx) = serve(vec![(500, "{}".into()), (200, ok)]);
    let settings = HttpSettings { base_url: url.clone(), max_retries: 1, timeout_secs: 5, ..Default::default() };
    let out = HttpProvider::new(settings).unwrap().complete(&context(), 1).unwrap();
    assert_eq!(out[0].text, "plan: forward");

    let (url, _rx) = serve(vec![(429, "{}".into())]);
    let settings = HttpSettings { base_url: url, max_retries: 0, timeout_secs: 5, ..Default::default() };
    let err = HttpProvider::new(settings).unwrap().complete(&context(), 1).unwrap_err();
    assert!(matches!(err, GuidanceError::Transport(ref m) if m.contains("429")), "{err}");
}

/// Shares one recorder between the trainer and the test.
struct Shared(Rc<RefCell<Recorder<ScriptedOracle>>>);

impl GuidanceProvider for Shared {
    fn id(&self) -> &str {
        "oracle"
    }

    fn complete(&mut self, ctx: &QueryContext, k: usize) -> Result<Vec<Completion>, GuidanceError> {
        self.0.borrow_mut().complete(ctx, k)
    }
}

fn guided_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.env.kind = EnvKind::Doorkey;
    c.env.train_seeds = vec![0, 1, 2, 3];
    c.env.eval_seeds = vec![50];
    c.ppo.batch_size = 256;
    c.guidance.provider = ProviderChoice::Oracle;
    c.guidance.offline_prior = true;
    c.guidance.online_cap = Some(5);
    c.guidance.trigger_threshold = 2;
    c.guidance.offline_layouts = Some(1);
    c.memgraph.insert_agent_segments = false;
    c.run.iterations = 10;
    c.run.eval_interval = 0;
    c
}

#[test]
fn recorded_queries_replay_identically() {
    let cfg = guided_config();
    let rec = Rc::new(RefCell::new(Recorder::new(ScriptedOracle::new(0.0, 1))));
    let live = Trainer::with_provider(cfg.clone(), Some(Box::new(Shared(rec.clone())))).unwrap().run().unwrap();
    let entries: Vec<FixtureEntry> = rec.borrow().entries.clone();
    assert!(entries.len() >= 2, "expected offline and online queries: {:?}", live.log);
    assert!(live.budget.online_used > 0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixtures.json");
    std::fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();
    let mut replay_cfg = cfg;
    replay_cfg.guidance.provider = ProviderChoice::Fixture;
    replay_cfg.guidance.fixture_file = Some(path);
    let replay = train_in_memory(replay_cfg).unwrap();
    assert_eq!(live.metrics, replay.metrics);
    assert_eq!(live.policy, replay.policy);
}

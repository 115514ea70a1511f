use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::thread;

use curate::protocol::conformance::{self, Step};
use curate::protocol::{serve_scorer, ServeOptions};
use curate::scoring::{NgramLM, UniformScorer};
use curate::TokenizerConfig;

fn transcript() -> Vec<Step> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scorer_transcript.jsonl");
    let mut steps = conformance::load_transcript(path).unwrap();
    // The over-length step carries a placeholder sized against the server limit.
    for s in &mut steps {
        if let Step::ExpectError { request } = s {
            if request["continuation"] == "WORDS_OVER_LIMIT" {
                request["continuation"] = "word ".repeat(100).into();
            }
        }
    }
    steps
}

fn replay<F>(serve: F) -> conformance::ConformanceReport
where
    F: FnOnce(BufReader<UnixStream>, UnixStream) + Send + 'static,
{
    let (client, server) = UnixStream::pair().unwrap();
    let reader = BufReader::new(server.try_clone().unwrap());
    let handle = thread::spawn(move || serve(reader, server));
    let report = conformance::run(BufReader::new(client.try_clone().unwrap()), client, &transcript());
    drop(handle);
    report
}

#[test]
fn reference_servers_conform() {
    let opts = ServeOptions { max_len: 200 };
    let corpus = ["the patient has a fever", "the patient has a cough", "a fever is a high body temperature"];
    let lm = NgramLM::<f64>::build(corpus, 2, 1.0, TokenizerConfig::default()).unwrap();
    let report = replay(move |r, w| serve_scorer(&lm, r, w, opts).unwrap());
    assert!(report.passed(), "{:#?}", report.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    assert!(report.model.as_deref().unwrap().starts_with("ngram:order=2"));
    assert!(report.checks.len() > 20);

    let report = replay(move |r, w| {
        serve_scorer::<f64, _, _, _>(&UniformScorer::new(100, TokenizerConfig::default()), r, w, opts).unwrap()
    });
    assert!(report.passed());
}

fn fake_server(
    handshake: &'static str,
    reply: fn(&serde_json::Value) -> String,
) -> impl FnOnce(BufReader<UnixStream>, UnixStream) + Send {
    move |reader, mut writer| {
        writeln!(writer, "{handshake}").unwrap();
        for line in reader.lines() {
            let line = line.unwrap();
            let v: serde_json::Value = serde_json::from_str(&line).unwrap_or(serde_json::Value::Null);
            if writeln!(writer, "{}", reply(&v)).is_err() {
                break;
            }
        }
    }
}

#[test]
fn misbehaving_servers_fail() {
    // Positive log-probabilities and a wrong token count.
    let report = replay(fake_server(r#"{"protocol":1,"model":"bad"}"#, |v| {
        serde_json::json!({"id": v["id"], "tokens": ["a"], "logprobs": [0.5]}).to_string()
    }));
    assert!(!report.passed());
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert!(failed.iter().any(|n| n.ends_with("shape law")));
    assert!(failed.iter().any(|n| n.ends_with("non-positive logprobs")));
    assert!(failed.iter().any(|n| n.ends_with("error reported")));

    // Wrong ids.
    let report = replay(fake_server(r#"{"protocol":1,"model":"bad"}"#, |_| {
        serde_json::json!({"id": "zzz", "tokens": ["a"], "logprobs": [-1.0]}).to_string()
    }));
    assert!(report.checks.iter().any(|c| c.name.ends_with("id echo") && !c.passed));

    // Unsupported protocol version stops the run after the handshake check.
    let report = replay(fake_server(r#"{"protocol":9,"model":"future"}"#, |_| String::new()));
    assert_eq!(report.checks.len(), 1);
    assert!(!report.checks[0].passed);
}

//! Line-delimited JSON request/response protocol shared by external scorers,
//! raters and judges.
//!
//! The server's first line is a handshake `{"protocol": 1, "model": "<identity>"}`.
//! After that each request is one JSON object with an `"id"`; the matching
//! response echoes the id exactly and either carries the payload or an
//! `"error"` string. Responses may arrive out of order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::num::Real;
use crate::scoring::{ScoreError, Scorer};

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

struct Inbox {
    rx: Receiver<Result<String, String>>,
    parked: HashMap<String, Value>,
    closed: Option<String>,
}

/// Client side of the protocol over any byte stream pair.
pub struct LineClient {
    writer: Mutex<Box<dyn Write + Send>>,
    inbox: Mutex<Inbox>,
    model: String,
    timeout: Duration,
    next_id: AtomicU64,
    child: Option<Mutex<Child>>,
}

impl LineClient {
    /// Wraps a reader/writer pair and performs the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, ScoreError>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                let msg = line.map_err(|e| e.to_string());
                let stop = msg.is_err();
                if tx.send(msg).is_err() || stop {
                    break;
                }
            }
        });
        let first = match rx.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(ScoreError::Transport(e)),
            Err(RecvTimeoutError::Timeout) => return Err(ScoreError::Timeout { request_id: "handshake".into() }),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(ScoreError::Transport("server closed before handshake".into()))
            }
        };
        let model = parse_handshake(&first)?;
        Ok(LineClient {
            writer: Mutex::new(Box::new(writer)),
            inbox: Mutex::new(Inbox { rx, parked: HashMap::new(), closed: None }),
            model,
            timeout,
            next_id: AtomicU64::new(0),
            child: None,
        })
    }

    /// Connects to `tcp://host:port`, `unix:/path` or `exec:<command> [args...]`.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ScoreError> {
        let transport = |e: std::io::Error| ScoreError::Transport(format!("{endpoint}: {e}"));
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = TcpStream::connect(addr).map_err(transport)?;
            let reader = BufReader::new(stream.try_clone().map_err(transport)?);
            return Self::from_streams(reader, stream, timeout);
        }
        #[cfg(unix)]
        if let Some(path) = endpoint.strip_prefix("unix:") {
            let stream = std::os::unix::net::UnixStream::connect(path.trim_start_matches("//")).map_err(transport)?;
            let reader = BufReader::new(stream.try_clone().map_err(transport)?);
            return Self::from_streams(reader, stream, timeout);
        }
        if let Some(cmdline) = endpoint.strip_prefix("exec:") {
            let mut parts = cmdline.split_whitespace();
            let program = parts.next().ok_or_else(|| ScoreError::Transport("empty exec endpoint".into()))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(transport)?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            let mut client = Self::from_streams(stdout, stdin, timeout)?;
            client.child = Some(Mutex::new(child));
            return Ok(client);
        }
        Err(ScoreError::Transport(format!("unsupported endpoint '{endpoint}'")))
    }

    /// Identity announced in the handshake.
    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn send(&self, request: &Value) -> Result<(), ScoreError> {
        let mut line = serde_json::to_vec(request).map_err(|e| ScoreError::Transport(e.to_string()))?;
        line.push(b'\n');
        let mut w = self.writer.lock().expect("writer lock");
        w.write_all(&line).and_then(|_| w.flush()).map_err(|e| ScoreError::Transport(e.to_string()))
    }

    fn wait_for(&self, id: &str, deadline: Instant) -> Result<Value, ScoreError> {
        let mut inbox = self.inbox.lock().expect("inbox lock");
        loop {
            if let Some(v) = inbox.parked.remove(id) {
                return Ok(v);
            }
            if let Some(reason) = &inbox.closed {
                return Err(ScoreError::Transport(reason.clone()));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            match inbox.rx.recv_timeout(left) {
                Ok(Ok(line)) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let v: Value = serde_json::from_str(&line).map_err(|e| ScoreError::Protocol {
                        request_id: Some(id.to_string()),
                        message: format!("unparseable response line: {e}"),
                    })?;
                    match v.get("id").and_then(Value::as_str) {
                        Some(rid) if rid == id => return Ok(v),
                        Some(rid) => {
                            inbox.parked.insert(rid.to_string(), v);
                        }
                        None => {
                            return Err(ScoreError::Protocol {
                                request_id: Some(id.to_string()),
                                message: format!("response without string id: {line}"),
                            })
                        }
                    }
                }
                Ok(Err(e)) => {
                    inbox.closed = Some(e.clone());
                    return Err(ScoreError::Transport(e));
                }
                Err(RecvTimeoutError::Timeout) => return Err(ScoreError::Timeout { request_id: id.to_string() }),
                Err(RecvTimeoutError::Disconnected) => {
                    inbox.closed = Some("server closed the stream".into());
                }
            }
        }
    }

    fn check_error(id: &str, v: Value) -> Result<Value, ScoreError> {
        match v.get("error") {
            Some(e) => Err(ScoreError::Remote {
                request_id: id.to_string(),
                message: e.as_str().map(String::from).unwrap_or_else(|| e.to_string()),
            }),
            None => Ok(v),
        }
    }

    /// Sends one request (which must carry a string `"id"`) and waits for its response.
    pub fn call(&self, request: Value) -> Result<Value, ScoreError> {
        let id = request_id(&request)?;
        self.send(&request)?;
        let v = self.wait_for(&id, Instant::now() + self.timeout)?;
        Self::check_error(&id, v)
    }

    /// Pipelines all requests, then collects responses in request order.
    pub fn call_many(&self, requests: Vec<Value>) -> Vec<Result<Value, ScoreError>> {
        let mut ids = Vec::with_capacity(requests.len());
        for r in &requests {
            ids.push(request_id(r).and_then(|id| self.send(r).map(|_| id)));
        }
        let deadline = Instant::now() + self.timeout;
        ids.into_iter()
            .map(|id| {
                let id = id?;
                Self::check_error(&id, self.wait_for(&id, deadline)?)
            })
            .collect()
    }
}

impl Drop for LineClient {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

fn request_id(request: &Value) -> Result<String, ScoreError> {
    request
        .get("id")
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| ScoreError::Protocol { request_id: None, message: "request lacks a string id".into() })
}

fn parse_handshake(line: &str) -> Result<String, ScoreError> {
    let bad = |m: String| ScoreError::Protocol { request_id: None, message: m };
    let v: Value = serde_json::from_str(line).map_err(|e| bad(format!("handshake is not JSON: {e}")))?;
    match v.get("protocol").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => {}
        other => return Err(bad(format!("unsupported protocol version {other:?}"))),
    }
    v.get("model")
        .and_then(Value::as_str)
        .filter(|m| !m.is_empty())
        .map(String::from)
        .ok_or_else(|| bad("handshake lacks a model identity".into()))
}

/// Limits for [`serve_scorer`].
#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Maximum context + continuation length in bytes; longer requests get `"length"` errors.
    pub max_len: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { max_len: 1 << 20 }
    }
}

/// Serves a scorer over the protocol until `input` ends. Malformed requests
/// produce error lines; the loop keeps going.
pub fn serve_scorer<R, S, I, O>(scorer: &S, input: I, mut output: O, options: ServeOptions) -> std::io::Result<()>
where
    R: Real,
    S: Scorer<R> + ?Sized,
    I: BufRead,
    O: Write,
{
    let handshake = json!({"protocol": PROTOCOL_VERSION, "model": scorer.backend().identity});
    writeln!(output, "{handshake}")?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Value>(&line) {
            Err(e) => json!({"id": Value::Null, "error": format!("malformed request: {e}")}),
            Ok(req) => respond(scorer, &req, options),
        };
        writeln!(output, "{response}")?;
        output.flush()?;
    }
    Ok(())
}

fn respond<R: Real, S: Scorer<R> + ?Sized>(scorer: &S, req: &Value, options: ServeOptions) -> Value {
    let id = req.get("id").cloned().unwrap_or(Value::Null);
    let (Some(_), Some(context), Some(continuation)) =
        (id.as_str(), req.get("context").and_then(Value::as_str), req.get("continuation").and_then(Value::as_str))
    else {
        return json!({"id": id, "error": "malformed request: need string id, context and continuation"});
    };
    if context.len() + continuation.len() > options.max_len {
        return json!({"id": id, "error": "length"});
    }
    match scorer.sequence_logprobs(context, continuation) {
        Ok(out) => {
            let lps: Vec<f64> = out.logprobs.into_iter().map(|v| v.to_f64_lossy()).collect();
            json!({"id": id, "tokens": out.tokens, "logprobs": lps})
        }
        Err(e) => json!({"id": id, "error": e.to_string()}),
    }
}

pub mod conformance {
    //! Replays a golden transcript against a scorer server and checks the
    //! protocol contract: handshake, id echo, shape law, non-positive
    //! log-probabilities, determinism and error behaviour.

    use std::io::{BufRead, BufReader, Write};
    use std::path::Path;
    use std::time::Duration;

    use serde::{Deserialize, Serialize};
    use serde_json::{json, Value};

    use super::parse_handshake;

    /// One transcript step.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case", tag = "step")]
    pub enum Step {
        /// A well-formed request expected to succeed.
        Score {
            id: String,
            context: String,
            continuation: String,
            #[serde(default)]
            expect_tokens: Option<usize>,
        },
        /// A request expected to produce an error response with the same id.
        ExpectError { request: Value },
        /// A raw line (possibly not JSON) expected to produce an error line.
        Raw { line: String },
        /// Sends the same request twice; log-probabilities must agree within 1e-5.
        Repeat { context: String, continuation: String },
        /// Checks `logprobs(s | c)` against the tail of `logprobs(c + " " + s)` within 1e-4.
        Consistency { context: String, continuation: String },
    }

    #[derive(Debug, Clone, PartialEq, Serialize)]
    pub struct Check {
        pub name: String,
        pub passed: bool,
        pub detail: String,
    }

    #[derive(Debug, Clone, Default, Serialize)]
    pub struct ConformanceReport {
        pub model: Option<String>,
        pub checks: Vec<Check>,
    }

    impl ConformanceReport {
        pub fn passed(&self) -> bool {
            !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
        }

        fn record(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
            self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
        }
    }

    pub fn load_transcript(path: impl AsRef<Path>) -> std::io::Result<Vec<Step>> {
        let body = std::fs::read_to_string(path)?;
        body.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
            .collect()
    }

    struct Session<R, W> {
        reader: R,
        writer: W,
    }

    impl<R: BufRead, W: Write> Session<R, W> {
        fn exchange(&mut self, line: &str) -> Result<Value, String> {
            writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()).map_err(|e| e.to_string())?;
            let mut buf = String::new();
            match self.reader.read_line(&mut buf) {
                Ok(0) => Err("server closed the stream".into()),
                Ok(_) => serde_json::from_str(buf.trim_end()).map_err(|e| format!("unparseable response: {e}")),
                Err(e) => Err(e.to_string()),
            }
        }

        fn score(&mut self, id: &str, context: &str, continuation: &str) -> Result<Value, String> {
            let req = json!({"id": id, "context": context, "continuation": continuation});
            self.exchange(&req.to_string())
        }
    }

    fn logprobs(v: &Value) -> Option<Vec<f64>> {
        v.get("logprobs")?.as_array()?.iter().map(Value::as_f64).collect()
    }

    fn check_ok(report: &mut ConformanceReport, step: &str, id: &str, resp: &Value, expect_tokens: Option<usize>) {
        report.record(
            format!("{step}: id echo"),
            resp.get("id").and_then(Value::as_str) == Some(id),
            format!("{resp}"),
        );
        let tokens = resp.get("tokens").and_then(Value::as_array).map(Vec::len);
        let lps = logprobs(resp);
        let shape = match (tokens, &lps) {
            (Some(t), Some(l)) => t == l.len() && t > 0 && expect_tokens.is_none_or(|e| e == t),
            _ => false,
        };
        report.record(
            format!("{step}: shape law"),
            shape,
            format!("tokens={tokens:?} logprobs={:?}", lps.as_ref().map(Vec::len)),
        );
        let nonpos = lps.as_ref().is_some_and(|l| l.iter().all(|v| v.is_finite() && *v <= 0.0));
        report.record(format!("{step}: non-positive logprobs"), nonpos, "");
    }

    /// Runs the transcript over an already-connected stream pair.
    pub fn run<R: BufRead, W: Write>(reader: R, writer: W, steps: &[Step]) -> ConformanceReport {
        let mut report = ConformanceReport::default();
        let mut s = Session { reader, writer };
        let mut first = String::new();
        match s.reader.read_line(&mut first) {
            Ok(n) if n > 0 => match parse_handshake(first.trim_end()) {
                Ok(model) => {
                    report.record("handshake", true, model.clone());
                    report.model = Some(model);
                }
                Err(e) => {
                    report.record("handshake", false, e.to_string());
                    return report;
                }
            },
            _ => {
                report.record("handshake", false, "no handshake line");
                return report;
            }
        }
        for (k, step) in steps.iter().enumerate() {
            let name = format!("step {}", k + 1);
            match step {
                Step::Score { id, context, continuation, expect_tokens } => match s.score(id, context, continuation) {
                    Ok(resp) => check_ok(&mut report, &name, id, &resp, *expect_tokens),
                    Err(e) => report.record(format!("{name}: response"), false, e),
                },
                Step::ExpectError { request } => match s.exchange(&request.to_string()) {
                    Ok(resp) => {
                        let echoed = resp.get("id") == Some(request.get("id").unwrap_or(&Value::Null));
                        report.record(format!("{name}: error id echo"), echoed, format!("{resp}"));
                        report.record(
                            format!("{name}: error reported"),
                            resp.get("error").is_some_and(Value::is_string),
                            format!("{resp}"),
                        );
                    }
                    Err(e) => report.record(format!("{name}: survives bad request"), false, e),
                },
                Step::Raw { line } => match s.exchange(line) {
                    Ok(resp) => report.record(
                        format!("{name}: malformed line rejected"),
                        resp.get("error").is_some(),
                        format!("{resp}"),
                    ),
                    Err(e) => report.record(format!("{name}: survives malformed line"), false, e),
                },
                Step::Repeat { context, continuation } => {
                    let a = s.score(&format!("{name}-a"), context, continuation);
                    let b = s.score(&format!("{name}-b"), context, continuation);
                    let same = match (a.ok().as_ref().and_then(logprobs), b.ok().as_ref().and_then(logprobs)) {
                        (Some(x), Some(y)) => {
                            x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-5)
                        }
                        _ => false,
                    };
                    report.record(format!("{name}: deterministic"), same, "");
                }
                Step::Consistency { context, continuation } => {
                    let cond = s.score(&format!("{name}-c"), context, continuation);
                    let joint = s.score(&format!("{name}-j"), "", &format!("{context} {continuation}"));
                    let ok = match (cond.ok().as_ref().and_then(logprobs), joint.ok().as_ref().and_then(logprobs)) {
                        (Some(c), Some(j)) if j.len() >= c.len() => {
                            j[j.len() - c.len()..].iter().zip(&c).all(|(p, q)| (p - q).abs() <= 1e-4)
                        }
                        _ => false,
                    };
                    report.record(format!("{name}: conditioning consistency"), ok, "");
                }
            }
        }
        report
    }

    /// Connects to `tcp://`, `unix:` or `exec:` endpoints and runs the transcript.
    pub fn run_endpoint(endpoint: &str, steps: &[Step], timeout: Duration) -> std::io::Result<ConformanceReport> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = std::net::TcpStream::connect(addr)?;
            stream.set_read_timeout(Some(timeout))?;
            return Ok(run(BufReader::new(stream.try_clone()?), stream, steps));
        }
        if let Some(cmdline) = endpoint.strip_prefix("exec:") {
            let mut parts = cmdline.split_whitespace();
            let program = parts.next().unwrap_or_default();
            let mut child = std::process::Command::new(program)
                .args(parts)
                .stdin(std::process::Stdio::piped())
                .stdout(std::process::Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
            let report = run(stdout, stdin, steps);
            let _ = child.kill();
            let _ = child.wait();
            return Ok(report);
        }
        Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("unsupported endpoint '{endpoint}'")))
    }
}

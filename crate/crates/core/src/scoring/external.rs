use std::time::Duration;

use serde_json::{json, Value};

use crate::num::Real;
use crate::protocol::LineClient;

use super::{BackendKind, ScoreError, Scorer, ScorerBackend, TokenLogProbs};

/// Scorer client for a remote backend speaking the line protocol.
pub struct ExternalScorer {
    client: LineClient,
}

impl ExternalScorer {
    pub fn new(client: LineClient) -> Self {
        ExternalScorer { client }
    }

    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self, ScoreError> {
        Ok(Self::new(LineClient::connect(endpoint, timeout)?))
    }

    fn request(&self, context: &str, continuation: &str) -> Value {
        json!({"id": self.client.fresh_id("r"), "context": context, "continuation": continuation})
    }
}

fn parse_response<R: Real>(v: Value) -> Result<TokenLogProbs<R>, ScoreError> {
    let id = v.get("id").and_then(Value::as_str).map(String::from);
    let bad = |m: String| ScoreError::Protocol { request_id: id.clone(), message: m };
    let tokens: Vec<String> = v
        .get("tokens")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|t| t.as_str().map(String::from)).collect())
        .ok_or_else(|| bad("missing or non-string tokens".into()))?;
    let logprobs: Vec<R> = v
        .get("logprobs")
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(|x| x.as_f64().and_then(R::from_f64)).collect())
        .ok_or_else(|| bad("missing or non-numeric logprobs".into()))?;
    if tokens.is_empty() {
        return Err(ScoreError::EmptyContinuation);
    }
    TokenLogProbs::new(tokens, logprobs).map_err(bad)
}

impl<R: Real> Scorer<R> for ExternalScorer {
    fn backend(&self) -> ScorerBackend {
        ScorerBackend { kind: BackendKind::External, identity: self.client.model().to_string() }
    }

    fn sequence_logprobs(&self, context: &str, continuation: &str) -> Result<TokenLogProbs<R>, ScoreError> {
        if continuation.trim().is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        parse_response(self.client.call(self.request(context, continuation))?)
    }

    fn sequence_logprobs_batch(&self, requests: &[(String, String)]) -> Vec<Result<TokenLogProbs<R>, ScoreError>> {
        let reqs = requests.iter().map(|(c, s)| self.request(c, s)).collect();
        self.client.call_many(reqs).into_iter().map(|r| r.and_then(parse_response)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{serve_scorer, ServeOptions, PROTOCOL_VERSION};
    use crate::scoring::{NgramLM, UniformScorer};
    use crate::tokenize::TokenizerConfig;
    use std::io::{BufRead, BufReader, Write};
    use std::os::unix::net::UnixStream;
    use std::thread;

    const T: Duration = Duration::from_secs(5);

    fn spawn_server<S: Scorer<f64> + 'static>(scorer: S) -> ExternalScorer {
        let (client_side, server_side) = UnixStream::pair().unwrap();
        let reader = BufReader::new(server_side.try_clone().unwrap());
        thread::spawn(move || serve_scorer(&scorer, reader, server_side, ServeOptions::default()));
        let reader = BufReader::new(client_side.try_clone().unwrap());
        ExternalScorer::new(LineClient::from_streams(reader, client_side, T).unwrap())
    }

    #[test]
    fn uniform_over_the_wire() {
        let ext = spawn_server(UniformScorer::new(7, TokenizerConfig::default()));
        assert_eq!(Scorer::<f64>::backend(&ext).identity, "uniform:v=7");
        let out: TokenLogProbs<f64> = ext.sequence_logprobs("ctx", "a b c").unwrap();
        assert_eq!(out.logprobs, vec![-(7f64).ln(); 3]);
    }

    #[test]
    fn ngram_over_the_wire_matches_local() {
        let lm = NgramLM::<f64>::build(["a b a b", "b c a"], 2, 1.0, TokenizerConfig::default()).unwrap();
        let local = lm.sequence_logprobs("a", "b c").unwrap();
        let ext = spawn_server(lm);
        let remote: TokenLogProbs<f64> = ext.sequence_logprobs("a", "b c").unwrap();
        assert_eq!(remote, local);
        let batch: Vec<_> =
            Scorer::<f64>::sequence_logprobs_batch(&ext, &[("a".into(), "b".into()), ("".into(), "c a".into())]);
        assert_eq!(batch.len(), 2);
        assert_eq!(batch[1].as_ref().unwrap().len(), 2);
    }

    /// A scripted server answering out of order, with one error and one bad shape.
    #[test]
    fn out_of_order_and_errors() {
        let (client_side, server_side) = UnixStream::pair().unwrap();
        thread::spawn(move || {
            let mut w = server_side.try_clone().unwrap();
            let mut lines = BufReader::new(server_side).lines();
            writeln!(w, "{}", json!({"protocol": PROTOCOL_VERSION, "model": "scripted"})).unwrap();
            let reqs: Vec<Value> =
                (0..3).map(|_| serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap()).collect();
            writeln!(w, "{}", json!({"id": reqs[2]["id"], "tokens": ["x"], "logprobs": [-1.0, -2.0]})).unwrap();
            writeln!(w, "{}", json!({"id": reqs[1]["id"], "error": "boom"})).unwrap();
            writeln!(w, "{}", json!({"id": reqs[0]["id"], "tokens": ["x"], "logprobs": [-0.25]})).unwrap();
        });
        let reader = BufReader::new(client_side.try_clone().unwrap());
        let ext = ExternalScorer::new(LineClient::from_streams(reader, client_side, T).unwrap());
        let reqs: Vec<(String, String)> = (0..3).map(|i| ("c".to_string(), format!("s{i}"))).collect();
        let out: Vec<Result<TokenLogProbs<f64>, _>> = ext.sequence_logprobs_batch(&reqs);
        assert_eq!(out[0].as_ref().unwrap().logprobs, vec![-0.25]);
        assert!(matches!(&out[1], Err(ScoreError::Remote { message, .. }) if message == "boom"));
        assert!(matches!(&out[2], Err(ScoreError::Protocol { .. })));
        assert!(out[1].as_ref().unwrap_err().is_retriable());
    }

    #[test]
    fn timeout_is_retriable_with_id() {
        let (client_side, server_side) = UnixStream::pair().unwrap();
        let mut w = server_side.try_clone().unwrap();
        writeln!(w, "{}", json!({"protocol": 1, "model": "silent"})).unwrap();
        let reader = BufReader::new(client_side.try_clone().unwrap());
        let client = LineClient::from_streams(reader, client_side, Duration::from_millis(100)).unwrap();
        let ext = ExternalScorer::new(client);
        let err = Scorer::<f64>::sequence_logprobs(&ext, "c", "s").unwrap_err();
        assert!(matches!(&err, ScoreError::Timeout { request_id } if request_id == "r0"));
        assert!(err.is_retriable());
        drop(server_side);
    }

    #[test]
    fn bad_handshake_rejected() {
        let (client_side, server_side) = UnixStream::pair().unwrap();
        let mut w = server_side.try_clone().unwrap();
        writeln!(w, "{}", json!({"protocol": 2, "model": "future"})).unwrap();
        let reader = BufReader::new(client_side.try_clone().unwrap());
        assert!(matches!(LineClient::from_streams(reader, client_side, T), Err(ScoreError::Protocol { .. })));
    }
}

//! Newline-delimited JSON protocol for out-of-process engines.
//!
//! Request: `{"op":"step","tokens":[...]}` carrying the tokens generated so
//! far (the first request of a stream also carries `"prompt"`).
//! Response: `{"logits":[...],"hidden":{"4":[...]},"eos":false}` or
//! `{"error":"..."}`. One request is in flight per stream.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use super::{Backend, HiddenStates, StepOutput};
use crate::error::{Error, Result};

/// One request line out, one response line back.
pub trait Transport: Send {
    fn round_trip(&mut self, request: &str) -> Result<String>;
}

/// Runs `sh -c <command>` and speaks the protocol over its stdio.
pub struct ChildTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ChildTransport {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot spawn {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Transport for ChildTransport {
    fn round_trip(&mut self, request: &str) -> Result<String> {
        let io = |e: std::io::Error| Error::Backend(format!("engine pipe: {e}"));
        self.stdin.write_all(request.as_bytes()).map_err(io)?;
        self.stdin.write_all(b"\n").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Backend("engine closed its output".into()));
        }
        Ok(line)
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Serialize)]
struct Request<'a> {
    op: &'static str,
    tokens: &'a [u32],
    #[serde(skip_serializing_if = "Option::is_none")]
    prompt: Option<&'a str>,
}

#[derive(Deserialize)]
struct Response {
    #[serde(default)]
    logits: Vec<f64>,
    #[serde(default)]
    hidden: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    eos: bool,
    #[serde(default)]
    error: Option<String>,
}

pub struct ExternalBackend<T: Transport> {
    transport: T,
    tokens: Vec<u32>,
    vocab_size: usize,
    layer_ids: Vec<u32>,
}

impl ExternalBackend<ChildTransport> {
    pub fn spawn(command: &str) -> Result<Self> {
        Ok(Self::new(ChildTransport::spawn(command)?))
    }
}

impl<T: Transport> ExternalBackend<T> {
    pub fn new(transport: T) -> Self {
        Self {
            transport,
            tokens: Vec::new(),
            vocab_size: 0,
            layer_ids: Vec::new(),
        }
    }

    fn request(&mut self, prompt: Option<&str>) -> Result<StepOutput> {
        let req = serde_json::to_string(&Request {
            op: "step",
            tokens: &self.tokens,
            prompt,
        })?;
        let line = self.transport.round_trip(&req)?;
        let resp: Response = serde_json::from_str(line.trim())
            .map_err(|e| Error::Backend(format!("unparseable engine response: {e}")))?;
        if let Some(msg) = resp.error {
            return Err(Error::Backend(msg));
        }
        if resp.eos && resp.logits.is_empty() {
            return Ok(StepOutput::end());
        }
        if resp.logits.len() < 2 {
            return Err(Error::Backend(format!("engine sent {} logits", resp.logits.len())));
        }
        if self.vocab_size == 0 {
            self.vocab_size = resp.logits.len();
        } else if resp.logits.len() != self.vocab_size {
            return Err(Error::DimensionMismatch {
                expected: self.vocab_size,
                actual: resp.logits.len(),
            });
        }
        let mut hidden_states = HiddenStates::new();
        for (k, v) in resp.hidden {
            let id = k
                .parse::<u32>()
                .map_err(|_| Error::Backend(format!("hidden layer key {k:?} is not an integer")))?;
            hidden_states.insert(id, v);
        }
        self.layer_ids = hidden_states.keys().copied().collect();
        Ok(StepOutput {
            logits: resp.logits,
            hidden_states,
            is_end: resp.eos,
        })
    }
}

impl<T: Transport> Backend for ExternalBackend<T> {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn layer_ids(&self) -> Vec<u32> {
        self.layer_ids.clone()
    }

    fn start(&mut self, prompt: &str) -> Result<StepOutput> {
        self.tokens.clear();
        self.request(Some(prompt))
    }

    fn step(&mut self, token: u32, _temperature: f64) -> Result<StepOutput> {
        self.tokens.push(token);
        self.request(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted {
        seen: Vec<String>,
        replies: Vec<String>,
    }

    impl Transport for Scripted {
        fn round_trip(&mut self, request: &str) -> Result<String> {
            self.seen.push(request.to_owned());
            if self.replies.is_empty() {
                return Err(Error::Backend("closed".into()));
            }
            Ok(self.replies.remove(0))
        }
    }

    fn scripted(replies: &[&str]) -> ExternalBackend<Scripted> {
        ExternalBackend::new(Scripted {
            seen: vec![],
            replies: replies.iter().map(|s| s.to_string()).collect(),
        })
    }

    #[test]
    fn protocol_round_trip() {
        let mut b = scripted(&[
            r#"{"logits":[1.0,2.0,3.0],"hidden":{"4":[0.5,0.25]},"eos":false}"#,
            r#"{"logits":[0.0,0.0,1.0],"hidden":{"4":[0.0,0.0]},"eos":true}"#,
        ]);
        let first = b.start("hi").unwrap();
        assert_eq!(first.logits, vec![1.0, 2.0, 3.0]);
        assert_eq!(first.hidden_states[&4], vec![0.5, 0.25]);
        assert_eq!(b.vocab_size(), 3);
        assert!(b.step(2, 1.0).unwrap().is_end);
        let seen = &b.transport.seen;
        assert_eq!(seen[0], r#"{"op":"step","tokens":[],"prompt":"hi"}"#);
        assert_eq!(seen[1], r#"{"op":"step","tokens":[2]}"#);
    }

    #[test]
    fn error_responses() {
        let mut b = scripted(&[r#"{"error":"model not loaded"}"#]);
        assert!(matches!(b.start(""), Err(Error::Backend(m)) if m == "model not loaded"));
        let mut b = scripted(&["not json"]);
        assert!(b.start("").is_err());
        let mut b = scripted(&[
            r#"{"logits":[1.0,2.0],"hidden":{}}"#,
            r#"{"logits":[1.0,2.0,3.0],"hidden":{}}"#,
        ]);
        b.start("").unwrap();
        assert!(matches!(b.step(0, 1.0), Err(Error::DimensionMismatch { .. })));
    }
}

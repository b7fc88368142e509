//! Newline-delimited JSON protocol for out-of-process models.
//!
//! ```text
//! server → {"type":"hello","name":"m1","vocab_size":600}
//! client → {"type":"next","context_ids":[3,17]}
//! server → {"type":"dist","probs":[...]}
//!        | {"type":"dist_sparse","ids":[3],"probs":[0.9],"rest":0.1}
//! client → {"type":"bye"}
//! ```
//!
//! One frame per line, one request in flight. `rest` is spread uniformly
//! over the ids a sparse frame leaves out.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ModelBackend;
use crate::error::{Error, Result};
use crate::fusion::AbsoluteDistribution;
use crate::vocab::Vocabulary;

const SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Hello { name: String, vocab_size: usize },
    Next { context_ids: Vec<u32> },
    Dist { probs: Vec<f64> },
    DistSparse { ids: Vec<u32>, probs: Vec<f64>, rest: f64 },
    Bye,
}

impl Frame {
    pub fn parse(line: &str) -> Result<Frame> {
        serde_json::from_str(line).map_err(|e| Error::Protocol {
            reason: e.to_string(),
            frame: line.to_string(),
        })
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames always serialize");
        s.push('\n');
        s
    }
}

fn protocol(reason: impl Into<String>, frame: &str) -> Error {
    Error::Protocol {
        reason: reason.into(),
        frame: frame.to_string(),
    }
}

/// Turns a distribution frame into a dense probability vector.
pub fn densify(frame: &Frame, vocab_size: usize, raw: &str) -> Result<Vec<f64>> {
    let probs = match frame {
        Frame::Dist { probs } => {
            if probs.len() != vocab_size {
                return Err(protocol(
                    format!("dense frame has {} probabilities, expected {vocab_size}", probs.len()),
                    raw,
                ));
            }
            probs.clone()
        }
        Frame::DistSparse { ids, probs, rest } => {
            if ids.len() != probs.len() {
                return Err(protocol("sparse frame ids and probs differ in length", raw));
            }
            if probs.iter().any(|p| !p.is_finite()) {
                return Err(protocol("sparse frame has a non-finite probability", raw));
            }
            if !(rest.is_finite() && *rest >= 0.0) {
                return Err(protocol("sparse frame rest mass must be >= 0", raw));
            }
            let mut dense = vec![f64::NAN; vocab_size];
            for (&id, &p) in ids.iter().zip(probs) {
                let slot = dense
                    .get_mut(id as usize)
                    .ok_or_else(|| protocol(format!("id {id} outside vocabulary of {vocab_size}"), raw))?;
                if !slot.is_nan() {
                    return Err(protocol(format!("id {id} listed twice"), raw));
                }
                *slot = p;
            }
            let unlisted = vocab_size - ids.len();
            if unlisted == 0 && *rest > SUM_TOL {
                return Err(protocol("rest mass given but every id is listed", raw));
            }
            let share = if unlisted == 0 { 0.0 } else { rest / unlisted as f64 };
            for slot in dense.iter_mut().filter(|x| x.is_nan()) {
                *slot = share;
            }
            dense
        }
        _ => return Err(protocol("expected a dist or dist_sparse frame", raw)),
    };
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(protocol(format!("probability {i} is {}", probs[i]), raw));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(protocol(format!("probabilities sum to {total}"), raw));
    }
    Ok(probs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Spawn a process and talk over its standard streams.
    Process { program: String, args: Vec<String> },
    /// Connect to `host:port`.
    Socket(String),
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    /// Responses still owed for requests that timed out.
    stale: usize,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Connection {
    fn recv(&mut self, timeout: Duration, model: &str) -> Result<String> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout {
                model: model.to_string(),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(protocol("connection closed", "")),
        }
    }

    fn send(&mut self, frame: &Frame) -> Result<()> {
        self.writer.write_all(frame.to_line().as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }
}

fn spawn_reader<R: io::Read + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let reader = BufReader::new(reader);
        for line in reader.lines() {
            let failed = line.is_err();
            if tx.send(line).is_err() || failed {
                break;
            }
        }
    });
    rx
}

/// Client side of the wire protocol.
pub struct RemoteBackend {
    name: String,
    vocab: Arc<Vocabulary>,
    timeout: Duration,
    conn: Mutex<Connection>,
}

/// Connects to `endpoint` and completes the handshake against `vocab`.
pub fn remote_backend(endpoint: &Endpoint, vocab: Arc<Vocabulary>, timeout: Duration) -> Result<RemoteBackend> {
    let mut conn = match endpoint {
        Endpoint::Process { program, args } => {
            let mut child = Command::new(program)
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            Connection {
                writer: Box::new(stdin),
                lines: spawn_reader(stdout),
                stale: 0,
                child: Some(child),
                socket: None,
            }
        }
        Endpoint::Socket(addr) => {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let read_half = stream.try_clone()?;
            let control = stream.try_clone()?;
            Connection {
                writer: Box::new(stream),
                lines: spawn_reader(read_half),
                stale: 0,
                child: None,
                socket: Some(control),
            }
        }
    };
    let line = conn.recv(timeout, "<handshake>")?;
    let name = match Frame::parse(&line)? {
        Frame::Hello { name, vocab_size } => {
            if vocab_size != vocab.len() {
                return Err(Error::VocabMismatch {
                    model: name,
                    remote: vocab_size,
                    local: vocab.len(),
                });
            }
            name
        }
        _ => return Err(protocol("expected hello", &line)),
    };
    log::info!("connected to remote model `{name}` ({} tokens)", vocab.len());
    Ok(RemoteBackend {
        name,
        vocab,
        timeout,
        conn: Mutex::new(conn),
    })
}

impl ModelBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn next_distribution(&self, context: &[u32]) -> Result<AbsoluteDistribution> {
        let mut conn = self.conn.lock().unwrap();
        while conn.stale > 0 {
            conn.recv(self.timeout, &self.name)?;
            conn.stale -= 1;
        }
        conn.send(&Frame::Next {
            context_ids: context.to_vec(),
        })?;
        let line = match conn.recv(self.timeout, &self.name) {
            Ok(line) => line,
            Err(e) => {
                if matches!(e, Error::Timeout { .. }) {
                    conn.stale += 1;
                }
                return Err(e);
            }
        };
        let frame = Frame::parse(&line)?;
        let probs = densify(&frame, self.vocab.len(), &line)?;
        Ok(AbsoluteDistribution::new_unchecked(probs, 0))
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.send(&Frame::Bye);
        if let Some(socket) = &self.socket {
            let _ = socket.shutdown(Shutdown::Both);
        }
        if let Some(child) = self.child.as_mut() {
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Serves `backend` over one connection until `bye` or end of input.
pub fn serve<R: BufRead, W: Write>(backend: &dyn ModelBackend, reader: R, mut writer: W) -> Result<()> {
    let hello = Frame::Hello {
        name: backend.name().to_string(),
        vocab_size: backend.vocabulary().len(),
    };
    writer.write_all(hello.to_line().as_bytes())?;
    writer.flush()?;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match Frame::parse(&line)? {
            Frame::Next { context_ids } => {
                let dist = backend.next_distribution(&context_ids)?;
                let reply = Frame::Dist {
                    probs: dist.into_values(),
                };
                writer.write_all(reply.to_line().as_bytes())?;
                writer.flush()?;
            }
            Frame::Bye => return Ok(()),
            _ => return Err(protocol("server expects next or bye", &line)),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::TableModel;
    use std::net::TcpListener;

    fn parse_dense(line: &str, n: usize) -> Result<Vec<f64>> {
        densify(&Frame::parse(line)?, n, line)
    }

    #[test]
    fn frame_json_shapes() {
        assert_eq!(
            Frame::parse(r#"{"type":"hello","name":"m1","vocab_size":600}"#).unwrap(),
            Frame::Hello {
                name: "m1".into(),
                vocab_size: 600
            }
        );
        assert_eq!(
            Frame::Next { context_ids: vec![1, 2] }.to_line(),
            "{\"type\":\"next\",\"context_ids\":[1,2]}\n"
        );
        assert_eq!(Frame::Bye.to_line(), "{\"type\":\"bye\"}\n");
        assert!(matches!(Frame::parse("{\"type\":\"nope\"}"), Err(Error::Protocol { .. })));
    }

    #[test]
    fn sparse_one_hot() {
        let p = parse_dense(r#"{"type":"dist_sparse","ids":[3],"probs":[1.0],"rest":0.0}"#, 600).unwrap();
        assert_eq!(p[3], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn sparse_rest_is_spread_uniformly() {
        let line = r#"{"type":"dist_sparse","ids":[0,1,2],"probs":[0.5,0.3,0.18],"rest":0.02}"#;
        let p = parse_dense(line, 600).unwrap();
        let share = 0.02 / 597.0;
        for &x in &p[3..] {
            assert_eq!(x, share);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_frames() {
        assert!(parse_dense(r#"{"type":"dist","probs":[0.5,0.5]}"#, 3).is_err());
        assert!(parse_dense(r#"{"type":"dist","probs":[0.5,0.4,0.0]}"#, 3).is_err());
        assert!(parse_dense(r#"{"type":"dist_sparse","ids":[7],"probs":[1.0],"rest":0.0}"#, 3).is_err());
        assert!(parse_dense(r#"{"type":"dist_sparse","ids":[1,1],"probs":[0.5,0.5],"rest":0.0}"#, 3).is_err());
        assert!(parse_dense(r#"{"type":"hello","name":"x","vocab_size":3}"#, 3).is_err());
        let err = parse_dense("not json", 3).unwrap_err();
        assert!(err.to_string().contains("not json"));
    }

    fn table() -> TableModel {
        let vocab = Arc::new(Vocabulary::from_surfaces(["a", "b", "c"].map(|s| s.as_bytes().to_vec())).unwrap());
        let mut t = TableModel::uniform("tbl", vocab);
        t.insert(vec![0], vec![0.1, 0.2, 0.7]).unwrap();
        t
    }

    #[test]
    fn serve_over_a_socket() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = BufReader::new(stream.try_clone().unwrap());
            serve(&table(), reader, stream).unwrap();
        });
        let local = table();
        let remote = remote_backend(&Endpoint::Socket(addr), local.vocabulary().clone(), Duration::from_secs(5)).unwrap();
        assert_eq!(remote.name(), "tbl");
        for ctx in [vec![0], vec![1], vec![]] {
            assert_eq!(remote.next_distribution(&ctx).unwrap(), local.next_distribution(&ctx).unwrap());
        }
        drop(remote);
        server.join().unwrap();
    }

    #[test]
    fn handshake_size_mismatch_is_fatal() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = BufReader::new(stream.try_clone().unwrap());
            let _ = serve(&table(), reader, stream);
        });
        let bigger = Arc::new(Vocabulary::from_surfaces(["a", "b", "c", "d"].map(|s| s.as_bytes().to_vec())).unwrap());
        let err = remote_backend(&Endpoint::Socket(addr), bigger, Duration::from_secs(5)).err().unwrap();
        assert!(matches!(err, Error::VocabMismatch { remote: 3, local: 4, .. }));
        server.join().unwrap();
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            stream
                .write_all(Frame::Hello { name: "mute".into(), vocab_size: 3 }.to_line().as_bytes())
                .unwrap();
            let mut lines = BufReader::new(stream.try_clone().unwrap()).lines();
            // Swallow the first request, answer the second.
            lines.next();
            lines.next();
            stream.write_all(Frame::Dist { probs: vec![1.0, 0.0, 0.0] }.to_line().as_bytes()).unwrap();
            lines.next();
        });
        let vocab = table().vocabulary().clone();
        let remote = remote_backend(&Endpoint::Socket(addr), vocab, Duration::from_millis(200)).unwrap();
        let err = remote.next_distribution(&[]).unwrap_err();
        assert!(err.is_retryable());
        drop(remote);
        server.join().unwrap();
    }
}

//! Newline-delimited JSON fusion service.
//!
//! Requests and replies are one JSON object per line:
//!
//! ```text
//! {"op":"open"}                                  -> {"session":1}
//! {"op":"push","session":1,"records":[b64,...]}  -> {"a":[[...],...],"items_seen":n}
//! {"op":"finalize","session":1}                  -> {"fused":[...],"weights_summary":{...},"items_seen":n}
//! {"op":"close","session":1}                     -> {"closed":1}
//! {"op":"close"}                                 -> {"closed":null}, then the connection ends
//! {"op":"shutdown"}                              -> {"shutdown":true}
//! ```
//!
//! Records are base64 CAFF record payloads. Any failure produces
//! `{"error":"..."}` and leaves session state untouched. Open sessions are
//! written to the state directory as CAFS snapshots on shutdown and restored
//! on start.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::io::{decode_record, FeatureLayout};
use crate::model::FusionModel;
use crate::stream::FusionSession;

/// Longest accepted request line, in bytes.
pub const MAX_LINE: usize = 64 << 20;

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
enum Request {
    Open {},
    Push { session: u64, records: Vec<String> },
    Finalize { session: u64 },
    Close { session: Option<u64> },
    Shutdown {},
}

#[derive(Debug, Serialize)]
struct WeightsSummary {
    cluster_importance: Vec<f32>,
    mass: Vec<f64>,
}

/// What the connection should do after sending a reply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Next {
    Continue,
    CloseConnection,
    Shutdown,
}

type Shared = Arc<Mutex<FusionSession>>;

pub struct Service {
    model: Arc<FusionModel>,
    layout: FeatureLayout,
    sessions: Mutex<HashMap<u64, Shared>>,
    next_id: AtomicU64,
    state_dir: Option<PathBuf>,
    stopping: AtomicBool,
}

impl Service {
    /// Creates a service, restoring any `*.cafs` snapshots in `state_dir`.
    pub fn new(model: FusionModel, state_dir: Option<PathBuf>) -> Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &state_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "cafs") {
                    let s = FusionSession::from_snapshot(&std::fs::read(&path)?)?;
                    s.check_model(&model)?;
                    sessions.insert(s.id(), Arc::new(Mutex::new(s)));
                }
            }
            if !sessions.is_empty() {
                info!("restored {} sessions from {}", sessions.len(), dir.display());
            }
        }
        let next = sessions.keys().max().map_or(1, |m| m + 1);
        Ok(Self {
            layout: FeatureLayout::of(&model.config),
            model: Arc::new(model),
            sessions: Mutex::new(sessions),
            next_id: AtomicU64::new(next),
            state_dir,
            stopping: AtomicBool::new(false),
        })
    }

    pub fn session_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.sessions.lock().unwrap().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// State size of one session, for memory accounting.
    pub fn session_bytes(&self, id: u64) -> Option<usize> {
        self.get(id).ok().map(|s| s.lock().unwrap().state_bytes())
    }

    pub fn is_stopping(&self) -> bool {
        self.stopping.load(Ordering::SeqCst)
    }

    fn get(&self, id: u64) -> Result<Shared> {
        self.sessions
            .lock()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Usage(format!("unknown session {id}")))
    }

    /// Handles one request line and returns the reply line (without the
    /// trailing newline).
    pub fn handle_line(&self, line: &str) -> (String, Next) {
        match self.dispatch(line) {
            Ok((v, next)) => (v.to_string(), next),
            Err(e) => (json!({ "error": e.to_string() }).to_string(), Next::Continue),
        }
    }

    fn dispatch(&self, line: &str) -> Result<(Value, Next)> {
        let req: Request = serde_json::from_str(line.trim())?;
        match req {
            Request::Open {} => {
                let id = self.next_id.fetch_add(1, Ordering::SeqCst);
                let s = FusionSession::open(id, &self.model.config);
                self.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(s)));
                Ok((json!({ "session": id }), Next::Continue))
            }
            Request::Push { session, records } => {
                let shared = self.get(session)?;
                if records.len() > self.model.config.max_batch {
                    return Err(Error::Usage(format!(
                        "{} records exceed the batch limit {}",
                        records.len(),
                        self.model.config.max_batch
                    )));
                }
                let batch = records
                    .iter()
                    .map(|r| {
                        let bytes = B64
                            .decode(r)
                            .map_err(|e| Error::Format(format!("bad base64: {e}")))?;
                        decode_record(&bytes, &self.layout)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut s = shared.lock().unwrap();
                let a = s.update(&batch, &self.model)?;
                let rows: Vec<&[f32]> = (0..a.num_centers()).map(|j| a.a.row(j)).collect();
                Ok((json!({ "a": rows, "items_seen": s.items_seen() }), Next::Continue))
            }
            Request::Finalize { session } => {
                let shared = self.get(session)?;
                let s = shared.lock().unwrap();
                let done = s.finalize(&self.model)?;
                let summary = WeightsSummary {
                    cluster_importance: done.weights.cluster_importance(),
                    mass: done.mass,
                };
                Ok((
                    json!({ "fused": done.fused, "weights_summary": summary, "items_seen": s.items_seen() }),
                    Next::Continue,
                ))
            }
            Request::Close { session: Some(id) } => {
                if self.sessions.lock().unwrap().remove(&id).is_none() {
                    return Err(Error::Usage(format!("unknown session {id}")));
                }
                if let Some(dir) = &self.state_dir {
                    let _ = std::fs::remove_file(snapshot_path(dir, id));
                }
                Ok((json!({ "closed": id }), Next::Continue))
            }
            Request::Close { session: None } => Ok((json!({ "closed": null }), Next::CloseConnection)),
            Request::Shutdown {} => {
                self.stopping.store(true, Ordering::SeqCst);
                Ok((json!({ "shutdown": true }), Next::Shutdown))
            }
        }
    }

    /// Writes every open session to the state directory. Returns how many
    /// were written.
    pub fn persist(&self) -> Result<usize> {
        let Some(dir) = &self.state_dir else {
            return Ok(0);
        };
        std::fs::create_dir_all(dir)?;
        let sessions: Vec<Shared> = self.sessions.lock().unwrap().values().cloned().collect();
        for s in &sessions {
            let s = s.lock().unwrap();
            let tmp = dir.join(format!("{}.cafs.tmp", s.id()));
            std::fs::write(&tmp, s.to_snapshot())?;
            std::fs::rename(&tmp, snapshot_path(dir, s.id()))?;
        }
        Ok(sessions.len())
    }

    /// Serves one connection until it closes or the service stops.
    pub fn handle_connection(&self, stream: TcpStream) -> Result<()> {
        stream.set_read_timeout(Some(Duration::from_millis(200)))?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        let mut line = Vec::new();
        loop {
            match read_frame(&mut reader, &mut line) {
                Ok(0) => return Ok(()),
                Ok(_) => {}
                Err(e) if is_timeout(&e) => {
                    if self.is_stopping() {
                        return Ok(());
                    }
                    continue;
                }
                Err(e) => return Err(e.into()),
            }
            let (reply, next) = if line.len() > MAX_LINE {
                (json!({ "error": "request line too long" }).to_string(), Next::Continue)
            } else {
                match std::str::from_utf8(&line) {
                    Ok(text) if text.trim().is_empty() => {
                        line.clear();
                        continue;
                    }
                    Ok(text) => self.handle_line(text),
                    Err(_) => (json!({ "error": "request is not UTF-8" }).to_string(), Next::Continue),
                }
            };
            line.clear();
            writer.write_all(reply.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
            if next != Next::Continue {
                return Ok(());
            }
        }
    }
}

fn snapshot_path(dir: &std::path::Path, id: u64) -> PathBuf {
    dir.join(format!("{id}.cafs"))
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut)
}

/// Reads up to and including `\n`, keeping partial input in `buf` across
/// timeouts. Returns 0 at end of stream.
fn read_frame<R: BufRead>(r: &mut R, buf: &mut Vec<u8>) -> std::io::Result<usize> {
    loop {
        let available = r.fill_buf()?;
        if available.is_empty() {
            return Ok(buf.len());
        }
        if let Some(pos) = available.iter().position(|&b| b == b'\n') {
            buf.extend_from_slice(&available[..pos]);
            r.consume(pos + 1);
            return Ok(buf.len() + 1);
        }
        let n = available.len();
        if buf.len() <= MAX_LINE {
            buf.extend_from_slice(available);
        }
        r.consume(n);
    }
}

/// Accepts connections until a `shutdown` request, then persists sessions.
pub fn serve(listener: TcpListener, service: Arc<Service>) -> Result<()> {
    listener.set_nonblocking(true)?;
    info!("listening on {}", listener.local_addr()?);
    let mut workers = Vec::new();
    while !service.is_stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                let svc = Arc::clone(&service);
                workers.push(std::thread::spawn(move || {
                    if let Err(e) = svc.handle_connection(stream) {
                        warn!("connection {peer}: {e}");
                    }
                }));
            }
            Err(e) if is_timeout(&e) => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(e.into()),
        }
        workers.retain(|w| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
    let n = service.persist()?;
    info!("persisted {n} sessions");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::encode_record;
    use crate::model::ModelConfig;
    use crate::testutil::random_records;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn service(dir: Option<PathBuf>) -> Service {
        Service::new(FusionModel::new_random(ModelConfig::toy(), 1).unwrap(), dir).unwrap()
    }

    fn call(s: &Service, line: &str) -> Value {
        serde_json::from_str(&s.handle_line(line).0).unwrap()
    }

    fn push_line(session: u64, recs: &[crate::style::FeatureRecord]) -> String {
        let enc: Vec<String> = recs.iter().map(|r| B64.encode(encode_record(r))).collect();
        json!({ "op": "push", "session": session, "records": enc }).to_string()
    }

    #[test]
    fn open_push_finalize() {
        let s = service(None);
        let id = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = random_records(&mut rng, &ModelConfig::toy(), 1, 0);
        let r = call(&s, &push_line(id, &rec));
        assert_eq!(r["items_seen"], 1);
        assert_eq!(r["a"].as_array().unwrap().len(), 2);
        let f = call(&s, &format!(r#"{{"op":"finalize","session":{id}}}"#));
        let fused: Vec<f32> = serde_json::from_value(f["fused"].clone()).unwrap();
        // One item: every cluster row is that item, so the fusion returns it.
        for (a, b) in fused.iter().zip(&rec[0].feature) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn push_order_does_not_matter() {
        let s = service(None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_records(&mut rng, &ModelConfig::toy(), 3, 0);
        let b = random_records(&mut rng, &ModelConfig::toy(), 5, 0);
        let run = |first: &[_], second: &[_]| {
            let id = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
            call(&s, &push_line(id, first));
            call(&s, &push_line(id, second));
            let f = call(&s, &format!(r#"{{"op":"finalize","session":{id}}}"#));
            serde_json::from_value::<Vec<f32>>(f["fused"].clone()).unwrap()
        };
        let x = run(&a, &b);
        let y = run(&b, &a);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn errors_leave_state_intact() {
        let s = service(None);
        let id = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs = random_records(&mut rng, &ModelConfig::toy(), 4, 0);
        call(&s, &push_line(id, &recs));
        let before = s.get(id).unwrap().lock().unwrap().clone();

        let mut nan = recs[0].clone();
        nan.feature[0] = f32::NAN;
        for bad in [
            "not json".to_string(),
            r#"{"op":"push","session":99,"records":[]}"#.to_string(),
            format!(r#"{{"op":"push","session":{id},"records":["@@"]}}"#),
            format!(r#"{{"op":"push","session":{id},"records":["AAAA"]}}"#),
            format!(r#"{{"op":"push","session":{id},"records":[]}}"#),
            push_line(id, &[recs[1].clone(), nan]),
            r#"{"op":"finalize","session":7}"#.to_string(),
            r#"{"op":"open","extra":1}"#.to_string(),
            r#"{"op":"close","session":12345}"#.to_string(),
        ] {
            let (reply, next) = s.handle_line(&bad);
            assert!(reply.contains("\"error\""), "{bad} -> {reply}");
            assert_eq!(next, Next::Continue);
        }
        assert_eq!(*s.get(id).unwrap().lock().unwrap(), before);
    }

    #[test]
    fn close_and_shutdown() {
        let s = service(None);
        let id = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
        assert_eq!(call(&s, &format!(r#"{{"op":"close","session":{id}}}"#))["closed"], id);
        assert!(s.session_ids().is_empty());
        assert_eq!(s.handle_line(r#"{"op":"close"}"#).1, Next::CloseConnection);
        assert_eq!(s.handle_line(r#"{"op":"shutdown"}"#).1, Next::Shutdown);
        assert!(s.is_stopping());
    }

    #[test]
    fn sessions_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let s = service(Some(dir.path().to_path_buf()));
        let id = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        call(&s, &push_line(id, &random_records(&mut rng, &ModelConfig::toy(), 6, 0)));
        let fin = format!(r#"{{"op":"finalize","session":{id}}}"#);
        let before = s.handle_line(&fin).0;
        assert_eq!(s.persist().unwrap(), 1);
        drop(s);

        let s = service(Some(dir.path().to_path_buf()));
        assert_eq!(s.session_ids(), vec![id]);
        assert_eq!(s.handle_line(&fin).0, before);
        let next = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
        assert!(next > id);
    }

    #[test]
    fn random_frames_never_break_the_service() {
        let s = service(None);
        let id = call(&s, r#"{"op":"open"}"#)["session"].as_u64().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let good = random_records(&mut rng, &ModelConfig::toy(), 3, 0);
        call(&s, &push_line(id, &good));
        let snapshot = s.get(id).unwrap().lock().unwrap().clone();
        let pieces = [
            "{", "}", "\"op\"", ":", "\"push\"", "\"open\"", "\"finalize\"", "\"session\"", ",", "[", "]", "null",
            "1", "-3", "1e999", "\"records\"", "\"QUJD\"", "\"\u{1F600}\"", "\\", "true",
        ];
        for _ in 0..10_000 {
            let n = rng.random_range(0..12);
            let frame: String = (0..n).map(|_| pieces[rng.random_range(0..pieces.len())]).collect();
            let frame = if rng.random_bool(0.3) {
                (0..rng.random_range(0..40)).map(|_| rng.random_range(0u8..128) as char).collect()
            } else {
                frame
            };
            if frame.contains("open") || frame.contains("shutdown") || frame.contains("close") {
                continue;
            }
            let (reply, _) = s.handle_line(&frame);
            assert!(serde_json::from_str::<Value>(&reply).is_ok());
        }
        assert_eq!(*s.get(id).unwrap().lock().unwrap(), snapshot);
        assert_eq!(call(&s, &push_line(id, &good))["items_seen"], 6);
    }
}

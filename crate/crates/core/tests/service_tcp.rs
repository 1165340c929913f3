use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use setfuse_core::corpus::{CorpusConfig, SyntheticCorpus};
use setfuse_core::io::encode_record;
use setfuse_core::model::{FusionModel, ModelConfig};
use setfuse_core::service::{serve, Service};
use setfuse_core::stream::FusionSession;

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        Self {
            reader: BufReader::new(s.try_clone().unwrap()),
            writer: s,
        }
    }

    fn call(&mut self, req: Value) -> Value {
        writeln!(self.writer, "{req}").unwrap();
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    }
}

#[test]
fn tcp_round_trip_matches_local_session_and_survives_restart() {
    let cfg = ModelConfig::toy();
    let model = FusionModel::new_random(cfg.clone(), 2).unwrap();
    let corpus = SyntheticCorpus::generate(CorpusConfig::for_model(&cfg), 1, 3, 12).unwrap();
    let records = &corpus.records[..12];
    let state = tempfile::tempdir().unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let service = Arc::new(Service::new(model.clone(), Some(state.path().to_path_buf())).unwrap());
    let server = std::thread::spawn(move || serve(listener, service));

    let mut c = Client::connect(addr);
    let id = c.call(json!({"op": "open"}))["session"].as_u64().unwrap();
    let mut local = FusionSession::open(id, &cfg);
    for chunk in records[..8].chunks(3) {
        let enc: Vec<String> = chunk.iter().map(|r| B64.encode(encode_record(r))).collect();
        let reply = c.call(json!({"op": "push", "session": id, "records": enc}));
        let a = reply["a"].as_array().unwrap();
        assert_eq!(a.len(), cfg.num_centers);
        assert_eq!(a[0].as_array().unwrap().len(), chunk.len());
        local.update(chunk, &model).unwrap();
    }
    let bad = c.call(json!({"op": "push", "session": id + 100, "records": []}));
    assert!(bad["error"].is_string());
    let garbage = c.call(json!({"op": "push", "session": id, "records": ["@@@"]}));
    assert!(garbage["error"].is_string());

    let reply = c.call(json!({"op": "shutdown"}));
    assert!(reply.get("error").is_none());
    server.join().unwrap().unwrap();

    // Restart from the persisted state and finish the probe.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let service = Arc::new(Service::new(model.clone(), Some(state.path().to_path_buf())).unwrap());
    assert_eq!(service.session_ids(), vec![id]);
    let server = std::thread::spawn(move || serve(listener, service));
    let mut c = Client::connect(addr);
    let enc: Vec<String> = records[8..].iter().map(|r| B64.encode(encode_record(r))).collect();
    let reply = c.call(json!({"op": "push", "session": id, "records": enc}));
    assert_eq!(reply["items_seen"], 12);
    local.update(&records[8..], &model).unwrap();

    let fin = c.call(json!({"op": "finalize", "session": id}));
    let fused: Vec<f32> = serde_json::from_value(fin["fused"].clone()).unwrap();
    let expected = local.finalize(&model).unwrap().fused;
    assert_eq!(fused, expected);

    assert_eq!(c.call(json!({"op": "close", "session": id}))["closed"], id);
    c.call(json!({"op": "shutdown"}));
    server.join().unwrap().unwrap();
}

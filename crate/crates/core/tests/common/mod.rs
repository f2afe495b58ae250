#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use bhd_rag::corpus::{write_hu_png, ExpertItem, ExpertKnowledge, HuSlice};
use bhd_rag::retriever::{build_index, train, CosFaceConfig, CosineIndex, EmbeddingHead};
use bhd_rag::synthetic::{self, SyntheticData, SyntheticSpec};
use serde_json::json;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub at: Instant,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }
}

/// A one-response-per-connection HTTP server replaying canned replies.
/// The last reply repeats once the list is exhausted.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
}

impl StubServer {
    pub fn start(replies: Vec<(u16, String)>) -> Self {
        assert!(!replies.is_empty());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for (n, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { break };
                let (status, body) = replies[n.min(replies.len() - 1)].clone();
                if let Some(req) = serve(stream, status, &body) {
                    log.lock().unwrap().push(req);
                }
            }
        });
        Self { url, requests }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, status: u16, body: &str) -> Option<Recorded> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut buf = vec![0u8; len];
    reader.read_exact(&mut buf).ok()?;
    let recorded = Recorded {
        method,
        path,
        headers,
        body: String::from_utf8(buf).ok()?,
        at: Instant::now(),
    };
    let reply = format!(
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let mut stream = stream;
    stream.write_all(reply.as_bytes()).ok()?;
    stream.flush().ok()?;
    Some(recorded)
}

pub fn chat_reply(content: &str) -> String {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
}

/// A trained synthetic corpus with its index.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: SyntheticData,
    pub head: EmbeddingHead,
    pub index: CosineIndex,
    pub loss_history: Vec<f64>,
}

pub fn fixture(spec: SyntheticSpec, epochs: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic::generate(&spec, dir.path()).unwrap();
    let config = CosFaceConfig {
        epochs,
        seed: spec.seed,
        ..CosFaceConfig::default()
    };
    let out = train(&data.train_records(), &data.features, &config).unwrap();
    let index = build_index(&data.corpus(), &data.features, &out.head).unwrap();
    Fixture {
        dir,
        data,
        head: out.head,
        index,
        loss_history: out.loss_history,
    }
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        corpus_size: 40,
        query_size: 10,
        feature_dim: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Expert knowledge with one image item written under `root`.
pub fn expert_with_image(root: &Path) -> ExpertKnowledge {
    write_hu_png(&root.join("expert/bhd.png"), &HuSlice::new(4, 4, vec![-950; 16])).unwrap();
    let mut expert = synthetic::expert_knowledge();
    expert.items.push(ExpertItem {
        image_ref: Some("expert/bhd.png".into()),
        text: "Typical BHD cysts abutting the mediastinal pleura.".into(),
    });
    expert
}

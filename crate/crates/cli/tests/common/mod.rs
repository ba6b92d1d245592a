//! Fixtures shared by the CLI tests and the acceptance runner.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use photocue::corpus::{save_corpus, Split};
use photocue::synthetic::mock_corpus;
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

pub const BIN: &str = env!("CARGO_BIN_EXE_photocue");

const STOPWORDS: &[&str] = &[
    "with", "yesterday", "show", "let", "was", "the", "and", "out", "you", "me", "i", "a", "too", "there", "nice",
];

/// Content words of the sharer's turns in a descriptor prompt.
fn sharer_words(prompt: &str) -> Vec<String> {
    let sharer = ["speaker A.", "speaker B."]
        .iter()
        .find(|s| prompt.contains(*s))
        .map(|s| &s[8..9])
        .unwrap_or("A");
    let context = prompt
        .split_once("dialogue context:\n")
        .and_then(|(_, rest)| rest.split_once("\n\n"))
        .map(|(c, _)| c)
        .unwrap_or("");
    let mut words = Vec::new();
    for line in context.lines() {
        let Some(text) = line.strip_prefix(&format!("{sharer}: ")) else { continue };
        for w in text.split(|c: char| !c.is_alphanumeric()) {
            let w = w.to_lowercase();
            if !w.is_empty() && !STOPWORDS.contains(&w.as_str()) && !words.contains(&w) {
                words.push(w);
            }
        }
    }
    if words.is_empty() {
        words.push("photo".into());
    }
    words
}

/// Deterministic stand-in for an LLM: echoes the sharer's content words in
/// the shape each prompt asks for, wrapped in chatty prose.
pub fn mock_answer(prompt: &str) -> String {
    let words = sharer_words(prompt);
    if prompt.contains("List the answer in JSON format.") {
        let mut answers = serde_json::Map::new();
        for line in prompt.lines() {
            let Some(rest) = line.strip_prefix("- ") else { continue };
            let Some((key, slot)) = rest.split_once(": {") else { continue };
            let answer = if slot.starts_with("one ") { words[0].clone() } else { words.join(", ") };
            answers.insert(key.to_string(), Value::String(answer));
        }
        format!("Sure! Here is my guess:\n{}\nHope this helps.", Value::Object(answers))
    } else if prompt.contains("summarize") {
        format!("The speaker talks about {}.", words.join(" and "))
    } else {
        format!("A photo showing {}.", words.join(", "))
    }
}

pub struct MockLlm {
    pub url: String,
    hits: Arc<AtomicUsize>,
    auth: Arc<std::sync::Mutex<Vec<String>>>,
}

impl MockLlm {
    /// Starts an OpenAI-style chat server on an ephemeral port.
    pub fn start() -> Self {
        let server = Server::http("127.0.0.1:0").expect("bind mock LLM");
        let url = format!("http://{}", server.server_addr().to_ip().expect("tcp"));
        let hits = Arc::new(AtomicUsize::new(0));
        let auth = Arc::new(std::sync::Mutex::new(Vec::new()));
        let (h, a) = (hits.clone(), auth.clone());
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                h.fetch_add(1, Ordering::SeqCst);
                if let Some(v) = req.headers().iter().find(|x| x.field.equiv("Authorization")) {
                    a.lock().unwrap().push(v.value.to_string());
                }
                let request: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                let prompt = request["messages"][0]["content"].as_str().unwrap_or("");
                let reply = json!({"choices": [{"message": {"role": "assistant", "content": mock_answer(prompt)}}]});
                let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap();
                let _ = req.respond(Response::from_string(reply.to_string()).with_header(header));
            }
        });
        Self { url, hits, auth }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn auth_headers(&self) -> Vec<String> {
        self.auth.lock().unwrap().clone()
    }
}

/// Writes a mock corpus as JSONL.
pub fn write_corpus(path: &Path, split: Split, dialogues: usize, photos: usize, seed: u64) {
    let corpus = mock_corpus(split, dialogues, photos, 6, seed).expect("mock corpus");
    save_corpus(&corpus, path).expect("write corpus");
}

/// Standard inputs: train (40), val (20) and test (30 over 30 photos).
pub fn write_inputs(dir: &Path) {
    write_corpus(&dir.join("train.jsonl"), Split::Train, 40, 40, 1);
    write_corpus(&dir.join("val.jsonl"), Split::Val, 20, 20, 2);
    write_corpus(&dir.join("test.jsonl"), Split::Test, 30, 30, 3);
}

/// Runs the binary in `dir` with a clean environment for the variables it reads.
pub fn photocue(dir: &Path, args: &[&str]) -> Output {
    photocue_with(dir, args, &[], None)
}

pub fn photocue_with(dir: &Path, args: &[&str], env: &[(&str, &str)], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .current_dir(dir)
        .env_remove("LLM_BASE_URL")
        .env_remove("LLM_API_KEY")
        .env_remove("EMBED_BASE_URL")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().expect("spawn photocue");
    if let Some(input) = stdin {
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    }
    drop(child.stdin.take());
    child.wait_with_output().expect("wait for photocue")
}

/// Panics with stderr when the run failed.
pub fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "photocue exited with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Minimal HTTP/1.1 client: returns (status, body).
pub fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).expect("connect");
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).expect("read response");
    let status = raw.split_whitespace().nth(1).and_then(|s| s.parse().ok()).expect("status line");
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// The JSON form of dialogue `id` from a corpus file.
pub fn dialogue_json(corpus: &Path, id: &str) -> String {
    let text = std::fs::read_to_string(corpus).unwrap();
    text.lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|v| v["kind"] == "dialogue" && v["id"] == id)
        .map(|mut v| {
            v.as_object_mut().unwrap().remove("kind");
            v.to_string()
        })
        .expect("dialogue present")
}

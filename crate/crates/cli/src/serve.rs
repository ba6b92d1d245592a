//! `POST /retrieve` over HTTP.
//!
//! The photo index is built once at startup and shared read-only by a fixed
//! pool of worker threads. Each request makes at most one LLM call (none on a
//! cache hit), so the pool size also bounds concurrent LLM traffic.

use std::io::Read;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use photocue::corpus::{load_corpus, Corpus, Split};
use photocue::descriptor::{DescriptorGenerator, DescriptorVariant, QuerySet};
use photocue::scoring::Retriever;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use crate::app::{parse_dialogue, single_descriptor, Setup};
use crate::args::{invalid, Command};
use crate::error::CliError;

/// Largest accepted request body.
const MAX_BODY: u64 = 1 << 20;

struct State {
    corpus: Corpus,
    retriever: Retriever,
    generator: DescriptorGenerator,
    queryset: QuerySet,
    default_variant: DescriptorVariant,
    default_k: usize,
}

pub struct ServerHandle {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> String {
        match self.server.server_addr().to_ip() {
            Some(a) => a.to_string(),
            None => "unix socket".into(),
        }
    }

    /// Blocks until every worker has exited.
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    /// Stops accepting requests and waits for in-flight ones.
    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        self.join();
    }
}

/// Loads the corpus, builds the index and starts the worker pool.
pub fn start(cmd: &Command, setup: &Setup) -> Result<ServerHandle, CliError> {
    let split = match cmd.get("split") {
        Some(raw) => raw.parse().map_err(|e| invalid("split", raw, e))?,
        None => Split::Test,
    };
    let corpus = load_corpus(cmd.require("corpus")?, split)?;
    let adapters = match cmd.path("checkpoint") {
        Some(p) => Some(photocue::adapter::load_checkpoint(p)?.0),
        None => None,
    };
    let lambda: f64 = cmd.parse_or("lambda", 1.0)?;
    let fusion = photocue::FusionConfig::new(lambda).map_err(|e| invalid("lambda", &lambda.to_string(), e))?;
    let retriever = Retriever::new(&corpus.photos, setup.encoder(cmd)?, adapters, fusion)?;
    let queryset = match cmd.list("queries") {
        Some(keys) => QuerySet::new(
            keys.iter()
                .map(|k| photocue::Query::builtin(k).ok_or_else(|| invalid("queries", k, "not a known query key")))
                .collect::<Result<_, _>>()?,
        )?,
        None => QuerySet::default(),
    };
    let default_variant = {
        let raw = cmd.get("variant").unwrap_or("queries");
        raw.parse().map_err(|e| invalid("variant", raw, e))?
    };
    let state = Arc::new(State {
        corpus,
        retriever,
        generator: setup.generator(cmd)?,
        queryset,
        default_variant,
        default_k: cmd.parse_or("k", 10)?,
    });

    let addr = cmd.get("addr").unwrap_or("127.0.0.1:8080");
    let server = Arc::new(Server::http(addr).map_err(|e| CliError::Usage(format!("cannot listen on {addr}: {e}")))?);
    let snapshot = cmd.path("snapshot").unwrap_or_else(|| "photocue-serve.config.json".into());
    let body = serde_json::to_string_pretty(&setup.snapshot(cmd)).expect("json values serialize") + "\n";
    std::fs::write(&snapshot, body).map_err(|source| CliError::Io { path: snapshot.display().to_string(), source })?;

    let n: usize = cmd.parse_or::<usize>("workers", 4)?.max(1);
    let workers = (0..n)
        .map(|_| {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(&state, req);
                }
            })
        })
        .collect();
    Ok(ServerHandle { server, workers })
}

fn reply(req: Request, status: u16, body: &Value) {
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let response = Response::from_string(body.to_string()).with_status_code(status).with_header(header);
    let _ = req.respond(response);
}

fn error_body(kind: &str, message: impl std::fmt::Display) -> Value {
    json!({"error": kind, "message": message.to_string()})
}

fn handle(state: &State, mut req: Request) {
    match (req.method(), req.url()) {
        (Method::Get, "/health") => {
            reply(req, 200, &json!({"status": "ok", "photos": state.retriever.len()}));
        }
        (Method::Post, "/retrieve") => {
            let mut body = String::new();
            if let Err(e) = req.as_reader().take(MAX_BODY).read_to_string(&mut body) {
                return reply(req, 400, &error_body("bad_request", e));
            }
            let (status, value) = match retrieve(state, &body) {
                Ok(v) => (200, v),
                Err(e) => {
                    let status = match &e {
                        CliError::Engine(inner) if inner.is_upstream() => 502,
                        CliError::Engine(_) => 422,
                        _ => 400,
                    };
                    (status, error_body(e.kind(), &e))
                }
            };
            reply(req, status, &value);
        }
        (_, "/retrieve") => reply(req, 405, &error_body("method_not_allowed", "use POST")),
        _ => reply(req, 404, &error_body("not_found", "try POST /retrieve")),
    }
}

fn retrieve(state: &State, body: &str) -> Result<Value, CliError> {
    let request: Value = serde_json::from_str(body).map_err(|e| CliError::Usage(format!("request JSON: {e}")))?;
    let dialogue = request.get("dialogue").ok_or_else(|| CliError::Usage("request has no `dialogue`".into()))?;
    let dialogue = parse_dialogue(&dialogue.to_string())?;
    let k = match request.get("k") {
        None | Some(Value::Null) => state.default_k,
        Some(v) => v.as_u64().ok_or_else(|| CliError::Usage("`k` must be a nonnegative integer".into()))? as usize,
    };
    let variant = match request.get("variant").and_then(Value::as_str) {
        Some(raw) => raw.parse().map_err(|e| CliError::Usage(format!("variant: {e}")))?,
        None => state.default_variant,
    };
    let desc = single_descriptor(&state.generator, &state.corpus, &dialogue, variant, &state.queryset)?;
    let ranking = state.retriever.retrieve(&dialogue.id, &desc.text, k)?;
    Ok(json!({"photo_ids": ranking.photo_ids, "scores": ranking.scores}))
}

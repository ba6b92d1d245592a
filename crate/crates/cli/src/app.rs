//! Verb implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use photocue::adapter::{load_checkpoint, save_checkpoint};
use photocue::corpus::{load_corpus, render_object_list, Corpus, Dialogue, ObjectNoise, Split};
use photocue::descriptor::{
    ChatModel, Descriptor, DescriptorCache, DescriptorGenerator, DescriptorMap, DescriptorSource, DescriptorVariant,
    HttpChatModel, LlmEndpointConfig, Query, QuerySet,
};
use photocue::embedding::{image_key, text_key, write_store, EmbeddingStore, Encoder, RemoteEncoder};
use photocue::eval::{
    ablate_queries, default_lambda_grid, evaluate_in, metrics_for_matrix, sensitivity, sweep_lambda,
    tune_ensemble_weights, EvalContext, ReportRow, ReportTable,
};
use photocue::retry::RetryPolicy;
use photocue::scoring::{ensemble_with, write_rankings, EnsembleMode, FusionConfig, Retriever};
use photocue::trainer::{train_with, TrainConfig};
use photocue::{AdapterParams, Execution};
use serde_json::{json, Value};

use crate::args::{invalid, Command, Verb};
use crate::error::CliError;

pub const ENV_LLM_URL: &str = "LLM_BASE_URL";
pub const ENV_LLM_KEY: &str = "LLM_API_KEY";
pub const ENV_EMBED_URL: &str = "EMBED_BASE_URL";

const REMOTE_EMBED_TIMEOUT: Duration = Duration::from_secs(120);

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

/// Settings resolved from flags, config and environment, shared by all verbs.
pub struct Setup {
    pub exec: Execution,
    pub llm_url: Option<String>,
    pub embed_url: Option<String>,
    pub encoder_kind: String,
}

impl Setup {
    pub fn resolve(cmd: &Command) -> Result<Self, CliError> {
        let exec = if cmd.switch("sequential") { Execution::Sequential } else { Execution::default() };
        let llm_url = cmd.get("llm-url").map(String::from).or_else(|| env(ENV_LLM_URL));
        let embed_url = cmd.get("embed-url").map(String::from).or_else(|| env(ENV_EMBED_URL));
        let encoder_kind = match cmd.get("encoder") {
            Some(k @ ("mock" | "store" | "remote")) => k.to_string(),
            Some(other) => return Err(invalid("encoder", other, "expected mock, store or remote")),
            None if cmd.get("store").is_some() => "store".into(),
            None if embed_url.is_some() && cmd.verb.flag("embed-url").is_some() => "remote".into(),
            None => "mock".into(),
        };
        Ok(Self { exec, llm_url, embed_url, encoder_kind })
    }

    pub fn encoder(&self, cmd: &Command) -> Result<Encoder, CliError> {
        let enc = match self.encoder_kind.as_str() {
            "store" => Encoder::open_store(cmd.require("store")?)?,
            "remote" => {
                let url = self.embed_url.clone().ok_or_else(|| CliError::MissingRequired("--embed-url".into()))?;
                Encoder::remote(RemoteEncoder::new(url, REMOTE_EMBED_TIMEOUT, RetryPolicy::default()))
            }
            _ => Encoder::mock(cmd.parse_or("mock-dim", 64)?, cmd.parse_or("mock-seed", 0)?)?,
        };
        Ok(enc.with_char_budget(cmd.parse_or("char-budget", 4096)?).with_execution(self.exec))
    }

    pub fn generator(&self, cmd: &Command) -> Result<DescriptorGenerator, CliError> {
        let model_name = cmd.get("llm-model").unwrap_or("llama-2-13b-chat").to_string();
        let llm: Option<Arc<dyn ChatModel>> = match &self.llm_url {
            Some(url) => {
                let config = LlmEndpointConfig {
                    timeout_secs: cmd.parse_or("llm-timeout", 120)?,
                    max_retries: cmd.parse_or("llm-retries", 3)?,
                    api_key: env(ENV_LLM_KEY),
                    ..LlmEndpointConfig::new(url.clone(), model_name.clone())
                };
                Some(Arc::new(HttpChatModel::new(config)))
            }
            None => None,
        };
        let cache = match cmd.path("cache") {
            Some(p) => DescriptorCache::open(p)?,
            None => DescriptorCache::in_memory(),
        };
        Ok(DescriptorGenerator::new(llm, cache)
            .with_model(model_name)
            .with_parallelism(cmd.parse_or("parallelism", 4)?)
            .with_execution(self.exec))
    }

    /// Reproducibility record written next to every run's output. The API
    /// key is deliberately absent.
    pub fn snapshot(&self, cmd: &Command) -> Value {
        json!({
            "verb": cmd.verb.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "config_file": cmd.config_path.as_ref().map(|p| p.display().to_string()),
            "options": cmd.options,
            "resolved": {
                "execution": if self.exec.is_parallel() { "parallel" } else { "sequential" },
                "encoder": self.encoder_kind,
                "llm_url": self.llm_url,
                "embed_url": self.embed_url,
            },
        })
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
    fs::write(path, body).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// `<stem>.<ext>`, matching where report tables write their files.
fn stem_with(stem: &Path, ext: &str) -> PathBuf {
    stem.with_extension(ext)
}

fn write_snapshot(cmd: &Command, setup: &Setup, default: PathBuf) -> Result<(), CliError> {
    let path = cmd.path("snapshot").unwrap_or(default);
    write_json(&path, &setup.snapshot(cmd))
}

fn split_of(cmd: &Command, fallback: Split) -> Result<Split, CliError> {
    match cmd.get("split") {
        Some(raw) => raw.parse().map_err(|e| invalid("split", raw, e)),
        None => Ok(fallback),
    }
}

fn corpus(cmd: &Command, flag: &str, split: Split) -> Result<Corpus, CliError> {
    Ok(load_corpus(cmd.require(flag)?, split)?)
}

fn variant(flag: &str, raw: &str) -> Result<DescriptorVariant, CliError> {
    raw.parse().map_err(|e| invalid(flag, raw, e))
}

fn main_variant(cmd: &Command) -> Result<DescriptorVariant, CliError> {
    variant("variant", cmd.get("variant").unwrap_or("queries"))
}

fn builtin_query(flag: &str, key: &str) -> Result<Query, CliError> {
    Query::builtin(key).ok_or_else(|| invalid(flag, key, "not a known query key"))
}

fn queryset(cmd: &Command) -> Result<QuerySet, CliError> {
    match cmd.list("queries") {
        Some(keys) => {
            let queries = keys.iter().map(|k| builtin_query("queries", k)).collect::<Result<_, _>>()?;
            Ok(QuerySet::new(queries)?)
        }
        None => Ok(QuerySet::default()),
    }
}

fn fusion_config(cmd: &Command) -> Result<FusionConfig, CliError> {
    let lambda: f64 = cmd.parse_or("lambda", 1.0)?;
    FusionConfig::new(lambda).map_err(|e| invalid("lambda", &lambda.to_string(), e))
}

fn checkpoint(cmd: &Command) -> Result<Option<AdapterParams>, CliError> {
    cmd.path("checkpoint").map(|p| Ok(load_checkpoint(p)?.0)).transpose()
}

/// Descriptors for every dialogue of `corpus`.
fn descriptors(
    gen: &DescriptorGenerator,
    corpus: &Corpus,
    variant: DescriptorVariant,
    qs: &QuerySet,
) -> Result<DescriptorMap, CliError> {
    Ok(gen.descriptors(corpus, variant, qs)?)
}

/// Extra report config shared by the evaluation verbs.
fn report_config(cmd: &Command, base: Value, variant: DescriptorVariant, qs: &QuerySet) -> Value {
    let mut cfg = base;
    if let Value::Object(obj) = &mut cfg {
        obj.insert("variant".into(), json!(variant.name()));
        if variant == DescriptorVariant::Queries {
            obj.insert("queries".into(), json!(qs.keys()));
        }
        obj.insert("checkpoint".into(), json!(cmd.get("checkpoint")));
        obj.insert("llm_model".into(), json!(cmd.get("llm-model")));
    }
    cfg
}

fn emit_table(table: &ReportTable, stem: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    table.write_all(stem)?;
    stdout.write_all(table.to_text().as_bytes()).map_err(|source| CliError::Io { path: "<stdout>".into(), source })
}

fn print_json(stdout: &mut dyn Write, value: &Value) -> Result<(), CliError> {
    let line = serde_json::to_string_pretty(value).expect("json values serialize");
    writeln!(stdout, "{line}").map_err(|source| CliError::Io { path: "<stdout>".into(), source })
}

/// Runs one parsed command. Results go to `stdout` and to files; the run
/// time is reported on stderr.
pub fn run(cmd: &Command, stdin: &mut dyn Read, stdout: &mut dyn Write) -> Result<(), CliError> {
    let start = Instant::now();
    let setup = Setup::resolve(cmd)?;
    match cmd.verb {
        Verb::Generate => generate(cmd, &setup, stdout)?,
        Verb::Embed => embed(cmd, &setup, stdout)?,
        Verb::Retrieve => retrieve(cmd, &setup, stdin, stdout)?,
        Verb::Train => train_verb(cmd, &setup, stdout)?,
        Verb::Evaluate => evaluate_verb(cmd, &setup, stdout)?,
        Verb::Sweep => sweep(cmd, &setup, stdout)?,
        Verb::Ablate => ablate(cmd, &setup, stdout)?,
        Verb::Sensitivity => sensitivity_verb(cmd, &setup, stdout)?,
        Verb::Ensemble => ensemble_verb(cmd, &setup, stdout)?,
        Verb::Serve => {
            let handle = crate::serve::start(cmd, &setup)?;
            eprintln!("listening on http://{}", handle.addr());
            handle.join();
        }
    }
    eprintln!("{} finished in {:.3}s", cmd.verb, start.elapsed().as_secs_f64());
    Ok(())
}

fn generate(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let corpus = corpus(cmd, "corpus", split_of(cmd, Split::Test)?)?;
    let gen = setup.generator(cmd)?;
    let (v, qs) = (main_variant(cmd)?, queryset(cmd)?);
    let before = gen.cache().len();
    let map = descriptors(&gen, &corpus, v, &qs)?;
    // Non-LLM variants bypass the cache on lookup; record them anyway so the
    // cache file holds every descriptor a later run will use.
    for desc in map.values() {
        gen.cache().insert(desc.clone())?;
    }
    let cache = cmd.path("cache").expect("required flag");
    write_snapshot(cmd, setup, append_ext(&cache, ".config.json"))?;
    print_json(
        stdout,
        &json!({
            "variant": v.name(),
            "descriptors": map.len(),
            "added": gen.cache().len() - before,
            "cache": cache.display().to_string(),
        }),
    )
}

fn embed(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    if setup.encoder_kind == "store" {
        return Err(CliError::Usage("embed needs a mock or remote encoder to produce vectors".into()));
    }
    let corpus = corpus(cmd, "corpus", split_of(cmd, Split::Test)?)?;
    let enc = setup.encoder(cmd)?;
    let gen = setup.generator(cmd)?;
    let qs = queryset(cmd)?;
    let names = cmd.list("variants").unwrap_or_else(|| vec![cmd.get("variant").unwrap_or("queries").to_string()]);
    let mut texts = BTreeSet::new();
    for name in &names {
        let map = descriptors(&gen, &corpus, variant("variants", name)?, &qs)?;
        texts.extend(map.values().map(|d| enc.truncate(&d.text).to_string()));
    }
    let n_descriptors = texts.len();
    texts.extend(corpus.photos.iter().map(|p| enc.truncate(&render_object_list(&p.objects)).to_string()));
    let texts: Vec<String> = texts.into_iter().collect();
    let text_vectors = enc.encode_texts(&texts)?;
    let image_vectors = enc.encode_photos(&corpus.photos)?;

    let dim = text_vectors.first().or(image_vectors.first()).map_or(0, |v| v.dim());
    let mut store = EmbeddingStore::new(dim);
    for (t, v) in texts.iter().zip(&text_vectors) {
        store.insert(text_key(t), v.values().to_vec())?;
    }
    for (p, v) in corpus.photos.iter().zip(&image_vectors) {
        store.insert(image_key(&p.id), v.values().to_vec())?;
    }
    let out = cmd.path("out").expect("required flag");
    write_store(&out, &store)?;
    write_snapshot(cmd, setup, append_ext(&out, ".config.json"))?;
    print_json(
        stdout,
        &json!({
            "store": out.display().to_string(),
            "dim": dim,
            "records": store.len(),
            "descriptor_texts": n_descriptors,
            "object_texts": texts.len() - n_descriptors,
            "images": image_vectors.len(),
        }),
    )
}

/// Reads one dialogue as JSON. A missing `id` is derived from the content so
/// that distinct dialogues never share a cache entry.
pub fn parse_dialogue(raw: &str) -> Result<Dialogue, CliError> {
    let mut value: Value = serde_json::from_str(raw).map_err(|e| CliError::Data(format!("dialogue JSON: {e}")))?;
    let obj = value.as_object_mut().ok_or_else(|| CliError::Data("dialogue JSON must be an object".into()))?;
    if !obj.contains_key("id") {
        let content = json!({"turns": obj.get("turns"), "sharer": obj.get("sharer")}).to_string();
        let digest = text_key(&content);
        let hex = digest.rsplit(':').next().unwrap_or(&digest);
        obj.insert("id".into(), json!(format!("query-{}", &hex[..16])));
    }
    let dialogue: Dialogue = serde_json::from_value(value).map_err(|e| CliError::Data(format!("dialogue JSON: {e}")))?;
    dialogue.validate()?;
    Ok(dialogue)
}

/// The descriptor for a single dialogue; provided captions come from the corpus.
pub fn single_descriptor(
    gen: &DescriptorGenerator,
    corpus: &Corpus,
    dialogue: &Dialogue,
    variant: DescriptorVariant,
    qs: &QuerySet,
) -> Result<Descriptor, CliError> {
    if variant == DescriptorVariant::ProvidedCaption {
        return corpus
            .provided_descriptors
            .get(&dialogue.id)
            .cloned()
            .ok_or_else(|| CliError::Data(format!("no provided descriptor for dialogue {}", dialogue.id)));
    }
    Ok(gen.descriptor_for(dialogue, variant, qs)?)
}

fn retrieve(cmd: &Command, setup: &Setup, stdin: &mut dyn Read, stdout: &mut dyn Write) -> Result<(), CliError> {
    let k: usize = cmd.parse_or("k", 10)?;
    let fusion = fusion_config(cmd)?;
    let (v, qs) = (main_variant(cmd)?, queryset(cmd)?);
    let corpus = corpus(cmd, "corpus", split_of(cmd, Split::Test)?)?;
    let source = cmd.get("dialogue").unwrap_or("-");
    let raw = if source == "-" {
        let mut s = String::new();
        stdin.read_to_string(&mut s).map_err(|source| CliError::Io { path: "<stdin>".into(), source })?;
        s
    } else {
        fs::read_to_string(source).map_err(|e| CliError::Io { path: source.to_string(), source: e })?
    };
    let dialogue = parse_dialogue(&raw)?;
    let gen = setup.generator(cmd)?;
    let desc = single_descriptor(&gen, &corpus, &dialogue, v, &qs)?;
    let retriever = Retriever::new(&corpus.photos, setup.encoder(cmd)?, checkpoint(cmd)?, fusion)?;
    let ranking = retriever.retrieve(&dialogue.id, &desc.text, k)?;
    let result = json!({"dialogue_id": dialogue.id, "photo_ids": ranking.photo_ids, "scores": ranking.scores});
    let snapshot_default = match cmd.path("out") {
        Some(out) => {
            write_json(&out, &result)?;
            append_ext(&out, ".config.json")
        }
        None => PathBuf::from("photocue-retrieve.config.json"),
    };
    write_snapshot(cmd, setup, snapshot_default)?;
    print_json(stdout, &result)
}

fn train_verb(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let train_corpus = corpus(cmd, "train-corpus", Split::Train)?;
    let val_corpus = corpus(cmd, "val-corpus", Split::Val)?;
    let enc = setup.encoder(cmd)?;
    let gen = setup.generator(cmd)?;
    let (v, qs) = (main_variant(cmd)?, queryset(cmd)?);
    let cfg = TrainConfig {
        batch_size: cmd.parse_or("batch-size", 56)?,
        learning_rate: cmd.parse_or("lr", 1e-5)?,
        lambda: cmd.parse_or("lambda", 1.0)?,
        epochs: cmd.parse_or("epochs", 10)?,
        seed: cmd.parse_or("seed", 0)?,
        symmetric: cmd.switch("symmetric"),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train_descs = descriptors(&gen, &train_corpus, v, &qs)?;
    let val_descs = descriptors(&gen, &val_corpus, v, &qs)?;
    let (params, history) = train_with(&train_corpus, &train_descs, &val_corpus, &val_descs, &enc, &cfg)?;
    let out = cmd.path("out").expect("required flag");
    let meta = json!({
        "train": cfg,
        "variant": v.name(),
        "encoder": enc.describe(),
        "history": history,
    });
    save_checkpoint(&out, &params, meta)?;
    write_snapshot(cmd, setup, append_ext(&out, ".config.json"))?;
    print_json(
        stdout,
        &json!({
            "checkpoint": out.display().to_string(),
            "best_epoch": history.best_epoch,
            "baseline": history.baseline,
            "best": history.best(),
            "tau": params.tau(),
        }),
    )
}

struct EvalSetup {
    corpus: Corpus,
    enc: Encoder,
    adapters: Option<AdapterParams>,
    gen: DescriptorGenerator,
    variant: DescriptorVariant,
    qs: QuerySet,
    fusion: FusionConfig,
    stem: PathBuf,
}

impl EvalSetup {
    fn load(cmd: &Command, setup: &Setup) -> Result<Self, CliError> {
        let fusion = fusion_config(cmd)?;
        Ok(Self {
            fusion,
            corpus: corpus(cmd, "corpus", split_of(cmd, Split::Test)?)?,
            enc: setup.encoder(cmd)?,
            adapters: checkpoint(cmd)?,
            gen: setup.generator(cmd)?,
            variant: main_variant(cmd)?,
            qs: queryset(cmd)?,
            stem: cmd.path("out").expect("required flag"),
        })
    }

    fn context(&self, setup: &Setup) -> EvalContext<'_> {
        EvalContext::new(&self.corpus, &self.enc).with_adapters(self.adapters.as_ref()).with_execution(setup.exec)
    }

    fn descriptors(&self) -> Result<DescriptorMap, CliError> {
        descriptors(&self.gen, &self.corpus, self.variant, &self.qs)
    }

    fn finish(&self, cmd: &Command, setup: &Setup, mut table: ReportTable, stdout: &mut dyn Write) -> Result<(), CliError> {
        table.config = report_config(cmd, table.config, self.variant, &self.qs);
        emit_table(&table, &self.stem, stdout)?;
        write_snapshot(cmd, setup, stem_with(&self.stem, "config.json"))
    }
}

fn evaluate_verb(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let es = EvalSetup::load(cmd, setup)?;
    let report = evaluate_in(&es.context(setup), &es.descriptors()?, &es.fusion, &cmd.seeds("seeds")?)?;
    let mut rows: Vec<ReportRow> =
        report.per_seed.iter().map(|s| ReportRow::new(format!("seed={}", s.seed), s.metrics)).collect();
    rows.push(ReportRow::new("mean", report.mean));
    es.finish(cmd, setup, ReportTable { config: report.config, rows }, stdout)
}

fn sweep(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let es = EvalSetup::load(cmd, setup)?;
    let lambdas = cmd.parse_list::<f64>("lambdas")?.unwrap_or_else(default_lambda_grid);
    let table = sweep_lambda(&es.context(setup), &es.descriptors()?, &lambdas)?;
    es.finish(cmd, setup, table, stdout)
}

fn ablate(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut es = EvalSetup::load(cmd, setup)?;
    es.variant = DescriptorVariant::Queries;
    let base = es.qs.clone();
    let removals = cmd.list("remove").unwrap_or_else(|| base.keys());
    for key in &removals {
        if base.get(key).is_none() {
            return Err(invalid("remove", key, "not in the base query set"));
        }
    }
    let additions = cmd
        .list("add")
        .unwrap_or_default()
        .iter()
        .map(|k| {
            if base.get(k).is_some() {
                return Err(invalid("add", k, "already in the base query set"));
            }
            builtin_query("add", k)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let table = ablate_queries(&es.context(setup), &es.gen, &es.fusion, &base, &removals, &additions)?;
    es.finish(cmd, setup, table, stdout)
}

fn sensitivity_verb(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let es = EvalSetup::load(cmd, setup)?;
    let rates = cmd.parse_list::<f64>("rates")?.unwrap_or_else(|| photocue::eval::DEFAULT_RATES.to_vec());
    let modes = cmd.parse_list::<ObjectNoise>("modes")?.unwrap_or_default();
    let vocab = match cmd.path("vocab-corpus") {
        Some(p) => load_corpus(p, Split::Train)?.object_vocabulary(),
        None => es.corpus.object_vocabulary(),
    };
    let table =
        sensitivity(&es.context(setup), &es.descriptors()?, &es.fusion, &rates, &modes, &cmd.seeds("seeds")?, &vocab)?;
    es.finish(cmd, setup, table, stdout)
}

fn ensemble_mode(cmd: &Command) -> Result<EnsembleMode, CliError> {
    match cmd.get("ensemble-mode").unwrap_or("zscore") {
        "zscore" | "z-score" => Ok(EnsembleMode::ZScore),
        "rrf" => Ok(EnsembleMode::ReciprocalRank { k: cmd.parse_or("rrf-k", 60.0)? }),
        other => Err(invalid("ensemble-mode", other, "expected zscore or rrf")),
    }
}

fn ensemble_verb(cmd: &Command, setup: &Setup, stdout: &mut dyn Write) -> Result<(), CliError> {
    let es = EvalSetup::load(cmd, setup)?;
    let ctx = es.context(setup);
    let cfg = es.fusion;
    let mode = ensemble_mode(cmd)?;
    let variants: Vec<DescriptorVariant> =
        cmd.list("variants").unwrap_or_default().iter().map(|n| variant("variants", n)).collect::<Result<_, _>>()?;
    if variants.is_empty() {
        return Err(invalid("variants", cmd.get("variants").unwrap_or(""), "no variants"));
    }
    let mut matrices = Vec::with_capacity(variants.len());
    let mut rows = Vec::with_capacity(variants.len() + 1);
    for &v in &variants {
        let m = ctx.score(&descriptors(&es.gen, &es.corpus, v, &es.qs)?)?;
        rows.push(ReportRow::new(v.name(), metrics_for_matrix(&m, &es.corpus, &cfg)?));
        matrices.push(m);
    }

    let weights = match (cmd.parse_list::<f64>("weights")?, cmd.path("tune-on")) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--weights and --tune-on are mutually exclusive".into())),
        (Some(w), None) => {
            if w.len() != variants.len() {
                return Err(invalid("weights", cmd.get("weights").unwrap_or(""), "need one weight per variant"));
            }
            w
        }
        (None, Some(path)) => {
            let val = load_corpus(path, Split::Val)?;
            let vctx = EvalContext { corpus: &val, ..ctx };
            let val_matrices = variants
                .iter()
                .map(|&v| Ok(vctx.score(&descriptors(&es.gen, &val, v, &es.qs)?)?))
                .collect::<Result<Vec<_>, CliError>>()?;
            let grid = cmd.parse_list::<f64>("weight-grid")?.unwrap_or_default();
            tune_ensemble_weights(&val_matrices, &val, &cfg, &grid, mode, setup.exec)?.0
        }
        (None, None) => vec![1.0; variants.len()],
    };
    let rankings = ensemble_with(&matrices, &cfg, &weights, mode)?;
    rows.push(ReportRow::new("ensemble", photocue::eval::metrics_for_rankings(&rankings, &es.corpus)?));
    let rankings_path = stem_with(&es.stem, "rankings.jsonl");
    write_rankings(&rankings_path, &rankings)
        .map_err(|source| CliError::Io { path: rankings_path.display().to_string(), source })?;

    let mode_json = match mode {
        EnsembleMode::ZScore => json!("zscore"),
        EnsembleMode::ReciprocalRank { k } => json!({"rrf": k}),
    };
    let weights_by_variant: BTreeMap<&str, f64> = variants.iter().map(|v| v.name()).zip(weights.iter().copied()).collect();
    let mut config = json!({
        "split": es.corpus.split,
        "dialogues": es.corpus.dialogues.len(),
        "photos": es.corpus.photos.len(),
        "encoder": es.enc.describe(),
        "adapters": es.adapters.is_some(),
        "experiment": "ensemble",
        "lambda": cfg.lambda,
        "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
        "weights": weights_by_variant,
        "mode": mode_json,
        "tuned_on": cmd.get("tune-on"),
    });
    if let Value::Object(obj) = &mut config {
        obj.insert("checkpoint".into(), json!(cmd.get("checkpoint")));
        obj.insert("llm_model".into(), json!(cmd.get("llm-model")));
    }
    let table = ReportTable { config, rows };
    emit_table(&table, &es.stem, stdout)?;
    write_snapshot(cmd, setup, stem_with(&es.stem, "config.json"))
}

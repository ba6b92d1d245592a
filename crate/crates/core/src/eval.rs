//! Recall@k evaluation and the experiment tables built on it: lambda sweeps,
//! query-set ablations, object-noise sensitivity and ensemble weight tuning.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapter::AdapterParams;
use crate::corpus::{perturb_objects_with_vocab, Corpus, CorpusError, ObjectNoise};
use crate::descriptor::{DescriptorError, DescriptorMap, DescriptorSource, DescriptorVariant, Query, QuerySet};
use crate::embedding::Encoder;
use crate::exec::Execution;
use crate::scoring::{
    embed_descriptors, ensemble_with, rank_in, score_all_in, score_embedded, CandidateIndex, EnsembleMode,
    FusionConfig, Ranking, ScoreMatrix, ScoringError,
};

/// The cutoffs reported everywhere.
pub const KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to evaluate")]
    EmptyInput,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dialogue {0} has no target photo")]
    MissingTarget(String),
    #[error("dialogue {0} has no ranking")]
    MissingRanking(String),
    #[error("target photo {photo} of dialogue {dialogue} is not among the candidates")]
    TargetNotRanked { dialogue: String, photo: String },
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("report {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl EvalError {
    pub fn is_upstream(&self) -> bool {
        match self {
            EvalError::Scoring(ScoringError::Embedding(e)) => e.is_upstream(),
            EvalError::Descriptor(e) => e.is_upstream(),
            _ => false,
        }
    }
}

/// Fraction of 1-based ranks that are `<= k`.
pub fn recall_at_k(target_ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if target_ranks.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let hits = target_ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / target_ranks.len() as f64)
}

/// R@1, R@5, R@10 and their mean, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub avg: f64,
}

impl Metrics {
    pub fn from_ranks(target_ranks: &[usize]) -> Result<Self, EvalError> {
        let r1 = recall_at_k(target_ranks, KS[0])?;
        let r5 = recall_at_k(target_ranks, KS[1])?;
        let r10 = recall_at_k(target_ranks, KS[2])?;
        Ok(Self { r1, r5, r10, avg: (r1 + r5 + r10) / 3.0 })
    }

    /// Arithmetic mean of each field.
    pub fn mean(all: &[Metrics]) -> Result<Self, EvalError> {
        if all.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        let n = all.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Ok(Self { r1: sum(|m| m.r1), r5: sum(|m| m.r5), r10: sum(|m| m.r10), avg: sum(|m| m.avg) })
    }
}

/// 1-based position of each dialogue's target photo, in corpus order.
/// Dialogues without a target are an error: evaluation needs ground truth.
pub fn target_ranks(rankings: &[Ranking], corpus: &Corpus) -> Result<Vec<usize>, EvalError> {
    let by_id: HashMap<&str, &Ranking> = rankings.iter().map(|r| (r.dialogue_id.as_str(), r)).collect();
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let target = d.target_photo_id.as_deref().ok_or_else(|| EvalError::MissingTarget(d.id.clone()))?;
            let ranking = by_id.get(d.id.as_str()).ok_or_else(|| EvalError::MissingRanking(d.id.clone()))?;
            ranking.position(target).ok_or_else(|| EvalError::TargetNotRanked {
                dialogue: d.id.clone(),
                photo: target.into(),
            })
        })
        .collect()
}

pub fn metrics_for_rankings(rankings: &[Ranking], corpus: &Corpus) -> Result<Metrics, EvalError> {
    Metrics::from_ranks(&target_ranks(rankings, corpus)?)
}

/// Target ranks straight from a score matrix, without materializing full
/// rankings: the rank of the target is one plus the number of candidates that
/// beat it (higher score, or equal score at a lower index).
pub fn matrix_target_ranks(
    matrix: &ScoreMatrix,
    corpus: &Corpus,
    cfg: &FusionConfig,
) -> Result<Vec<usize>, EvalError> {
    let photo_pos: HashMap<&str, usize> =
        matrix.photo_ids.iter().enumerate().map(|(j, p)| (p.as_str(), j)).collect();
    let row_pos: HashMap<&str, usize> =
        matrix.dialogue_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let target = d.target_photo_id.as_deref().ok_or_else(|| EvalError::MissingTarget(d.id.clone()))?;
            let i = *row_pos.get(d.id.as_str()).ok_or_else(|| EvalError::MissingRanking(d.id.clone()))?;
            let t = *photo_pos.get(target).ok_or_else(|| EvalError::TargetNotRanked {
                dialogue: d.id.clone(),
                photo: target.into(),
            })?;
            let row = matrix.fused_row(i, cfg);
            let ahead = row.iter().enumerate().filter(|&(j, &s)| s > row[t] || (s == row[t] && j < t)).count();
            Ok(ahead + 1)
        })
        .collect()
}

pub fn metrics_for_matrix(matrix: &ScoreMatrix, corpus: &Corpus, cfg: &FusionConfig) -> Result<Metrics, EvalError> {
    Metrics::from_ranks(&matrix_target_ranks(matrix, corpus, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub per_seed: Vec<SeedMetrics>,
    /// Mean over seeds.
    pub mean: Metrics,
    /// Wall time; not serialized so that reports stay byte-identical across runs.
    #[serde(skip)]
    pub runtime: Duration,
}

impl EvalReport {
    pub fn table(&self, axis: &str) -> ReportTable {
        ReportTable { config: self.config.clone(), rows: vec![ReportRow::new(axis, self.mean)] }
    }
}

/// One line of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub avg: f64,
}

impl ReportRow {
    pub fn new(axis: impl Into<String>, m: Metrics) -> Self {
        Self { axis: axis.into(), r1: m.r1, r5: m.r5, r10: m.r10, avg: m.avg }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics { r1: self.r1, r5: self.r5, r10: self.r10, avg: self.avg }
    }
}

/// `{config, rows: [{axis, r1, r5, r10, avg}]}` with recall as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn row(&self, axis: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.axis == axis)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["axis", "r1", "r5", "r10", "avg"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.axis.clone(), r.r1.to_string(), r.r5.to_string(), r.r10.to_string(), r.avg.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Fixed-width table with recall in percent.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.axis.chars().count()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "axis", "R@1", "R@5", "R@10", "avg");
        for r in &self.rows {
            out += &format!(
                "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}\n",
                r.axis,
                100.0 * r.r1,
                100.0 * r.r5,
                100.0 * r.r10,
                100.0 * r.avg
            );
        }
        out
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>.txt`.
    pub fn write_all(&self, stem: impl AsRef<Path>) -> Result<(), EvalError> {
        let stem = stem.as_ref();
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv()), ("txt", self.to_text())] {
            let path = stem.with_extension(ext);
            fs::write(&path, body).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }
}

/// Shared inputs of every evaluation.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub corpus: &'a Corpus,
    pub enc: &'a Encoder,
    pub adapters: Option<&'a AdapterParams>,
    pub exec: Execution,
}

impl<'a> EvalContext<'a> {
    pub fn new(corpus: &'a Corpus, enc: &'a Encoder) -> Self {
        Self { corpus, enc, adapters: None, exec: Execution::default() }
    }

    pub fn with_adapters(mut self, adapters: Option<&'a AdapterParams>) -> Self {
        self.adapters = adapters;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn score(&self, descriptors: &DescriptorMap) -> Result<ScoreMatrix, EvalError> {
        Ok(score_all_in(self.exec, descriptors, self.corpus, self.enc, self.adapters)?)
    }

    fn config(&self, extra: serde_json::Value) -> serde_json::Value {
        let mut cfg = json!({
            "split": self.corpus.split,
            "dialogues": self.corpus.dialogues.len(),
            "photos": self.corpus.photos.len(),
            "encoder": self.enc.describe(),
            "adapters": self.adapters.is_some(),
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (cfg.as_object_mut(), extra) {
            obj.extend(extra);
        }
        cfg
    }
}

/// Scores, ranks and computes R@{1,5,10} once per seed.
///
/// Scoring is deterministic, so every seed yields the same metrics; seeds
/// matter for the perturbation-based tables and for training.
pub fn evaluate(
    corpus: &Corpus,
    descriptors: &DescriptorMap,
    enc: &Encoder,
    adapters: Option<&AdapterParams>,
    cfg: &FusionConfig,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    evaluate_in(&EvalContext::new(corpus, enc).with_adapters(adapters), descriptors, cfg, seeds)
}

pub fn evaluate_in(
    ctx: &EvalContext,
    descriptors: &DescriptorMap,
    cfg: &FusionConfig,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::InvalidConfig("at least one seed is required".into()));
    }
    let start = std::time::Instant::now();
    let matrix = ctx.score(descriptors)?;
    let rankings = rank_in(ctx.exec, &matrix, cfg);
    let per_seed: Vec<SeedMetrics> = seeds
        .iter()
        .map(|&seed| Ok(SeedMetrics { seed, metrics: metrics_for_rankings(&rankings, ctx.corpus)? }))
        .collect::<Result<_, EvalError>>()?;
    let mean = Metrics::mean(&per_seed.iter().map(|s| s.metrics).collect::<Vec<_>>())?;
    Ok(EvalReport {
        config: ctx.config(json!({"lambda": cfg.lambda, "seeds": seeds})),
        per_seed,
        mean,
        runtime: start.elapsed(),
    })
}

/// The default lambda grid, 0 to 2 in steps of 0.2.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 5.0).collect()
}

/// One row per lambda; descriptors and embeddings are computed once.
pub fn sweep_lambda(
    ctx: &EvalContext,
    descriptors: &DescriptorMap,
    lambdas: &[f64],
) -> Result<ReportTable, EvalError> {
    let cfgs: Vec<FusionConfig> = lambdas.iter().map(|&l| FusionConfig::new(l)).collect::<Result<_, _>>()?;
    let matrix = ctx.score(descriptors)?;
    let metrics = ctx.exec.try_map(&cfgs, |cfg| metrics_for_matrix(&matrix, ctx.corpus, cfg))?;
    Ok(ReportTable {
        config: ctx.config(json!({"experiment": "lambda_sweep", "lambdas": lambdas})),
        rows: cfgs.iter().zip(metrics).map(|(c, m)| ReportRow::new(format!("lambda={}", c.lambda), m)).collect(),
    })
}

/// Query-set ablation: the original set, each removal, each addition.
/// Descriptors come from `source`, so cached answers are reused.
pub fn ablate_queries(
    ctx: &EvalContext,
    source: &dyn DescriptorSource,
    cfg: &FusionConfig,
    base: &QuerySet,
    removals: &[String],
    additions: &[Query],
) -> Result<ReportTable, EvalError> {
    let mut sets = vec![("Original".to_string(), base.clone())];
    for key in removals {
        sets.push((format!("- {key}"), base.without(key)?));
    }
    for q in additions {
        sets.push((format!("+ {}", q.key), base.with(q.clone())?));
    }
    let mut rows = Vec::with_capacity(sets.len());
    for (axis, set) in &sets {
        let descriptors = source.descriptors(ctx.corpus, DescriptorVariant::Queries, set)?;
        let matrix = ctx.score(&descriptors)?;
        rows.push(ReportRow::new(axis.clone(), metrics_for_matrix(&matrix, ctx.corpus, cfg)?));
    }
    Ok(ReportTable {
        config: ctx.config(json!({
            "experiment": "query_ablation",
            "lambda": cfg.lambda,
            "base": base.keys(),
            "removals": removals,
            "additions": additions.iter().map(|q| q.key.clone()).collect::<Vec<_>>(),
        })),
        rows,
    })
}

/// Default sensitivity rates.
pub const DEFAULT_RATES: [f64; 4] = [0.0, 0.15, 0.25, 0.35];

/// Object-noise sensitivity: one row per (mode, rate), averaged over seeds,
/// plus a `missing@1.00` row (only the vision score then discriminates).
///
/// Image and descriptor embeddings are computed once; only the object lists
/// are re-encoded per cell. `vocab` is the replacement pool for incorrect
/// objects, normally the training split's object vocabulary.
pub fn sensitivity(
    ctx: &EvalContext,
    descriptors: &DescriptorMap,
    cfg: &FusionConfig,
    rates: &[f64],
    modes: &[ObjectNoise],
    seeds: &[u64],
    vocab: &[String],
) -> Result<ReportTable, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::InvalidConfig("at least one seed is required".into()));
    }
    let mut cells: Vec<(ObjectNoise, f64)> =
        modes.iter().flat_map(|&m| rates.iter().map(move |&r| (m, r))).collect();
    if !cells.iter().any(|&(m, r)| m == ObjectNoise::Missing && r == 1.0) {
        cells.push((ObjectNoise::Missing, 1.0));
    }
    let index = CandidateIndex::build(&ctx.corpus.photos, ctx.enc, ctx.adapters)?;
    let (ids, descs) = embed_descriptors(ctx.corpus, descriptors, ctx.enc, ctx.adapters)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let per_job = ctx.exec.try_map(&jobs, |&(c, seed)| -> Result<Metrics, EvalError> {
        let (mode, rate) = cells[c];
        let noisy = perturb_objects_with_vocab(ctx.corpus, rate, mode, seed, vocab)?;
        let idx = index.with_objects(&noisy.photos, ctx.enc, ctx.adapters)?;
        let matrix = score_embedded(ids.clone(), &descs, &idx, Execution::Sequential);
        metrics_for_matrix(&matrix, ctx.corpus, cfg)
    })?;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(mode, rate))| {
            let ms: Vec<Metrics> = jobs.iter().zip(&per_job).filter(|((jc, _), _)| *jc == c).map(|(_, m)| *m).collect();
            Ok(ReportRow::new(format!("{mode}@{rate:.2}"), Metrics::mean(&ms)?))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(ReportTable {
        config: ctx.config(json!({
            "experiment": "object_noise",
            "lambda": cfg.lambda,
            "rates": rates,
            "modes": modes,
            "seeds": seeds,
            "vocabulary": vocab.len(),
        })),
        rows,
    })
}

/// Evaluates an ensemble of per-variant score matrices.
pub fn evaluate_ensemble(
    matrices: &[ScoreMatrix],
    corpus: &Corpus,
    cfg: &FusionConfig,
    weights: &[f64],
    mode: EnsembleMode,
) -> Result<Metrics, EvalError> {
    metrics_for_rankings(&ensemble_with(matrices, cfg, weights, mode)?, corpus)
}

/// Grid search over ensemble weights on a validation split, maximizing
/// avg(R@1, R@5, R@10). All-zero combinations are skipped; among equal
/// scores the first combination in grid order wins.
pub fn tune_ensemble_weights(
    matrices: &[ScoreMatrix],
    val: &Corpus,
    cfg: &FusionConfig,
    grid: &[f64],
    mode: EnsembleMode,
    exec: Execution,
) -> Result<(Vec<f64>, Metrics), EvalError> {
    if matrices.is_empty() || grid.is_empty() {
        return Err(EvalError::InvalidConfig("ensemble tuning needs matrices and a weight grid".into()));
    }
    let k = matrices.len();
    let total = grid.len().checked_pow(k as u32).filter(|&n| n <= 1_000_000).ok_or_else(|| {
        EvalError::InvalidConfig(format!("{}^{k} weight combinations is too many", grid.len()))
    })?;
    let combos: Vec<Vec<f64>> = (0..total)
        .map(|mut c| {
            (0..k)
                .map(|_| {
                    let w = grid[c % grid.len()];
                    c /= grid.len();
                    w
                })
                .collect()
        })
        .filter(|w: &Vec<f64>| w.iter().any(|&x| x > 0.0))
        .collect();
    let scored = exec.try_map(&combos, |w| evaluate_ensemble(matrices, val, cfg, w, mode))?;
    let mut best: Option<(usize, Metrics)> = None;
    for (i, m) in scored.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| m.avg > b.avg) {
            best = Some((i, m));
        }
    }
    let (i, m) = best.ok_or_else(|| EvalError::InvalidConfig("weight grid has no positive entry".into()))?;
    Ok((combos[i].clone(), m))
}

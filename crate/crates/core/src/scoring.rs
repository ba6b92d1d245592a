//! Scene- and vision-aligned scores, lambda fusion, ranking and ensembling.
//!
//! For descriptor `i` and candidate photo `j`:
//!
//! ```text
//! scene[i][j]  = cos(desc_i, objects_j)   (text vs text)
//! vision[i][j] = cos(desc_i, image_j)     (text vs image)
//! fused        = scene + lambda * vision
//! ```
//!
//! Rankings sort by fused score, best first, ties broken by ascending photo
//! index.

use std::cmp::Ordering;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterParams, Tower};
use crate::corpus::{render_object_list, Corpus, PhotoCandidate};
use crate::descriptor::DescriptorMap;
use crate::embedding::{EmbeddingError, EmbeddingStore, EmbeddingVector, Encoder};
use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("score matrices disagree: {0}")]
    ShapeMismatch(String),
    #[error("ensemble weights must be finite, nonnegative and not all zero")]
    DegenerateWeights,
    #[error("no descriptor for dialogue {0}")]
    MissingDescriptor(String),
    #[error("lambda must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the vision-aligned score.
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self, ScoringError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(ScoringError::InvalidLambda(lambda));
        }
        Ok(Self { lambda })
    }
}

/// Cosine of two unit vectors (their dot product, clamped to [-1, 1]).
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ScoringError> {
    if a.dim() != b.dim() {
        return Err(ScoringError::DimMismatch(a.dim(), b.dim()));
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[inline]
pub fn fuse(s_scene: f64, s_vision: f64, cfg: &FusionConfig) -> f64 {
    s_scene + cfg.lambda * s_vision
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scene and vision scores for every (dialogue, photo) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub dialogue_ids: Vec<String>,
    pub photo_ids: Vec<String>,
    pub scene: Array2<f64>,
    pub vision: Array2<f64>,
}

impl ScoreMatrix {
    pub fn new(
        dialogue_ids: Vec<String>,
        photo_ids: Vec<String>,
        scene: Array2<f64>,
        vision: Array2<f64>,
    ) -> Result<Self, ScoringError> {
        let shape = (dialogue_ids.len(), photo_ids.len());
        if scene.dim() != shape || vision.dim() != shape {
            return Err(ScoringError::ShapeMismatch(format!(
                "ids imply {shape:?}, scene is {:?}, vision is {:?}",
                scene.dim(),
                vision.dim()
            )));
        }
        Ok(Self { dialogue_ids, photo_ids, scene, vision })
    }

    pub fn n_dialogues(&self) -> usize {
        self.dialogue_ids.len()
    }

    pub fn n_photos(&self) -> usize {
        self.photo_ids.len()
    }

    pub fn fused_row(&self, i: usize, cfg: &FusionConfig) -> Vec<f64> {
        self.scene
            .row(i)
            .iter()
            .zip(self.vision.row(i))
            .map(|(&s, &v)| fuse(s, v, cfg))
            .collect()
    }

    fn same_axes(&self, other: &ScoreMatrix) -> bool {
        self.dialogue_ids == other.dialogue_ids && self.photo_ids == other.photo_ids
    }

    /// One-dimensional EMBS store with keys `scene:i:j` and `vision:i:j`.
    pub fn to_store(&self) -> EmbeddingStore {
        let mut store = EmbeddingStore::new(1);
        for ((i, j), &v) in self.scene.indexed_iter() {
            store.insert(format!("scene:{i}:{j}"), vec![v as f32]).expect("dim 1");
        }
        for ((i, j), &v) in self.vision.indexed_iter() {
            store.insert(format!("vision:{i}:{j}"), vec![v as f32]).expect("dim 1");
        }
        store
    }

    /// Inverse of [`ScoreMatrix::to_store`] (at f32 precision).
    pub fn from_store(
        store: &EmbeddingStore,
        dialogue_ids: Vec<String>,
        photo_ids: Vec<String>,
    ) -> Result<Self, ScoringError> {
        let shape = (dialogue_ids.len(), photo_ids.len());
        let get = |part: &str, i: usize, j: usize| -> Result<f64, ScoringError> {
            let key = format!("{part}:{i}:{j}");
            store
                .get(&key)
                .map(|v| v[0] as f64)
                .ok_or(ScoringError::Embedding(EmbeddingError::StoreMiss(key)))
        };
        let mut scene = Array2::zeros(shape);
        let mut vision = Array2::zeros(shape);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                scene[[i, j]] = get("scene", i, j)?;
                vision[[i, j]] = get("vision", i, j)?;
            }
        }
        Self::new(dialogue_ids, photo_ids, scene, vision)
    }

    /// `dialogue_id,photo_id,scene,vision` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(["dialogue_id", "photo_id", "scene", "vision"])?;
        for (i, d) in self.dialogue_ids.iter().enumerate() {
            for (j, p) in self.photo_ids.iter().enumerate() {
                w.write_record([
                    d.as_str(),
                    p.as_str(),
                    &self.scene[[i, j]].to_string(),
                    &self.vision[[i, j]].to_string(),
                ])?;
            }
        }
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.flush()
    }
}

/// Photo-side embeddings, already passed through the adapters.
#[derive(Debug, Clone)]
pub struct CandidateIndex {
    pub photo_ids: Vec<String>,
    pub objects: Vec<Vec<f64>>,
    pub images: Vec<Vec<f64>>,
}

impl CandidateIndex {
    pub fn build(
        photos: &[PhotoCandidate],
        enc: &Encoder,
        adapters: Option<&AdapterParams>,
    ) -> Result<Self, ScoringError> {
        let objects = encode_object_lists(photos, enc, adapters)?;
        let images: Vec<Vec<f64>> = enc.encode_photos(photos)?.iter().map(EmbeddingVector::to_f64).collect();
        let images = match adapters {
            Some(a) => a.project_all(Tower::Img, &images)?,
            None => images,
        };
        Ok(Self { photo_ids: photos.iter().map(|p| p.id.clone()).collect(), objects, images })
    }

    /// Same images, objects re-encoded from `photos` (which must list the
    /// same ids in the same order).
    pub fn with_objects(
        &self,
        photos: &[PhotoCandidate],
        enc: &Encoder,
        adapters: Option<&AdapterParams>,
    ) -> Result<Self, ScoringError> {
        if photos.len() != self.photo_ids.len() || photos.iter().zip(&self.photo_ids).any(|(p, id)| p.id != *id) {
            return Err(ScoringError::ShapeMismatch("photo ids differ from the index".into()));
        }
        Ok(Self {
            photo_ids: self.photo_ids.clone(),
            objects: encode_object_lists(photos, enc, adapters)?,
            images: self.images.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.photo_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photo_ids.is_empty()
    }

    /// Scene and vision scores of one projected descriptor against every photo.
    pub fn score_one(&self, desc: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.objects.iter().map(|o| dot(desc, o)).collect(),
            self.images.iter().map(|v| dot(desc, v)).collect(),
        )
    }
}

fn encode_object_lists(
    photos: &[PhotoCandidate],
    enc: &Encoder,
    adapters: Option<&AdapterParams>,
) -> Result<Vec<Vec<f64>>, ScoringError> {
    let texts: Vec<String> = photos.iter().map(|p| render_object_list(&p.objects)).collect();
    let raw: Vec<Vec<f64>> = enc.encode_texts(&texts)?.iter().map(EmbeddingVector::to_f64).collect();
    Ok(match adapters {
        Some(a) => a.project_all(Tower::Obj, &raw)?,
        None => raw,
    })
}

/// Projected embeddings of descriptor texts.
pub fn embed_queries(
    texts: &[String],
    enc: &Encoder,
    adapters: Option<&AdapterParams>,
) -> Result<Vec<Vec<f64>>, ScoringError> {
    let raw: Vec<Vec<f64>> = enc.encode_texts(texts)?.iter().map(EmbeddingVector::to_f64).collect();
    Ok(match adapters {
        Some(a) => a.project_all(Tower::Desc, &raw)?,
        None => raw,
    })
}

/// Projected descriptor embeddings in corpus dialogue order.
pub fn embed_descriptors(
    corpus: &Corpus,
    descriptors: &DescriptorMap,
    enc: &Encoder,
    adapters: Option<&AdapterParams>,
) -> Result<(Vec<String>, Vec<Vec<f64>>), ScoringError> {
    let mut ids = Vec::with_capacity(corpus.dialogues.len());
    let mut texts = Vec::with_capacity(corpus.dialogues.len());
    for d in &corpus.dialogues {
        let desc = descriptors.get(&d.id).ok_or_else(|| ScoringError::MissingDescriptor(d.id.clone()))?;
        ids.push(d.id.clone());
        texts.push(desc.text.clone());
    }
    Ok((ids, embed_queries(&texts, enc, adapters)?))
}

/// A photo repository indexed once and queried one descriptor at a time.
pub struct Retriever {
    index: CandidateIndex,
    enc: Encoder,
    adapters: Option<AdapterParams>,
    fusion: FusionConfig,
}

impl Retriever {
    pub fn new(
        photos: &[PhotoCandidate],
        enc: Encoder,
        adapters: Option<AdapterParams>,
        fusion: FusionConfig,
    ) -> Result<Self, ScoringError> {
        let index = CandidateIndex::build(photos, &enc, adapters.as_ref())?;
        Ok(Self { index, enc, adapters, fusion })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// The best `k` photos for one descriptor text.
    pub fn retrieve(&self, dialogue_id: &str, text: &str, k: usize) -> Result<Ranking, ScoringError> {
        let q = embed_queries(&[text.to_string()], &self.enc, self.adapters.as_ref())?.remove(0);
        let (scene, vision) = self.index.score_one(&q);
        let fused: Vec<f64> = scene.iter().zip(&vision).map(|(&s, &v)| fuse(s, v, &self.fusion)).collect();
        let mut r = Ranking::from_scores(dialogue_id, &self.index.photo_ids, &fused);
        r.photo_ids.truncate(k);
        r.scores.truncate(k);
        r.order.truncate(k);
        Ok(r)
    }
}

/// Score matrix from already-embedded descriptors; rows computed in parallel.
pub fn score_embedded(
    dialogue_ids: Vec<String>,
    descs: &[Vec<f64>],
    index: &CandidateIndex,
    exec: Execution,
) -> ScoreMatrix {
    let m = index.len();
    let rows = exec.map(descs, |d| index.score_one(d));
    let mut scene = Array2::zeros((descs.len(), m));
    let mut vision = Array2::zeros((descs.len(), m));
    for (i, (s, v)) in rows.into_iter().enumerate() {
        scene.row_mut(i).assign(&ndarray::Array1::from(s));
        vision.row_mut(i).assign(&ndarray::Array1::from(v));
    }
    ScoreMatrix { dialogue_ids, photo_ids: index.photo_ids.clone(), scene, vision }
}

/// Scores every dialogue of `corpus` against every photo. Without adapters
/// (or with identity adapters) this is the zero-shot scorer.
pub fn score_all(
    descriptors: &DescriptorMap,
    corpus: &Corpus,
    enc: &Encoder,
    adapters: Option<&AdapterParams>,
) -> Result<ScoreMatrix, ScoringError> {
    score_all_in(Execution::default(), descriptors, corpus, enc, adapters)
}

pub fn score_all_in(
    exec: Execution,
    descriptors: &DescriptorMap,
    corpus: &Corpus,
    enc: &Encoder,
    adapters: Option<&AdapterParams>,
) -> Result<ScoreMatrix, ScoringError> {
    let enc = enc.clone().with_execution(exec);
    let index = CandidateIndex::build(&corpus.photos, &enc, adapters)?;
    let (ids, descs) = embed_descriptors(corpus, descriptors, &enc, adapters)?;
    Ok(score_embedded(ids, &descs, &index, exec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub dialogue_id: String,
    /// Photo ids, best first.
    pub photo_ids: Vec<String>,
    /// Scores aligned with `photo_ids`; non-increasing.
    pub scores: Vec<f64>,
    /// Photo indices, best first.
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn from_scores(dialogue_id: &str, photo_ids: &[String], scores: &[f64]) -> Self {
        let order = argsort_desc(scores);
        Self {
            dialogue_id: dialogue_id.into(),
            photo_ids: order.iter().map(|&j| photo_ids[j].clone()).collect(),
            scores: order.iter().map(|&j| scores[j]).collect(),
            order,
        }
    }

    /// 1-based rank of `photo_id`.
    pub fn position(&self, photo_id: &str) -> Option<usize> {
        self.photo_ids.iter().position(|p| p == photo_id).map(|p| p + 1)
    }
}

/// Indices sorted by score descending, ties by ascending index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

pub fn rank(matrix: &ScoreMatrix, cfg: &FusionConfig) -> Vec<Ranking> {
    rank_in(Execution::default(), matrix, cfg)
}

pub fn rank_in(exec: Execution, matrix: &ScoreMatrix, cfg: &FusionConfig) -> Vec<Ranking> {
    let rows: Vec<usize> = (0..matrix.n_dialogues()).collect();
    exec.map(&rows, |&i| {
        Ranking::from_scores(&matrix.dialogue_ids[i], &matrix.photo_ids, &matrix.fused_row(i, cfg))
    })
}

/// How per-variant scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EnsembleMode {
    /// Per-dialogue z-scores of the fused scores, weighted mean.
    #[default]
    ZScore,
    /// Weighted mean of `1 / (k + rank)`.
    ReciprocalRank { k: f64 },
}

/// Population z-scores; constant input maps to zeros.
pub fn z_scores(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

pub fn ensemble(
    matrices: &[ScoreMatrix],
    cfg: &FusionConfig,
    weights: &[f64],
) -> Result<Vec<Ranking>, ScoringError> {
    ensemble_with(matrices, cfg, weights, EnsembleMode::ZScore)
}

pub fn ensemble_with(
    matrices: &[ScoreMatrix],
    cfg: &FusionConfig,
    weights: &[f64],
    mode: EnsembleMode,
) -> Result<Vec<Ranking>, ScoringError> {
    let first = matrices.first().ok_or_else(|| ScoringError::ShapeMismatch("no matrices".into()))?;
    if weights.len() != matrices.len() {
        return Err(ScoringError::ShapeMismatch(format!(
            "{} weights for {} matrices",
            weights.len(),
            matrices.len()
        )));
    }
    if let Some(m) = matrices.iter().find(|m| !first.same_axes(m)) {
        return Err(ScoringError::ShapeMismatch(format!(
            "axes differ: {}x{} vs {}x{}",
            first.n_dialogues(),
            first.n_photos(),
            m.n_dialogues(),
            m.n_photos()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(ScoringError::DegenerateWeights);
    }
    let total: f64 = weights.iter().sum();
    let rows: Vec<usize> = (0..first.n_dialogues()).collect();
    Ok(Execution::default().map(&rows, |&i| {
        let mut combined = vec![0.0; first.n_photos()];
        for (m, &w) in matrices.iter().zip(weights) {
            let fused = m.fused_row(i, cfg);
            let part = match mode {
                EnsembleMode::ZScore => z_scores(&fused),
                EnsembleMode::ReciprocalRank { k } => {
                    let mut rr = vec![0.0; fused.len()];
                    for (pos, j) in argsort_desc(&fused).into_iter().enumerate() {
                        rr[j] = 1.0 / (k + (pos + 1) as f64);
                    }
                    rr
                }
            };
            combined.iter_mut().zip(part).for_each(|(c, p)| *c += w * p);
        }
        combined.iter_mut().for_each(|c| *c /= total);
        Ranking::from_scores(&first.dialogue_ids[i], &first.photo_ids, &combined)
    }))
}

/// Writes a ranking list as JSON lines (used by reports and the CLI).
pub fn write_rankings(path: impl AsRef<Path>, rankings: &[Ranking]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in rankings {
        writeln!(f, "{}", serde_json::to_string(r).expect("rankings serialize"))?;
    }
    f.flush()
}

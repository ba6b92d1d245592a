use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{gradients_with, Batch};
use super::TrainError;
use crate::adapter::{AdapterParams, Tower};
use crate::corpus::{Corpus, PhotoCandidate};
use crate::descriptor::DescriptorMap;
use crate::embedding::{EmbeddingVector, Encoder};
use crate::eval::{metrics_for_matrix, Metrics};
use crate::exec::Execution;
use crate::scoring::{embed_descriptors, score_embedded, CandidateIndex, FusionConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the vision term; also the fusion weight used for validation.
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Add the column-wise (photo to descriptor) cross-entropy to each term.
    pub symmetric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 56, learning_rate: 1e-5, lambda: 1.0, epochs: 10, seed: 0, symmetric: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("lambda {} is not finite and nonnegative", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub tau: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation metrics of the initial (identity) adapters.
    pub baseline: Metrics,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initialization.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Metrics {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map_or(self.baseline, |e| e.val)
    }
}

/// (descriptor text, target photo) for every dialogue of `corpus`.
pub fn training_pairs(corpus: &Corpus, descriptors: &DescriptorMap) -> Result<Vec<(String, PhotoCandidate)>, TrainError> {
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let target = d.target_photo_id.as_deref().ok_or_else(|| TrainError::MissingTarget(d.id.clone()))?;
            let desc = descriptors.get(&d.id).ok_or_else(|| TrainError::MissingDescriptor(d.id.clone()))?;
            let photo = corpus.photo(target).ok_or_else(|| TrainError::MissingTarget(d.id.clone()))?;
            Ok((desc.text.clone(), photo.clone()))
        })
        .collect()
}

/// Frozen validation embeddings; only the adapters change between epochs.
struct Validation<'a> {
    corpus: &'a Corpus,
    ids: Vec<String>,
    descs: Vec<Vec<f64>>,
    index: CandidateIndex,
    fusion: FusionConfig,
}

impl Validation<'_> {
    fn metrics(&self, params: &AdapterParams) -> Result<Metrics, TrainError> {
        let index = CandidateIndex {
            photo_ids: self.index.photo_ids.clone(),
            objects: params.project_all(Tower::Obj, &self.index.objects)?,
            images: params.project_all(Tower::Img, &self.index.images)?,
        };
        let descs = params.project_all(Tower::Desc, &self.descs)?;
        let matrix = score_embedded(self.ids.clone(), &descs, &index, Execution::default());
        Ok(metrics_for_matrix(&matrix, self.corpus, &self.fusion)?)
    }
}

/// Trains adapters with Adam on shuffled minibatches.
///
/// After every epoch the adapters are scored on `val`; the parameters with the
/// best avg(R@1, R@5, R@10) are returned, the identity initialization counting
/// as a candidate. With `epochs = 0` the result is therefore the identity.
/// Batches are drawn from one ChaCha stream seeded with `cfg.seed`, and the
/// final partial batch is dropped when it has fewer than two pairs.
pub fn train(
    train_corpus: &Corpus,
    val_corpus: &Corpus,
    descriptors: &DescriptorMap,
    enc: &Encoder,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, TrainHistory), TrainError> {
    train_with(train_corpus, descriptors, val_corpus, descriptors, enc, cfg)
}

/// [`train`] with separate descriptor maps, for splits whose dialogue ids overlap.
pub fn train_with(
    train_corpus: &Corpus,
    train_descriptors: &DescriptorMap,
    val_corpus: &Corpus,
    val_descriptors: &DescriptorMap,
    enc: &Encoder,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, TrainHistory), TrainError> {
    cfg.validate()?;
    let pairs = training_pairs(train_corpus, train_descriptors)?;
    if pairs.len() < cfg.batch_size {
        return Err(TrainError::InvalidConfig(format!(
            "batch size {} exceeds the {} training pairs",
            cfg.batch_size,
            pairs.len()
        )));
    }
    let data = Batch::encode(&pairs, enc)?;
    let fusion = FusionConfig::new(cfg.lambda)?;
    let (ids, descs) = embed_descriptors(val_corpus, val_descriptors, enc, None)?;
    let val = Validation {
        corpus: val_corpus,
        ids,
        descs,
        index: CandidateIndex::build(&val_corpus.photos, enc, None)?,
        fusion,
    };
    let dim = data.dim();
    if let Some(d) = val.descs.first().map(Vec::len).filter(|&d| d != dim) {
        return Err(TrainError::InvalidConfig(format!("validation embeddings are {d}-dimensional, training {dim}")));
    }

    let mut params = AdapterParams::identity(dim);
    let baseline = val.metrics(&params)?;
    let mut best = (params.clone(), baseline.avg, 0);
    let mut opt = Adam::new(dim, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (loss, grads) = gradients_with(&data.select(chunk), &params, cfg.lambda, cfg.symmetric)?;
            let grads_finite = Tower::ALL.iter().all(|&t| grads.matrix(t).iter().all(|v| v.is_finite()))
                && grads.log_tau.is_finite();
            if !loss.is_finite() || !grads_finite {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!(
                        "loss={loss}, tau={}, finite gradients={grads_finite}, adam steps={}",
                        params.tau(),
                        opt.steps()
                    ),
                });
            }
            opt.step(&mut params, &grads);
            total += loss;
            batches += 1;
        }
        if params.validate().is_err() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: batches,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        let metrics = val.metrics(&params)?;
        if metrics.avg > best.1 {
            best = (params.clone(), metrics.avg, epoch);
        }
        history.push(EpochRecord { epoch, loss: total / batches.max(1) as f64, tau: params.tau(), val: metrics });
    }
    Ok((best.0, TrainHistory { baseline, epochs: history, best_epoch: best.2 }))
}

/// Raw embeddings of (descriptor, photo) pairs as rows of a batch.
pub fn encode_pairs(pairs: &[(EmbeddingVector, EmbeddingVector, EmbeddingVector)]) -> Result<Batch, TrainError> {
    let desc: Vec<EmbeddingVector> = pairs.iter().map(|p| p.0.clone()).collect();
    let obj: Vec<EmbeddingVector> = pairs.iter().map(|p| p.1.clone()).collect();
    let img: Vec<EmbeddingVector> = pairs.iter().map(|p| p.2.clone()).collect();
    Batch::new(super::loss::rows(&desc), super::loss::rows(&obj), super::loss::rows(&img))
}

//! Generated corpora for tests, benchmarks and demos.
//!
//! [`RotationTask`] is a learnability check for the trainer: object and image
//! embeddings are a fixed random rotation of the descriptor embedding plus
//! Gaussian noise, so zero-shot cosine retrieval is at chance while a linear
//! adapter can undo the rotation. [`mock_corpus`] builds a small dialogue
//! corpus whose dialogues mention their target's objects, for use with the
//! mock encoder.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{render_object_list, Corpus, CorpusError, Dialogue, PhotoCandidate, Speaker, Split, Turn};
use crate::descriptor::{Descriptor, DescriptorMap};
use crate::embedding::{image_key, text_key, EmbeddingStore, Encoder};

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// A uniformly random orthogonal matrix (Gram-Schmidt on Gaussian columns).
pub fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    for j in 0..dim {
        let mut v = gaussian(rng, dim);
        for k in 0..j {
            let proj = q.column(k).dot(&v);
            v.scaled_add(-proj, &q.column(k));
        }
        q.column_mut(j).assign(&unit(v));
    }
    q
}

#[derive(Debug, Clone)]
pub struct RotationTaskConfig {
    pub dim: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for RotationTaskConfig {
    fn default() -> Self {
        Self { dim: 16, train_pairs: 200, val_pairs: 100, test_pairs: 200, sigma: 0.05, seed: 7 }
    }
}

/// Rotation-plus-noise retrieval task with store-backed embeddings.
#[derive(Debug, Clone)]
pub struct RotationTask {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    /// Descriptors of all three splits, keyed by dialogue id.
    pub descriptors: DescriptorMap,
    pub store: EmbeddingStore,
    pub rotation: Array2<f64>,
}

impl RotationTask {
    pub fn generate(cfg: &RotationTaskConfig) -> Result<Self, CorpusError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rotation = random_rotation(cfg.dim, &mut rng);
        let mut store = EmbeddingStore::new(cfg.dim);
        let mut descriptors = DescriptorMap::new();
        let mut split = |split: Split, name: &str, n: usize| -> Result<Corpus, CorpusError> {
            let mut dialogues = Vec::with_capacity(n);
            let mut photos = Vec::with_capacity(n);
            for i in 0..n {
                let d = unit(gaussian(&mut rng, cfg.dim));
                let rd = rotation.dot(&d);
                let obj = unit(&rd + &(gaussian(&mut rng, cfg.dim) * cfg.sigma));
                let img = unit(&rd + &(gaussian(&mut rng, cfg.dim) * cfg.sigma));
                let dialogue_id = format!("{name}-d{i}");
                let photo_id = format!("{name}-p{i}");
                let desc_text = format!("descriptor {name} {i}");
                let objects = vec![format!("object-{name}-{i}")];
                let f32s = |v: &Array1<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
                store.insert(text_key(&desc_text), f32s(&d)).expect("fixed dim");
                store.insert(text_key(&render_object_list(&objects)), f32s(&obj)).expect("fixed dim");
                store.insert(image_key(&photo_id), f32s(&img)).expect("fixed dim");
                descriptors.insert(dialogue_id.clone(), Descriptor::provided(&dialogue_id, desc_text));
                dialogues.push(Dialogue {
                    id: dialogue_id,
                    turns: vec![Turn::new(Speaker::A, format!("synthetic dialogue {name} {i}"))],
                    sharer: Speaker::A,
                    target_photo_id: Some(photo_id.clone()),
                });
                photos.push(PhotoCandidate { id: photo_id.clone(), image_ref: photo_id, objects });
            }
            Corpus::new(split, dialogues, photos, BTreeMap::new())
        };
        let train = split(Split::Train, "train", cfg.train_pairs)?;
        let val = split(Split::Val, "val", cfg.val_pairs)?;
        let test = split(Split::Test, "test", cfg.test_pairs)?;
        Ok(Self { train, val, test, descriptors, store, rotation })
    }

    pub fn encoder(&self) -> Encoder {
        Encoder::store(self.store.clone())
    }
}

const NOUNS: &[&str] = &[
    "dog", "cat", "cake", "candles", "beach", "umbrella", "mountain", "snow", "car", "road", "pizza", "table",
    "chopsticks", "food", "bicycle", "helmet", "guitar", "stage", "flowers", "vase", "book", "lamp", "castle",
    "bridge", "river", "boat", "tree", "bench", "coffee", "laptop", "window", "sofa", "balloon", "kite", "horse",
    "tent", "sunset", "train", "station", "painting",
];

const OPENERS: &[&str] = &["how was your weekend?", "what are you up to?", "long time no see!", "any plans today?"];

/// A corpus of `n_dialogues` dialogues over `n_photos` photos.
///
/// Each photo lists `objects_per_photo` distinct nouns. Dialogue `i` targets
/// photo `i % n_photos`; its sharer mentions most of the target's objects
/// among filler words, so the `Diag` descriptor is informative but noisy.
pub fn mock_corpus(
    split: Split,
    n_dialogues: usize,
    n_photos: usize,
    objects_per_photo: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = objects_per_photo.min(NOUNS.len());
    let photos: Vec<PhotoCandidate> = (0..n_photos)
        .map(|j| {
            let objects = NOUNS.choose_multiple(&mut rng, k).map(|s| s.to_string()).collect();
            PhotoCandidate { id: format!("photo-{j}"), image_ref: format!("images/photo-{j}.jpg"), objects }
        })
        .collect();
    let dialogues = (0..n_dialogues)
        .map(|i| {
            let target = &photos[i % n_photos.max(1)];
            let mut mentioned = target.objects.clone();
            mentioned.shuffle(&mut rng);
            mentioned.truncate(mentioned.len().div_ceil(2).max(1).min(mentioned.len()));
            let sharer = if rng.random_bool(0.5) { Speaker::A } else { Speaker::B };
            let other = if sharer == Speaker::A { Speaker::B } else { Speaker::A };
            let distractor = NOUNS[rng.random_range(0..NOUNS.len())];
            Dialogue {
                id: format!("dialogue-{i}"),
                turns: vec![
                    Turn::new(other, *OPENERS.choose(&mut rng).expect("non-empty")),
                    Turn::new(sharer, format!("I was out with the {} yesterday", mentioned.join(" and "))),
                    Turn::new(other, format!("nice, was there a {distractor} too?")),
                    Turn::new(sharer, "let me show you"),
                ],
                sharer,
                target_photo_id: Some(target.id.clone()),
            }
        })
        .collect();
    Corpus::new(split, dialogues, photos, BTreeMap::new())
}

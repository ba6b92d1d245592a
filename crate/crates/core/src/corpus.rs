//! Dialogue/photo corpora.
//!
//! A corpus file is JSONL, one record per line:
//!
//! ```text
//! {"kind":"photo","id":"p1","image_ref":"img/p1.jpg","objects":["table","food"]}
//! {"kind":"dialogue","id":"d1","turns":[{"speaker":"A","text":"hi"}],"sharer":"A","target_photo_id":"p1"}
//! {"kind":"descriptor","dialogue_id":"d1","variant":"provided_caption","text":"a table with food",...}
//! ```
//!
//! `descriptor` records carry externally produced descriptors (captions) and
//! end up in [`Corpus::provided_descriptors`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::Descriptor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("object error rate must lie in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("replacement vocabulary is empty")]
    EmptyVocabulary,
    #[error("no replacement left in the vocabulary for photo {0}")]
    ExhaustedVocabulary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::A => "A",
            Speaker::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self { speaker, text: text.into() }
    }
}

/// A conversation truncated at the point where `sharer` shares a photo.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub sharer: Speaker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_photo_id: Option<String>,
}

impl Dialogue {
    /// Checks the per-dialogue invariants (non-empty turns, non-blank text).
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.turns.is_empty() {
            return Err(CorpusError::Validation(format!("dialogue {} has no turns", self.id)));
        }
        if let Some(pos) = self.turns.iter().position(|t| t.text.trim().is_empty()) {
            return Err(CorpusError::Validation(format!(
                "dialogue {} turn {} is empty",
                self.id, pos
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoCandidate {
    pub id: String,
    pub image_ref: String,
    #[serde(default)]
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub dialogues: Vec<Dialogue>,
    pub photos: Vec<PhotoCandidate>,
    pub provided_descriptors: BTreeMap<String, Descriptor>,
}

impl Corpus {
    /// Builds a corpus, lowercasing object strings and checking every
    /// invariant. Invalid input is rejected, never repaired.
    pub fn new(
        split: Split,
        dialogues: Vec<Dialogue>,
        mut photos: Vec<PhotoCandidate>,
        provided_descriptors: BTreeMap<String, Descriptor>,
    ) -> Result<Self, CorpusError> {
        for p in &mut photos {
            for o in &mut p.objects {
                *o = o.to_lowercase();
            }
        }
        let corpus = Self { split, dialogues, photos, provided_descriptors };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.photos.is_empty() {
            return Err(CorpusError::Validation("corpus has no photos".into()));
        }
        let mut photo_ids = HashSet::new();
        for p in &self.photos {
            if !photo_ids.insert(p.id.as_str()) {
                return Err(CorpusError::Validation(format!("duplicate photo id {}", p.id)));
            }
            let mut seen = HashSet::new();
            for o in &p.objects {
                if !seen.insert(o.as_str()) {
                    return Err(CorpusError::Validation(format!(
                        "photo {} lists object `{o}` twice",
                        p.id
                    )));
                }
            }
        }
        let mut dialogue_ids = HashSet::new();
        for d in &self.dialogues {
            if !dialogue_ids.insert(d.id.as_str()) {
                return Err(CorpusError::Validation(format!("duplicate dialogue id {}", d.id)));
            }
            d.validate()?;
            if let Some(t) = &d.target_photo_id {
                if !photo_ids.contains(t.as_str()) {
                    return Err(CorpusError::Validation(format!(
                        "dialogue {} targets unknown photo {t}",
                        d.id
                    )));
                }
            }
        }
        for (id, desc) in &self.provided_descriptors {
            if !dialogue_ids.contains(id.as_str()) || desc.dialogue_id != *id {
                return Err(CorpusError::Validation(format!(
                    "provided descriptor for unknown dialogue {id}"
                )));
            }
        }
        Ok(())
    }

    /// Photo id -> position in `photos`.
    pub fn photo_index(&self) -> HashMap<&str, usize> {
        self.photos.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect()
    }

    pub fn photo(&self, id: &str) -> Option<&PhotoCandidate> {
        self.photos.iter().find(|p| p.id == id)
    }

    /// Sorted union of every object string in the corpus.
    pub fn object_vocabulary(&self) -> Vec<String> {
        self.photos
            .iter()
            .flat_map(|p| p.objects.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Photo(PhotoCandidate),
    Dialogue(Dialogue),
    Descriptor(Descriptor),
}

pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut dialogues = Vec::new();
    let mut photos = Vec::new();
    let mut provided = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: i + 1, message: e.to_string() })?;
        match record {
            Record::Photo(p) => photos.push(p),
            Record::Dialogue(d) => dialogues.push(d),
            Record::Descriptor(d) => {
                if provided.insert(d.dialogue_id.clone(), d).is_some() {
                    return Err(CorpusError::Parse {
                        line: i + 1,
                        message: "second provided descriptor for the same dialogue".into(),
                    });
                }
            }
        }
    }
    Corpus::new(split, dialogues, photos, provided)
}

/// Writes photos, then dialogues, then provided descriptors.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut emit = |r: &Record| -> Result<(), CorpusError> {
        let line = serde_json::to_string(r).expect("corpus records always serialize");
        writeln!(out, "{line}").map_err(io_err)
    };
    for p in &corpus.photos {
        emit(&Record::Photo(p.clone()))?;
    }
    for d in &corpus.dialogues {
        emit(&Record::Dialogue(d.clone()))?;
    }
    for d in corpus.provided_descriptors.values() {
        emit(&Record::Descriptor(d.clone()))?;
    }
    out.flush().map_err(io_err)
}

/// Text form of an object list fed to the text encoder.
pub fn render_object_list(objects: &[String]) -> String {
    objects.join(", ")
}

/// Kind of simulated object-detection error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectNoise {
    /// Affected objects are deleted.
    Missing,
    /// Affected objects are replaced by a vocabulary string not yet in the list.
    Incorrect,
    /// A fair coin per affected object picks missing or incorrect.
    Both,
}

impl fmt::Display for ObjectNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectNoise::Missing => "missing",
            ObjectNoise::Incorrect => "incorrect",
            ObjectNoise::Both => "both",
        })
    }
}

impl FromStr for ObjectNoise {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "missing" => Ok(ObjectNoise::Missing),
            "incorrect" => Ok(ObjectNoise::Incorrect),
            "both" => Ok(ObjectNoise::Both),
            other => Err(format!("unknown object noise mode `{other}`")),
        }
    }
}

/// Number of objects affected in a list of `n` at error `rate`.
pub fn affected_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64).round() as usize).min(n)
}

/// Injects object-detection errors using the corpus' own object vocabulary
/// as the replacement pool.
pub fn perturb_objects(
    corpus: &Corpus,
    rate: f64,
    mode: ObjectNoise,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    let vocab = corpus.object_vocabulary();
    perturb_objects_with_vocab(corpus, rate, mode, seed, &vocab)
}

/// Injects object-detection errors.
///
/// For every photo with `n` objects exactly `round(rate * n)` of them are
/// affected, chosen by a seeded shuffle. A single ChaCha stream seeded with
/// `seed` is consumed photo by photo, so the output is a pure function of the
/// inputs.
pub fn perturb_objects_with_vocab(
    corpus: &Corpus,
    rate: f64,
    mode: ObjectNoise,
    seed: u64,
    vocab: &[String],
) -> Result<Corpus, CorpusError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CorpusError::InvalidRate(rate));
    }
    if mode != ObjectNoise::Missing && vocab.is_empty() && rate > 0.0 {
        return Err(CorpusError::EmptyVocabulary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = corpus.clone();
    for photo in &mut out.photos {
        let n = photo.objects.len();
        let k = affected_count(n, rate);
        if k == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut drop = vec![false; n];
        for &idx in &order[..k] {
            let replace = match mode {
                ObjectNoise::Missing => false,
                ObjectNoise::Incorrect => true,
                ObjectNoise::Both => rng.random_bool(0.5),
            };
            if !replace {
                drop[idx] = true;
                continue;
            }
            let pool: Vec<&String> =
                vocab.iter().filter(|w| !photo.objects.contains(w)).collect();
            if pool.is_empty() {
                return Err(CorpusError::ExhaustedVocabulary(photo.id.clone()));
            }
            photo.objects[idx] = pool[rng.random_range(0..pool.len())].clone();
        }
        let mut i = 0;
        photo.objects.retain(|_| {
            let keep = !drop[i];
            i += 1;
            keep
        });
    }
    Ok(out)
}

//! Visual descriptors: LLM-written guesses about the photo a speaker is
//! about to share, used as the retrieval query.

mod answers;
mod cache;
mod generate;
mod llm;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use answers::{extract_json_object, parse_query_answers, render_descriptor};
pub use cache::{CacheKey, DescriptorCache};
pub use generate::{diag_text, generate_descriptor, DescriptorGenerator, DescriptorSource};
pub use llm::{ChatModel, HttpChatModel, LlmEndpointConfig, LlmError};
pub use prompt::{build_prompt, render_dialogue};

/// dialogue id -> descriptor.
pub type DescriptorMap = BTreeMap<String, Descriptor>;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("variant {0} has no prompt")]
    UnsupportedVariant(DescriptorVariant),
    #[error("LLM transport failed: {0}")]
    LlmTransport(#[from] LlmError),
    #[error("unusable LLM answer for dialogue {dialogue_id}: {reason}")]
    LlmFormat { dialogue_id: String, reason: String },
    #[error("LLM returned an empty completion for dialogue {0}")]
    EmptyCompletion(String),
    #[error("no JSON object found in answer")]
    NoJsonObject,
    #[error("answer is missing field `{0}`")]
    MissingField(String),
    #[error("answer for `{0}` is empty")]
    EmptyAnswer(String),
    #[error("invalid query set: {0}")]
    InvalidQuerySet(String),
    #[error("no provided descriptor for dialogue {0}")]
    MissingProvided(String),
    #[error("descriptor for dialogue {0} is not cached and no LLM endpoint is configured")]
    NoEndpoint(String),
    #[error("descriptor cache {path}: {message}")]
    Cache { path: String, message: String },
}

impl DescriptorError {
    pub fn is_upstream(&self) -> bool {
        matches!(self, DescriptorError::LlmTransport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    /// Comma-separated list of answers.
    List,
    /// Exactly one answer.
    Single,
}

/// One visually-focused question put to the LLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub key: String,
    /// Noun used in the `{one ...}` answer placeholder of single-answer queries.
    pub template_noun: String,
    pub answer_kind: AnswerKind,
    /// Grammatically plural key; its sentence always uses "are".
    pub plural: bool,
}

impl Query {
    pub fn list(key: &str, plural: bool) -> Self {
        Self {
            key: key.into(),
            template_noun: key.into(),
            answer_kind: AnswerKind::List,
            plural,
        }
    }

    pub fn single(key: &str, noun: &str) -> Self {
        Self {
            key: key.into(),
            template_noun: noun.into(),
            answer_kind: AnswerKind::Single,
            plural: false,
        }
    }

    pub fn main_subject() -> Self {
        Self::list("main subject", false)
    }

    pub fn foreground_objects() -> Self {
        Self::list("prominent objects in the foreground", true)
    }

    pub fn background_scene() -> Self {
        Self::single("background scene", "background scene")
    }

    pub fn events() -> Self {
        Self::list("events", true)
    }

    pub fn materials_and_attributes() -> Self {
        Self::list("materials and attributes", true)
    }

    pub fn atmosphere_or_mood() -> Self {
        Self::list("atmosphere or mood", false)
    }

    pub fn lighting() -> Self {
        Self::single("lighting", "lighting condition")
    }

    /// Looks up one of the built-in queries by key (case-insensitive).
    pub fn builtin(key: &str) -> Option<Self> {
        let all = [
            Self::main_subject(),
            Self::foreground_objects(),
            Self::background_scene(),
            Self::events(),
            Self::materials_and_attributes(),
            Self::atmosphere_or_mood(),
            Self::lighting(),
        ];
        let key = key.trim();
        all.into_iter().find(|q| q.key.eq_ignore_ascii_case(key))
    }
}

/// Ordered set of queries with unique keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl Default for QuerySet {
    /// The five-query set: main subject, foreground objects, background
    /// scene, events, materials and attributes.
    fn default() -> Self {
        Self {
            queries: vec![
                Query::main_subject(),
                Query::foreground_objects(),
                Query::background_scene(),
                Query::events(),
                Query::materials_and_attributes(),
            ],
        }
    }
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<Self, DescriptorError> {
        if queries.is_empty() {
            return Err(DescriptorError::InvalidQuerySet("no queries".into()));
        }
        for (i, q) in queries.iter().enumerate() {
            if q.key.trim().is_empty() {
                return Err(DescriptorError::InvalidQuerySet("blank key".into()));
            }
            if queries[..i].iter().any(|p| p.key.eq_ignore_ascii_case(&q.key)) {
                return Err(DescriptorError::InvalidQuerySet(format!("duplicate key `{}`", q.key)));
            }
        }
        Ok(Self { queries })
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn keys(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.key.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.key.eq_ignore_ascii_case(key))
    }

    /// Copy with `key` removed.
    pub fn without(&self, key: &str) -> Result<Self, DescriptorError> {
        if self.get(key).is_none() {
            return Err(DescriptorError::InvalidQuerySet(format!("no query `{key}` to remove")));
        }
        Self::new(self.queries.iter().filter(|q| !q.key.eq_ignore_ascii_case(key)).cloned().collect())
    }

    /// Copy with `query` appended.
    pub fn with(&self, query: Query) -> Result<Self, DescriptorError> {
        let mut queries = self.queries.clone();
        queries.push(query);
        Self::new(queries)
    }

    /// Stable identity of the set, used in cache keys.
    pub fn signature(&self) -> String {
        self.keys().join("|")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorVariant {
    /// The raw dialogue, all utterances concatenated. No LLM.
    Diag,
    Summary,
    Guessing,
    Queries,
    /// Externally produced text, e.g. image captions, ingested with the corpus.
    ProvidedCaption,
}

impl DescriptorVariant {
    pub fn name(self) -> &'static str {
        match self {
            DescriptorVariant::Diag => "diag",
            DescriptorVariant::Summary => "summary",
            DescriptorVariant::Guessing => "guessing",
            DescriptorVariant::Queries => "queries",
            DescriptorVariant::ProvidedCaption => "provided_caption",
        }
    }

    pub fn uses_llm(self) -> bool {
        matches!(
            self,
            DescriptorVariant::Summary | DescriptorVariant::Guessing | DescriptorVariant::Queries
        )
    }
}

impl fmt::Display for DescriptorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DescriptorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "diag" => Ok(DescriptorVariant::Diag),
            "summary" => Ok(DescriptorVariant::Summary),
            "guessing" => Ok(DescriptorVariant::Guessing),
            "queries" => Ok(DescriptorVariant::Queries),
            "provided_caption" | "caption" => Ok(DescriptorVariant::ProvidedCaption),
            other => Err(format!("unknown descriptor variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub dialogue_id: String,
    pub variant: DescriptorVariant,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<BTreeMap<String, Vec<String>>>,
    /// Keys of the query set used, for `Queries` descriptors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<String>>,
    #[serde(default)]
    pub llm_model: String,
    #[serde(default)]
    pub raw_response: String,
}

impl Descriptor {
    /// A descriptor carrying only text, e.g. an externally produced caption.
    pub fn provided(dialogue_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            variant: DescriptorVariant::ProvidedCaption,
            text: text.into(),
            answers: None,
            queries: None,
            llm_model: String::new(),
            raw_response: String::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_has_five_queries_in_order() {
        let set = QuerySet::default();
        assert_eq!(
            set.keys(),
            vec![
                "main subject",
                "prominent objects in the foreground",
                "background scene",
                "events",
                "materials and attributes"
            ]
        );
    }

    #[test]
    fn query_set_edits() {
        let set = QuerySet::default();
        let four = set.without("main subject").unwrap();
        assert_eq!(four.len(), 4);
        assert!(four.get("main subject").is_none());
        assert!(set.without("lighting").is_err());
        let six = set.with(Query::lighting()).unwrap();
        assert_eq!(six.keys().last().unwrap(), "lighting");
        assert!(six.with(Query::lighting()).is_err());
        assert!(QuerySet::new(vec![]).is_err());
        assert!(QuerySet::new(vec![Query::events(), Query::list("Events", true)]).is_err());
    }

    #[test]
    fn variant_round_trips_through_strings() {
        for v in [
            DescriptorVariant::Diag,
            DescriptorVariant::Summary,
            DescriptorVariant::Guessing,
            DescriptorVariant::Queries,
            DescriptorVariant::ProvidedCaption,
        ] {
            assert_eq!(v.name().parse::<DescriptorVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("frob".parse::<DescriptorVariant>().is_err());
    }

    #[test]
    fn builtin_lookup() {
        assert_eq!(Query::builtin("Lighting").unwrap(), Query::lighting());
        assert_eq!(Query::builtin(" events ").unwrap(), Query::events());
        assert!(Query::builtin("weather").is_none());
    }
}

use std::sync::Arc;

use super::{
    build_prompt, parse_query_answers, render_descriptor, CacheKey, ChatModel, Descriptor,
    DescriptorCache, DescriptorError, DescriptorMap, DescriptorVariant, QuerySet,
};
use crate::corpus::{Corpus, Dialogue};
use crate::exec::Execution;

/// All utterances concatenated with single spaces.
pub fn diag_text(dialogue: &Dialogue) -> String {
    dialogue.turns.iter().map(|t| t.text.trim()).collect::<Vec<_>>().join(" ")
}

/// Produces one descriptor. `Diag` never touches `llm`.
pub fn generate_descriptor(
    dialogue: &Dialogue,
    variant: DescriptorVariant,
    queryset: &QuerySet,
    llm: &dyn ChatModel,
) -> Result<Descriptor, DescriptorError> {
    let mut desc = Descriptor {
        dialogue_id: dialogue.id.clone(),
        variant,
        text: String::new(),
        answers: None,
        queries: None,
        llm_model: String::new(),
        raw_response: String::new(),
    };
    match variant {
        DescriptorVariant::Diag => {
            desc.text = diag_text(dialogue);
            return Ok(desc);
        }
        DescriptorVariant::ProvidedCaption => {
            return Err(DescriptorError::UnsupportedVariant(variant));
        }
        _ => {}
    }
    let prompt = build_prompt(dialogue, variant, queryset)?;
    let raw = llm.complete(&prompt)?;
    desc.llm_model = llm.model().to_string();
    if raw.trim().is_empty() {
        return Err(DescriptorError::EmptyCompletion(dialogue.id.clone()));
    }
    if variant == DescriptorVariant::Queries {
        let format_err = |e: DescriptorError| DescriptorError::LlmFormat {
            dialogue_id: dialogue.id.clone(),
            reason: e.to_string(),
        };
        let answers = parse_query_answers(&raw, queryset).map_err(format_err)?;
        desc.text = render_descriptor(&answers, queryset).map_err(format_err)?;
        desc.answers = Some(answers);
        desc.queries = Some(queryset.keys());
    } else {
        desc.text = raw.clone();
    }
    desc.raw_response = raw;
    Ok(desc)
}

/// Supplies one descriptor per dialogue of a corpus.
pub trait DescriptorSource: Send + Sync {
    fn descriptors(
        &self,
        corpus: &Corpus,
        variant: DescriptorVariant,
        queryset: &QuerySet,
    ) -> Result<DescriptorMap, DescriptorError>;
}

/// Cache-first descriptor generation.
///
/// Cache misses for distinct dialogues are sent to the LLM concurrently, at
/// most `parallelism` at a time; results are appended to the cache in corpus
/// order.
pub struct DescriptorGenerator {
    llm: Option<Arc<dyn ChatModel>>,
    cache: DescriptorCache,
    parallelism: usize,
    exec: Execution,
    /// Cache entries are matched against this model name.
    model: String,
}

impl DescriptorGenerator {
    pub fn new(llm: Option<Arc<dyn ChatModel>>, cache: DescriptorCache) -> Self {
        let model = llm.as_ref().map(|m| m.model().to_string()).unwrap_or_default();
        Self { llm, cache, parallelism: 4, exec: Execution::default(), model }
    }

    /// Model name used for cache lookups when no LLM is attached.
    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn cache(&self) -> &DescriptorCache {
        &self.cache
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Descriptor for one dialogue: cache, then LLM. At most one LLM call.
    pub fn descriptor_for(
        &self,
        dialogue: &Dialogue,
        variant: DescriptorVariant,
        queryset: &QuerySet,
    ) -> Result<Descriptor, DescriptorError> {
        if variant == DescriptorVariant::Diag {
            return Ok(Descriptor {
                dialogue_id: dialogue.id.clone(),
                variant,
                text: diag_text(dialogue),
                answers: None,
                queries: None,
                llm_model: String::new(),
                raw_response: String::new(),
            });
        }
        if let Some(d) = self.cache.get(&CacheKey::new(&dialogue.id, variant, &self.model, queryset)) {
            return Ok(d);
        }
        let llm = self.llm.as_deref().ok_or_else(|| DescriptorError::NoEndpoint(dialogue.id.clone()))?;
        let desc = generate_descriptor(dialogue, variant, queryset, llm)?;
        self.cache.insert(desc.clone())?;
        Ok(desc)
    }
}

impl DescriptorSource for DescriptorGenerator {
    fn descriptors(
        &self,
        corpus: &Corpus,
        variant: DescriptorVariant,
        queryset: &QuerySet,
    ) -> Result<DescriptorMap, DescriptorError> {
        match variant {
            DescriptorVariant::ProvidedCaption => {
                return corpus
                    .dialogues
                    .iter()
                    .map(|d| {
                        corpus
                            .provided_descriptors
                            .get(&d.id)
                            .cloned()
                            .map(|desc| (d.id.clone(), desc))
                            .ok_or_else(|| DescriptorError::MissingProvided(d.id.clone()))
                    })
                    .collect();
            }
            DescriptorVariant::Diag => {
                return corpus
                    .dialogues
                    .iter()
                    .map(|d| Ok((d.id.clone(), self.descriptor_for(d, variant, queryset)?)))
                    .collect();
            }
            _ => {}
        }
        let mut out = DescriptorMap::new();
        let mut missing = Vec::new();
        for d in &corpus.dialogues {
            match self.cache.get(&CacheKey::new(&d.id, variant, &self.model, queryset)) {
                Some(desc) => {
                    out.insert(d.id.clone(), desc);
                }
                None => missing.push(d),
            }
        }
        if missing.is_empty() {
            return Ok(out);
        }
        let llm = self.llm.as_deref().ok_or_else(|| DescriptorError::NoEndpoint(missing[0].id.clone()))?;
        // Chunked so that a failure late in a long run keeps earlier results cached.
        for chunk in missing.chunks(self.parallelism * 8) {
            let generated = self.exec.try_map_bounded(self.parallelism, chunk, |d| {
                generate_descriptor(d, variant, queryset, llm)
            })?;
            for desc in generated {
                self.cache.insert(desc.clone())?;
                out.insert(desc.dialogue_id.clone(), desc);
            }
        }
        Ok(out)
    }
}

/// Fixed descriptors, e.g. loaded from a file.
impl DescriptorSource for DescriptorMap {
    fn descriptors(
        &self,
        corpus: &Corpus,
        _variant: DescriptorVariant,
        _queryset: &QuerySet,
    ) -> Result<DescriptorMap, DescriptorError> {
        corpus
            .dialogues
            .iter()
            .map(|d| {
                self.get(&d.id)
                    .cloned()
                    .map(|desc| (d.id.clone(), desc))
                    .ok_or_else(|| DescriptorError::NoEndpoint(d.id.clone()))
            })
            .collect()
    }
}

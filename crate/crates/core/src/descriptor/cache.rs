use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{Descriptor, DescriptorError, DescriptorVariant, QuerySet};

/// Identity of a cached descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub dialogue_id: String,
    pub variant: DescriptorVariant,
    pub model: String,
    /// Query-set signature for `Queries`, empty otherwise.
    pub queries: String,
}

impl CacheKey {
    pub fn new(dialogue_id: &str, variant: DescriptorVariant, model: &str, queryset: &QuerySet) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            variant,
            model: model.into(),
            queries: if variant == DescriptorVariant::Queries { queryset.signature() } else { String::new() },
        }
    }

    pub fn of(desc: &Descriptor) -> Self {
        Self {
            dialogue_id: desc.dialogue_id.clone(),
            variant: desc.variant,
            model: desc.llm_model.clone(),
            queries: desc.queries.as_ref().map(|q| q.join("|")).unwrap_or_default(),
        }
    }
}

struct Inner {
    entries: HashMap<CacheKey, Descriptor>,
    writer: Option<BufWriter<File>>,
}

/// Append-only JSONL store of generated descriptors, one per line.
///
/// All writes go through one mutex-guarded writer; the first descriptor
/// recorded for a key wins.
pub struct DescriptorCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl DescriptorCache {
    /// A cache that lives only in memory.
    pub fn in_memory() -> Self {
        Self { path: None, inner: Mutex::new(Inner { entries: HashMap::new(), writer: None }) }
    }

    /// Opens (or creates) a cache file and loads its entries.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DescriptorError> {
        let path = path.as_ref().to_path_buf();
        let err = |message: String| DescriptorError::Cache { path: path.display().to_string(), message };
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let desc: Descriptor =
                    serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                entries.entry(CacheKey::of(&desc)).or_insert(desc);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| err(e.to_string()))?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(Inner { entries, writer: Some(BufWriter::new(file)) }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<Descriptor> {
        self.inner.lock().unwrap().entries.get(key).cloned()
    }

    /// Records a descriptor; a no-op if its key is already present.
    pub fn insert(&self, desc: Descriptor) -> Result<(), DescriptorError> {
        let key = CacheKey::of(&desc);
        let mut inner = self.inner.lock().unwrap();
        if inner.entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(w) = inner.writer.as_mut() {
            let line = serde_json::to_string(&desc).expect("descriptors always serialize");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| DescriptorError::Cache {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                message: e.to_string(),
            })?;
        }
        inner.entries.insert(key, desc);
        Ok(())
    }

    /// Every cached descriptor of one variant/model/query set, by dialogue id.
    pub fn select(
        &self,
        variant: DescriptorVariant,
        model: Option<&str>,
        queryset: &QuerySet,
    ) -> super::DescriptorMap {
        let sig = if variant == DescriptorVariant::Queries { queryset.signature() } else { String::new() };
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter(|(k, _)| k.variant == variant && k.queries == sig && model.is_none_or(|m| k.model == m))
            .map(|(k, d)| (k.dialogue_id.clone(), d.clone()))
            .collect()
    }
}

//! Tool abstraction and the reference tools: corpus search and a calculator.

mod calc;
mod search;

pub use calc::{calculate, CalcError, CalcTool};
pub use search::{SearchHit, SearchTool};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Identity card of a tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    /// Name plans refer to, unique within a registry.
    pub name: String,
    pub description: String,
    /// Whether concurrent invocations are allowed. The registry serializes
    /// calls to tools that say `false`.
    pub concurrency_safe: bool,
}

/// A failure of one tool call. The executor treats these as soft: the error
/// text lands in the observation and the run continues.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("empty query")]
    EmptyQuery,
    #[error("corpus not loaded")]
    CorpusNotLoaded,
    #[error(transparent)]
    Calc(#[from] CalcError),
    #[error("{0}")]
    Other(String),
}

/// Something a plan node can invoke.
///
/// Implementations must tolerate concurrent `invoke` calls when their spec
/// says `concurrency_safe`; otherwise the registry serializes them.
pub trait Tool: Send + Sync {
    fn spec(&self) -> &ToolSpec;
    fn invoke(&self, query: &str) -> Result<String, ToolError>;
}

/// Closure-backed tool, mainly for tests and stub wiring.
pub struct FnTool<F> {
    spec: ToolSpec,
    f: F,
}

impl<F> FnTool<F>
where
    F: Fn(&str) -> Result<String, ToolError> + Send + Sync,
{
    pub fn new(name: &str, f: F) -> Self {
        FnTool {
            spec: ToolSpec {
                name: name.to_string(),
                description: String::new(),
                concurrency_safe: true,
            },
            f,
        }
    }

    pub fn serial(mut self) -> Self {
        self.spec.concurrency_safe = false;
        self
    }
}

impl<F> Tool for FnTool<F>
where
    F: Fn(&str) -> Result<String, ToolError> + Send + Sync,
{
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn invoke(&self, query: &str) -> Result<String, ToolError> {
        (self.f)(query)
    }
}

/// A registry-level failure: the run cannot continue.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("duplicate tool `{0}`")]
    DuplicateTool(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

/// Immutable set of tools addressed by name.
///
/// Entries are reference-counted so the executor's timeout watchdog can hand
/// a tool to a worker thread that may outlive the batch.
#[derive(Default)]
pub struct ToolRegistry {
    tools: IndexMap<String, Arc<RegisteredTool>>,
}

pub(crate) struct RegisteredTool {
    tool: Box<dyn Tool>,
    /// Present only for tools that must not run concurrently.
    gate: Option<Mutex<()>>,
}

impl RegisteredTool {
    /// Invokes the tool, honoring its concurrency declaration.
    pub(crate) fn call(&self, query: &str) -> Result<String, ToolError> {
        let _guard = self
            .gate
            .as_ref()
            .map(|gate| gate.lock().unwrap_or_else(|poisoned| poisoned.into_inner()));
        self.tool.invoke(query)
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register(&mut self, tool: Box<dyn Tool>) -> Result<(), RegistryError> {
        let spec = tool.spec().clone();
        if self.tools.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateTool(spec.name));
        }
        let gate = (!spec.concurrency_safe).then(|| Mutex::new(()));
        self.tools
            .insert(spec.name, Arc::new(RegisteredTool { tool, gate }));
        Ok(())
    }

    pub fn with(mut self, tool: Box<dyn Tool>) -> Result<Self, RegistryError> {
        self.register(tool)?;
        Ok(self)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values().map(|t| t.tool.spec())
    }

    pub(crate) fn entry(&self, name: &str) -> Result<Arc<RegisteredTool>, RegistryError> {
        self.tools
            .get(name)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownTool(name.to_string()))
    }

    /// Invokes a tool by name, honoring its concurrency declaration.
    pub fn invoke(
        &self,
        name: &str,
        query: &str,
    ) -> Result<Result<String, ToolError>, RegistryError> {
        Ok(self.entry(name)?.call(query))
    }
}

/// Document collection the search tool serves.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    documents: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("doc `{0}` has empty text")]
    EmptyText(String),
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen: Vec<&str> = Vec::with_capacity(documents.len());
        for doc in &documents {
            if seen.contains(&doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
            if doc.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(doc.doc_id.clone()));
            }
            seen.push(&doc.doc_id);
        }
        Ok(Corpus { documents })
    }

    /// Loads a JSONL corpus: one document object per line, blank lines
    /// skipped.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut documents = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document =
                serde_json::from_str(&line).map_err(|source| CorpusError::Malformed {
                    line: i + 1,
                    source,
                })?;
            documents.push(doc);
        }
        Corpus::from_documents(documents)
    }

    pub fn from_jsonl_file(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        Corpus::from_jsonl(std::io::BufReader::new(file))
    }

    /// Builds a corpus from every `.txt` file in a directory: file stem is
    /// both doc_id and title, contents the text. Files sort by name so the
    /// corpus is stable across filesystems.
    pub fn from_text_dir(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let mut paths: Vec<_> = std::fs::read_dir(path)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort();
        let mut documents = Vec::with_capacity(paths.len());
        for p in paths {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            documents.push(Document {
                doc_id: stem.clone(),
                title: stem,
                text: std::fs::read_to_string(&p)?,
            });
        }
        Corpus::from_documents(documents)
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for doc in &self.documents {
            serde_json::to_writer(&mut w, doc)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }
}

//! Lexical search over a [`Corpus`].
//!
//! Scoring is the standard tf-idf family with document-length normalization
//! (BM25-style saturation). Everything is deterministic: scores depend only
//! on (corpus, query), and ties order by `doc_id` ascending.

use super::{Corpus, Tool, ToolError, ToolSpec};
use indexmap::IndexMap;
use serde::Serialize;

// Conventional BM25 constants: k1 controls term-frequency saturation, b how
// strongly document length discounts it.
const K1: f64 = 1.2;
const B: f64 = 0.75;

/// How many characters of a matched document the hit carries.
const SNIPPET_CHARS: usize = 300;

/// One search result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub title: String,
    /// Leading text of the document.
    pub snippet: String,
    pub score: f64,
}

/// Search engine plus its tool wrapping.
pub struct SearchTool {
    spec: ToolSpec,
    index: Index,
    top_k: usize,
}

struct Index {
    /// Per document: (doc position in corpus, term → occurrence count, length).
    docs: Vec<DocEntry>,
    /// term → number of documents containing it.
    doc_freq: IndexMap<String, usize>,
    avg_len: f64,
}

struct DocEntry {
    doc_id: String,
    title: String,
    snippet: String,
    terms: IndexMap<String, usize>,
    len: usize,
}

/// Lowercased alphanumeric runs; everything else separates.
fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn snippet_of(text: &str) -> String {
    let mut end = text.len().min(SNIPPET_CHARS);
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_string()
}

impl SearchTool {
    /// Indexes the corpus. `top_k` is how many hits one query returns.
    pub fn new(corpus: &Corpus, top_k: usize) -> Self {
        let mut docs = Vec::with_capacity(corpus.len());
        let mut doc_freq: IndexMap<String, usize> = IndexMap::new();
        for doc in corpus.documents() {
            // Title terms count toward matching: queries name entities.
            let tokens = terms(&format!("{} {}", doc.title, doc.text));
            let mut counts: IndexMap<String, usize> = IndexMap::new();
            for t in &tokens {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
            for t in counts.keys() {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
            docs.push(DocEntry {
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                snippet: snippet_of(&doc.text),
                len: tokens.len(),
                terms: counts,
            });
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            docs.iter().map(|d| d.len as f64).sum::<f64>() / docs.len() as f64
        };
        SearchTool {
            spec: ToolSpec {
                name: "search".to_string(),
                description: "Look up documents in the local corpus by keyword relevance"
                    .to_string(),
                concurrency_safe: true,
            },
            index: Index {
                docs,
                doc_freq,
                avg_len,
            },
            top_k,
        }
    }

    /// Top-k documents for a query, best first, ties by `doc_id` ascending.
    ///
    /// Documents sharing no term with the query never appear, so the list
    /// may be shorter than k — or empty.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<SearchHit>, ToolError> {
        if query.trim().is_empty() {
            return Err(ToolError::EmptyQuery);
        }
        if self.index.docs.is_empty() {
            return Err(ToolError::CorpusNotLoaded);
        }
        let mut query_terms = terms(query);
        query_terms.dedup();
        let n = self.index.docs.len() as f64;
        let mut scored: Vec<(f64, &DocEntry)> = Vec::new();
        for doc in &self.index.docs {
            let mut score = 0.0;
            for term in &query_terms {
                let tf = *doc.terms.get(term).unwrap_or(&0) as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = *self.index.doc_freq.get(term).unwrap_or(&0) as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let norm = 1.0 - B + B * doc.len as f64 / self.index.avg_len;
                score += idf * tf * (K1 + 1.0) / (tf + K1 * norm);
            }
            if score > 0.0 {
                scored.push((score, doc));
            }
        }
        scored.sort_by(|(sa, da), (sb, db)| {
            sb.partial_cmp(sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| da.doc_id.cmp(&db.doc_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, doc)| SearchHit {
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                snippet: doc.snippet.clone(),
                score,
            })
            .collect())
    }

    /// Hit list as observation-ready text: `title: snippet` lines.
    pub fn render_hits(hits: &[SearchHit]) -> String {
        if hits.is_empty() {
            return "No results.".to_string();
        }
        hits.iter()
            .map(|h| format!("{}: {}", h.title, h.snippet))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl Tool for SearchTool {
    fn spec(&self) -> &ToolSpec {
        &self.spec
    }

    fn invoke(&self, query: &str) -> Result<String, ToolError> {
        let hits = self.search(query, self.top_k)?;
        Ok(SearchTool::render_hits(&hits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolbox::Document;

    fn corpus(docs: &[(&str, &str, &str)]) -> Corpus {
        Corpus::from_documents(
            docs.iter()
                .map(|(id, title, text)| Document {
                    doc_id: id.to_string(),
                    title: title.to_string(),
                    text: text.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn people() -> Corpus {
        corpus(&[
            (
                "d1",
                "John Frankenheimer",
                "John Frankenheimer was an American film and television director known \
                 for political thrillers.",
            ),
            (
                "d2",
                "Tiffanie DeBartolo",
                "Tiffanie DeBartolo is an American novelist and film director.",
            ),
        ])
    }

    #[test]
    fn entity_query_ranks_its_doc_first() {
        let tool = SearchTool::new(&people(), 3);
        let hits = tool.search("John Frankenheimer occupation", 3).unwrap();
        assert_eq!(hits[0].doc_id, "d1");
        assert_eq!(hits[0].title, "John Frankenheimer");
    }

    #[test]
    fn no_overlap_means_no_hits() {
        let tool = SearchTool::new(&people(), 3);
        assert!(tool.search("quantum chromodynamics", 3).unwrap().is_empty());
    }

    #[test]
    fn single_doc_overlapping_query_scores_positive() {
        let c = corpus(&[("only", "Paris", "Paris is the capital of France.")]);
        let tool = SearchTool::new(&c, 3);
        let hits = tool.search("capital of France", 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(hits[0].score > 0.0);
    }

    #[test]
    fn scores_non_increasing_and_ties_by_doc_id() {
        let c = corpus(&[
            ("b", "Twin", "same words here"),
            ("a", "Twin", "same words here"),
            (
                "c",
                "Other",
                "same words here and more words to differ in length",
            ),
        ]);
        let tool = SearchTool::new(&c, 10);
        let hits = tool.search("same words", 10).unwrap();
        for pair in hits.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        // The two identical docs tie; doc_id decides.
        let tied: Vec<_> = hits
            .iter()
            .filter(|h| (h.score - hits[0].score).abs() < 1e-12)
            .map(|h| h.doc_id.as_str())
            .collect();
        assert_eq!(tied, vec!["a", "b"]);
    }

    #[test]
    fn repeated_calls_are_identical() {
        let tool = SearchTool::new(&people(), 2);
        let a = tool.search("film director", 2).unwrap();
        let b = tool.search("film director", 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn concurrent_calls_agree() {
        use std::sync::Arc;
        let tool = Arc::new(SearchTool::new(&people(), 2));
        let baseline = tool.search("american film director", 2).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let tool = tool.clone();
                std::thread::spawn(move || tool.search("american film director", 2).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), baseline);
        }
    }

    #[test]
    fn empty_query_and_empty_corpus_error() {
        let tool = SearchTool::new(&people(), 2);
        assert_eq!(tool.search("  ", 2).unwrap_err(), ToolError::EmptyQuery);
        let empty = SearchTool::new(&Corpus::default(), 2);
        assert_eq!(
            empty.search("x", 2).unwrap_err(),
            ToolError::CorpusNotLoaded
        );
    }

    #[test]
    fn snippet_respects_char_boundaries() {
        let long = "é".repeat(400);
        let c = corpus(&[("u", "Unicode", &long)]);
        let tool = SearchTool::new(&c, 1);
        let hits = tool.search("unicode", 1).unwrap();
        assert!(hits[0].snippet.len() <= 300);
        assert!(!hits[0].snippet.is_empty());
    }

    #[test]
    fn invoke_renders_title_and_snippet() {
        let tool = SearchTool::new(&people(), 1);
        let text = tool.invoke("Tiffanie DeBartolo").unwrap();
        assert!(text.starts_with("Tiffanie DeBartolo: "));
        let none = tool.invoke("zzzz").unwrap();
        assert_eq!(none, "No results.");
    }
}

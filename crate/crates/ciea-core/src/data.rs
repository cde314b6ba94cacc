//! Corpus and query records, JSONL/TSV file formats, and the synthetic
//! dataset generator with a controlled text-vs-image information split.
//!
//! File formats:
//!   corpus JSONL  `{"id": str, "text": str, "patches": [[f64,...],...]?}`
//!   query  JSONL  `{"qid": str, "text": str, "positives": [str,...]}`
//!   qrels  TSV    `qid<TAB>docid`
//! All files are UTF-8 with newline-terminated lines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::visual::PatchGrid;

/// One corpus record: caption text plus an optional patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patches: Option<PatchGrid>,
}

impl Document {
    pub fn is_multimodal(&self) -> bool {
        self.patches.is_some()
    }
}

/// A query with its annotated relevant documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub text: String,
    pub positives: Vec<String>,
}

/// Ground-truth relevant-document sets per query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str) {
        self.map
            .entry(qid.to_string())
            .or_default()
            .insert(docid.to_string());
    }

    pub fn relevant(&self, qid: &str) -> Option<&BTreeSet<String>> {
        self.map.get(qid)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn from_queries(queries: &[QueryRecord]) -> Self {
        let mut qrels = Qrels::new();
        for q in queries {
            for p in &q.positives {
                qrels.insert(&q.qid, p);
            }
        }
        qrels
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (qid, docs) in &self.map {
            for doc in docs {
                out.push_str(qid);
                out.push('\t');
                out.push_str(doc);
                out.push('\n');
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut qrels = Qrels::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (qid, docid) = match (parts.next(), parts.next()) {
                (Some(q), Some(d)) if !q.is_empty() && !d.is_empty() => (q, d),
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: "expected qid<TAB>docid".into(),
                    })
                }
            };
            qrels.insert(qid, docid);
        }
        Ok(qrels)
    }
}

// ── JSONL corpus and query I/O ──────────────────────────────────────────

pub fn write_corpus(docs: &[Document], path: &Path) -> Result<()> {
    write_jsonl(docs, path)
}

pub fn write_queries(queries: &[QueryRecord], path: &Path) -> Result<()> {
    write_jsonl(queries, path)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a corpus, validating uniqueness of IDs and record invariants.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Referential(format!(
                "duplicate document id {:?}",
                doc.id
            )));
        }
        if doc.text.trim().is_empty() && doc.patches.is_none() {
            return Err(Error::Referential(format!(
                "document {:?} has neither text nor patches",
                doc.id
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads queries, validating qid uniqueness and that every positive refers
/// to a known document.
pub fn load_queries(path: &Path, corpus_ids: &BTreeSet<String>) -> Result<Vec<QueryRecord>> {
    let file = std::fs::File::open(path)?;
    let mut queries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(q.qid.clone()) {
            return Err(Error::Referential(format!("duplicate query id {:?}", q.qid)));
        }
        if q.positives.is_empty() {
            return Err(Error::Referential(format!(
                "query {:?} has no positive documents",
                q.qid
            )));
        }
        for p in &q.positives {
            if !corpus_ids.contains(p) {
                return Err(Error::Referential(format!(
                    "query {:?} references unknown document {:?}",
                    q.qid, p
                )));
            }
        }
        queries.push(q);
    }
    Ok(queries)
}

// ── Synthetic dataset generation ────────────────────────────────────────

/// Knobs for the synthetic benchmark. Documents are grouped by topic
/// (captions share the topic's words); each document additionally carries a
/// latent visual concept whose signal is injected into its patches and
/// never into its caption. A query mentions a contiguous span of its
/// positive's caption and, with probability `complementary_fraction`,
/// resolves only through the concept words; otherwise it mentions the
/// caption's document-specific filler words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_docs: usize,
    pub n_queries: usize,
    pub vocab_size: usize,
    pub n_topics: usize,
    pub n_concepts: usize,
    pub patch_count: usize,
    pub raw_patch_dim: usize,
    pub complementary_fraction: f64,
    pub patch_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_docs: 200,
            n_queries: 400,
            vocab_size: 800,
            n_topics: 25,
            n_concepts: 16,
            patch_count: 8,
            raw_patch_dim: 12,
            complementary_fraction: 0.5,
            patch_noise: 0.25,
        }
    }
}

const TOPIC_WORDS: usize = 3;
const CONCEPT_WORDS: usize = 2;
const FILLERS_PER_DOC: usize = 2;

/// Pronounceable deterministic word for a global index.
fn make_word(i: usize) -> String {
    const SYL: [&str; 12] = [
        "ba", "de", "ki", "lo", "mu", "na", "po", "ru", "sa", "ti", "ve", "zo",
    ];
    let mut word = String::new();
    let mut n = i;
    for _ in 0..3 {
        word.push_str(SYL[n % SYL.len()]);
        n /= SYL.len();
    }
    word
}

pub struct SyntheticData {
    pub corpus: Vec<Document>,
    pub queries: Vec<QueryRecord>,
    pub qrels: Qrels,
}

/// Deterministic synthetic corpus/query/qrels generation.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    if spec.n_docs == 0 || spec.n_queries == 0 {
        return Err(Error::contract("n_docs and n_queries must be positive"));
    }
    if spec.n_topics == 0 || spec.n_concepts == 0 || spec.patch_count == 0 || spec.raw_patch_dim == 0
    {
        return Err(Error::contract(
            "n_topics, n_concepts, patch_count, raw_patch_dim must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&spec.complementary_fraction) {
        return Err(Error::contract("complementary_fraction must lie in [0,1]"));
    }
    let words_needed = spec.n_topics * TOPIC_WORDS + spec.n_concepts * CONCEPT_WORDS;
    if words_needed + FILLERS_PER_DOC > spec.vocab_size {
        return Err(Error::contract(format!(
            "infeasible spec: {words_needed} topic/concept words plus fillers exceed vocab_size {}",
            spec.vocab_size
        )));
    }
    let group = spec.n_docs.div_ceil(spec.n_topics);
    if group > spec.n_concepts {
        return Err(Error::contract(format!(
            "infeasible spec: topic groups of {group} documents need at least that many concepts, got {}",
            spec.n_concepts
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Word universe, partitioned into topic / concept / filler vocabularies.
    let mut next = 0usize;
    let mut take = |n: usize, next: &mut usize| -> Vec<String> {
        let words = (*next..*next + n).map(make_word).collect();
        *next += n;
        words
    };
    let topic_words: Vec<Vec<String>> = (0..spec.n_topics)
        .map(|_| take(TOPIC_WORDS, &mut next))
        .collect();
    let concept_words: Vec<Vec<String>> = (0..spec.n_concepts)
        .map(|_| take(CONCEPT_WORDS, &mut next))
        .collect();
    let filler_pool = take(spec.vocab_size - next, &mut next);

    // One prototype feature vector per topic and per concept.
    let proto = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..spec.raw_patch_dim).map(|_| normal.sample(rng)).collect()
    };
    let topic_protos: Vec<Vec<f64>> = (0..spec.n_topics).map(|_| proto(&mut rng)).collect();
    let concept_protos: Vec<Vec<f64>> = (0..spec.n_concepts).map(|_| proto(&mut rng)).collect();

    // Documents: caption = topic words + two fillers; patches split between
    // caption-redundant (topic) and caption-absent (concept) signal.
    let redundant = spec.patch_count / 2;
    let mut corpus = Vec::with_capacity(spec.n_docs);
    let mut doc_topic = Vec::with_capacity(spec.n_docs);
    let mut doc_concept = Vec::with_capacity(spec.n_docs);
    let mut doc_fillers: Vec<[String; FILLERS_PER_DOC]> = Vec::with_capacity(spec.n_docs);
    for m in 0..spec.n_docs {
        let topic = m % spec.n_topics;
        let concept = (m / spec.n_topics) % spec.n_concepts;
        doc_topic.push(topic);
        doc_concept.push(concept);

        let f1 = filler_pool[rng.gen_range(0..filler_pool.len())].clone();
        let f2 = filler_pool[rng.gen_range(0..filler_pool.len())].clone();
        let mut caption: Vec<&str> = topic_words[topic].iter().map(|s| s.as_str()).collect();
        caption.push(&f1);
        caption.push(&f2);
        let text = caption.join(" ");
        doc_fillers.push([f1.clone(), f2.clone()]);

        let mut patches = Vec::with_capacity(spec.patch_count);
        for p in 0..spec.patch_count {
            let base = if p < redundant {
                &topic_protos[topic]
            } else {
                &concept_protos[concept]
            };
            let row: Vec<f64> = base
                .iter()
                .map(|v| v + spec.patch_noise * normal.sample(&mut rng))
                .collect();
            patches.push(row);
        }
        corpus.push(Document {
            id: format!("d{m:05}"),
            text,
            patches: Some(PatchGrid::new(patches)?),
        });
    }

    // Queries: spread positives over a shuffled document order so coverage
    // is even when n_queries differs from n_docs.
    let mut doc_order: Vec<usize> = (0..spec.n_docs).collect();
    doc_order.shuffle(&mut rng);
    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut qrels = Qrels::new();
    for i in 0..spec.n_queries {
        let doc = doc_order[i % spec.n_docs];
        let topic = doc_topic[doc];
        let start = rng.gen_range(0..TOPIC_WORDS - 1);
        let mut words: Vec<&str> = topic_words[topic][start..start + 2]
            .iter()
            .map(|s| s.as_str())
            .collect();
        let complementary = rng.gen_bool(spec.complementary_fraction);
        if complementary {
            words.extend(concept_words[doc_concept[doc]].iter().map(|s| s.as_str()));
        } else {
            words.extend(doc_fillers[doc].iter().map(|s| s.as_str()));
        }
        let qid = format!("q{i:05}");
        let docid = corpus[doc].id.clone();
        qrels.insert(&qid, &docid);
        queries.push(QueryRecord {
            qid,
            text: words.join(" "),
            positives: vec![docid],
        });
    }

    Ok(SyntheticData {
        corpus,
        queries,
        qrels,
    })
}

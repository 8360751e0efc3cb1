//! Corpus statistics: context-window utilization and vocabulary coverage.
//!
//! All accumulation is integer counting over untruncated token streams.
//! Ratios are formed only when a report is emitted, so partial accumulators
//! from disjoint shards merge exactly.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AnatomyError, Result};
use crate::par::{self, Exec};
use crate::tokenizer::{normalize_text, MergeTable, MIN_CONTEXT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub source: String,
}

impl PromptRecord {
    pub fn new(text: impl Into<String>, source: impl Into<String>) -> Self {
        PromptRecord {
            text: text.into(),
            source: source.into(),
        }
    }
}

/// A deduplicated corpus plus bookkeeping about what was dropped.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Corpus {
    #[serde(skip)]
    pub records: Vec<PromptRecord>,
    /// Records that could not be read.
    pub skipped: usize,
    pub duplicates_removed: usize,
    /// Records whose normalized text is empty.
    pub empty_removed: usize,
}

impl Corpus {
    /// Deduplicates readable records and counts the unreadable ones.
    pub fn from_records<I>(records: I) -> Self
    where
        I: IntoIterator<Item = Result<PromptRecord>>,
    {
        let mut skipped = 0;
        let mut empty_removed = 0;
        let mut readable = Vec::new();
        for rec in records {
            match rec {
                Ok(r) if normalize_text(&r.text).is_empty() => empty_removed += 1,
                Ok(r) => readable.push(r),
                Err(_) => skipped += 1,
            }
        }
        let before = readable.len();
        let records = dedup(readable);
        Corpus {
            duplicates_removed: before - records.len(),
            records,
            skipped,
            empty_removed,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Keeps the first record for each normalized text, preserving order.
pub fn dedup<I: IntoIterator<Item = PromptRecord>>(records: I) -> Vec<PromptRecord> {
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(normalize_text(&r.text)))
        .collect()
}

/// Reads prompts from a JSONL file (`.jsonl`/`.json`, field `text`, optional
/// `source`) or a plain text file with one prompt per line. Unreadable lines
/// come back as errors so callers can count them.
pub fn read_prompts(path: &Path) -> Result<Vec<Result<PromptRecord>>> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("ndjson")
    );
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            out.push(parse_jsonl_record(&line, idx + 1, &file_name));
        } else {
            out.push(Ok(PromptRecord::new(line, file_name.clone())));
        }
    }
    Ok(out)
}

fn parse_jsonl_record(line: &str, line_no: usize, default_source: &str) -> Result<PromptRecord> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| AnatomyError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let text = value
        .get("text")
        .and_then(|t| t.as_str())
        .ok_or_else(|| AnatomyError::Parse {
            line: line_no,
            message: "missing string field \"text\"".into(),
        })?;
    let source = value
        .get("source")
        .and_then(|s| s.as_str())
        .unwrap_or(default_source);
    Ok(PromptRecord::new(text, source))
}

/// Context-window utilization of a corpus at one context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextUtilizationReport {
    pub context: usize,
    pub info_density: f64,
    pub padding_fraction: f64,
    pub truncation_rate: f64,
    pub token_loss: f64,
    pub n_prompts: u64,
    pub truncated_prompts: u64,
    pub dropped_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCount {
    pub id: u32,
    pub token: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub n_prompts: u64,
    pub mean_tokens: f64,
}

/// Vocabulary usage over pre-truncation token streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabCoverageReport {
    pub vocab_size: usize,
    pub used_tokens: usize,
    pub coverage: f64,
    pub special_share: f64,
    /// Cumulative occurrence share of the k most frequent ids.
    pub topk_share: BTreeMap<usize, f64>,
    pub mean_tokens: f64,
    pub total_occurrences: u64,
    pub top_tokens: Vec<TokenCount>,
    /// source -> token length -> prompt count
    pub histogram: BTreeMap<String, BTreeMap<usize, u64>>,
    pub sources: BTreeMap<String, SourceSummary>,
}

/// Default `k` values reported in [`VocabCoverageReport::topk_share`]; the
/// number of used tokens is always added.
pub const DEFAULT_TOPK: [usize; 4] = [1, 10, 100, 1000];

/// Mergeable integer state of an audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditAccumulator {
    sot: u32,
    eot: u32,
    token_counts: Vec<u64>,
    lengths: BTreeMap<String, BTreeMap<usize, u64>>,
}

impl AuditAccumulator {
    pub fn new(table: &MergeTable) -> Self {
        AuditAccumulator {
            sot: table.sot_id(),
            eot: table.eot_id(),
            token_counts: vec![0; table.vocab_size()],
            lengths: BTreeMap::new(),
        }
    }

    /// Adds one marker-wrapped token stream.
    pub fn add_stream(&mut self, source: &str, stream: &[u32]) {
        for &id in stream {
            self.token_counts[id as usize] += 1;
        }
        let per_source = match self.lengths.get_mut(source) {
            Some(m) => m,
            None => self.lengths.entry(source.to_string()).or_default(),
        };
        *per_source.entry(stream.len()).or_insert(0) += 1;
    }

    /// Combines two accumulators; associative and commutative.
    pub fn merge(&mut self, other: &AuditAccumulator) {
        assert_eq!(self.token_counts.len(), other.token_counts.len(), "vocabulary mismatch");
        for (a, b) in self.token_counts.iter_mut().zip(&other.token_counts) {
            *a += *b;
        }
        for (source, hist) in &other.lengths {
            let mine = self.lengths.entry(source.clone()).or_default();
            for (&len, &count) in hist {
                *mine.entry(len).or_insert(0) += count;
            }
        }
    }

    pub fn n_prompts(&self) -> u64 {
        self.lengths.values().flat_map(|h| h.values()).sum()
    }

    /// Token length -> prompt count over all sources.
    pub fn length_counts(&self) -> BTreeMap<usize, u64> {
        let mut all = BTreeMap::new();
        for hist in self.lengths.values() {
            for (&len, &count) in hist {
                *all.entry(len).or_insert(0) += count;
            }
        }
        all
    }

    pub fn token_counts(&self) -> &[u64] {
        &self.token_counts
    }

    pub fn context_report(&self, context: usize) -> Result<ContextUtilizationReport> {
        check_context(context)?;
        let n = self.n_prompts();
        if n == 0 {
            return Err(AnatomyError::validation("corpus is empty"));
        }
        let l = context as u64;
        let (mut kept, mut total, mut dropped, mut truncated) = (0u64, 0u64, 0u64, 0u64);
        for (&len, &count) in &self.length_counts() {
            let len = len as u64;
            kept += count * len.min(l);
            total += count * len;
            if len > l {
                dropped += count * (len - l);
                truncated += count;
            }
        }
        let info_density = kept as f64 / (n * l) as f64;
        Ok(ContextUtilizationReport {
            context,
            info_density,
            padding_fraction: 1.0 - info_density,
            truncation_rate: truncated as f64 / n as f64,
            token_loss: dropped as f64 / total as f64,
            n_prompts: n,
            truncated_prompts: truncated,
            dropped_tokens: dropped,
            total_tokens: total,
        })
    }

    pub fn vocab_report(&self, table: &MergeTable, topk: &[usize]) -> Result<VocabCoverageReport> {
        let n = self.n_prompts();
        if n == 0 {
            return Err(AnatomyError::validation("corpus is empty"));
        }
        let total: u64 = self.token_counts.iter().sum();
        let mut ranked: Vec<(u32, u64)> = self
            .token_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(id, &c)| (id as u32, c))
            .collect();
        // ties broken by id for a stable order
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let used = ranked.len();

        let mut ks: Vec<usize> = topk.iter().copied().filter(|&k| k > 0).collect();
        ks.push(used);
        ks.sort_unstable();
        ks.dedup();
        let mut topk_share = BTreeMap::new();
        let mut cumulative = 0u64;
        let mut next = 0usize;
        for &k in &ks {
            while next < k.min(used) {
                cumulative += ranked[next].1;
                next += 1;
            }
            let share = if k >= used { 1.0 } else { cumulative as f64 / total as f64 };
            topk_share.insert(k, share);
        }

        let special = self.token_counts[self.sot as usize] + self.token_counts[self.eot as usize];
        let sources = self
            .lengths
            .iter()
            .map(|(source, hist)| {
                let count: u64 = hist.values().sum();
                let tokens: u64 = hist.iter().map(|(&l, &c)| l as u64 * c).sum();
                (
                    source.clone(),
                    SourceSummary {
                        n_prompts: count,
                        mean_tokens: tokens as f64 / count as f64,
                    },
                )
            })
            .collect();

        Ok(VocabCoverageReport {
            vocab_size: table.vocab_size(),
            used_tokens: used,
            coverage: used as f64 / table.vocab_size() as f64,
            special_share: special as f64 / total as f64,
            topk_share,
            mean_tokens: total as f64 / n as f64,
            total_occurrences: total,
            top_tokens: ranked
                .iter()
                .take(20)
                .map(|&(id, count)| TokenCount {
                    id,
                    token: table.token_str(id).unwrap_or_default().to_string(),
                    count,
                })
                .collect(),
            histogram: self.lengths.clone(),
            sources,
        })
    }
}

fn check_context(context: usize) -> Result<()> {
    if context < MIN_CONTEXT {
        return Err(AnatomyError::invalid(format!(
            "context length must be at least {MIN_CONTEXT}, got {context}"
        )));
    }
    Ok(())
}

const SHARD: usize = 2048;

/// Tokenizes every record once and accumulates counts. Shards are processed
/// under `exec` and merged in order.
pub fn accumulate_with(corpus: &Corpus, table: &MergeTable, exec: Exec) -> AuditAccumulator {
    let shards: Vec<&[PromptRecord]> = corpus.records.chunks(SHARD).collect();
    let partials = par::map_slice(exec, &shards, |shard| {
        let mut acc = AuditAccumulator::new(table);
        for rec in shard.iter() {
            acc.add_stream(&rec.source, &table.token_stream(&rec.text));
        }
        acc
    });
    let mut total = AuditAccumulator::new(table);
    for p in &partials {
        total.merge(p);
    }
    total
}

pub fn accumulate(corpus: &Corpus, table: &MergeTable) -> AuditAccumulator {
    accumulate_with(corpus, table, Exec::default())
}

/// Context utilization at `context` plus vocabulary coverage.
pub fn audit(
    corpus: &Corpus,
    table: &MergeTable,
    context: usize,
) -> Result<(ContextUtilizationReport, VocabCoverageReport)> {
    check_context(context)?;
    if corpus.is_empty() {
        return Err(AnatomyError::validation("corpus is empty after deduplication"));
    }
    let acc = accumulate(corpus, table);
    Ok((acc.context_report(context)?, acc.vocab_report(table, &DEFAULT_TOPK)?))
}

/// One utilization report per context length from a single tokenization pass.
pub fn sweep_with(
    corpus: &Corpus,
    table: &MergeTable,
    contexts: &[usize],
    exec: Exec,
) -> Result<Vec<ContextUtilizationReport>> {
    if contexts.is_empty() {
        return Err(AnatomyError::invalid("no context lengths given"));
    }
    contexts.iter().try_for_each(|&l| check_context(l))?;
    if corpus.is_empty() {
        return Err(AnatomyError::validation("corpus is empty after deduplication"));
    }
    let acc = accumulate_with(corpus, table, exec);
    contexts.iter().map(|&l| acc.context_report(l)).collect()
}

pub fn sweep(
    corpus: &Corpus,
    table: &MergeTable,
    contexts: &[usize],
) -> Result<Vec<ContextUtilizationReport>> {
    sweep_with(corpus, table, contexts, Exec::default())
}

//! Byte-level BPE tokenizer compatible with the CLIP merge table format.
//!
//! Ids are laid out as in CLIP: the 256 byte units, the same 256 units with an
//! end-of-word suffix, one id per merge rule in rank order, then the
//! start-of-text and end-of-text markers.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{AnatomyError, Result};

/// Id written into padding positions.
pub const PAD_ID: u32 = 0;

const END_OF_WORD: &str = "</w>";
const SOT_TEXT: &str = "<start_of_text>";
const EOT_TEXT: &str = "<end_of_text>";
const BASE_UNITS: usize = 512;

/// Smallest context that holds a start marker, one token and an end marker.
pub const MIN_CONTEXT: usize = 3;

/// A loaded merge table plus the lookup structures needed to encode.
///
/// Immutable after construction; share it freely across threads.
#[derive(Debug, Clone)]
pub struct MergeTable {
    base_tokens: Vec<String>,
    merges: Vec<(String, String)>,
    /// (left id, right id) -> (rank, merged id)
    merge_ids: HashMap<(u32, u32), (usize, u32)>,
    decoder: Vec<String>,
    byte_to_id: [u32; 256],
    unit_to_byte: HashMap<char, u8>,
    word_split: Regex,
}

/// A fixed-length token sequence produced by [`MergeTable::encode`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Non-padding positions, markers included.
    pub content_len: usize,
    pub truncated: bool,
    /// Content tokens removed to fit the context.
    pub dropped_tokens: usize,
}

impl TokenSequence {
    pub fn context(&self) -> usize {
        self.ids.len()
    }

    /// Position of the end marker (the last non-padding slot).
    pub fn end_position(&self) -> usize {
        self.content_len - 1
    }
}

/// The reversible byte -> printable unit mapping used by CLIP. Returned in
/// vocabulary order: printable Latin-1 bytes first, then the remaining bytes
/// shifted above U+0100.
fn byte_units() -> Vec<(u8, char)> {
    let mut printable: Vec<u8> = (b'!'..=b'~').chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    let mut out: Vec<(u8, char)> = printable.iter().map(|&b| (b, char::from(b))).collect();
    printable.sort_unstable();
    let mut shift = 0u32;
    for b in 0..=255u8 {
        if printable.binary_search(&b).is_err() {
            out.push((b, char::from_u32(256 + shift).expect("valid scalar")));
            shift += 1;
        }
    }
    out
}

/// Lowercases and collapses runs of whitespace into single spaces.
pub fn normalize_text(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

impl MergeTable {
    /// Reads a merge file: one `left right` pair per line, with an optional
    /// leading header line that starts with `#`.
    pub fn load<R: BufRead>(source: R) -> Result<Self> {
        let mut merges = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if idx == 0 && (line.starts_with('#') || line.contains("#version")) {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(AnatomyError::Parse {
                        line: line_no,
                        message: format!("expected two space-separated symbols, got {line:?}"),
                    })
                }
            }
        }
        Self::from_merges(merges)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }

    /// Builds a table from merge pairs in rank order.
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let units = byte_units();
        let mut byte_to_id = [0u32; 256];
        let mut unit_to_byte = HashMap::with_capacity(256);
        let mut base_tokens = Vec::with_capacity(BASE_UNITS);
        for (id, &(b, c)) in units.iter().enumerate() {
            byte_to_id[b as usize] = id as u32;
            unit_to_byte.insert(c, b);
            base_tokens.push(c.to_string());
        }
        for &(_, c) in &units {
            base_tokens.push(format!("{c}{END_OF_WORD}"));
        }

        let mut encoder: HashMap<String, u32> = HashMap::with_capacity(BASE_UNITS + merges.len());
        for (id, tok) in base_tokens.iter().enumerate() {
            encoder.insert(tok.clone(), id as u32);
        }
        let mut decoder = base_tokens.clone();
        let mut seen = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            if let Some(prev) = seen.insert((a.as_str(), b.as_str()), rank) {
                return Err(AnatomyError::validation(format!(
                    "duplicate merge pair {a:?} {b:?} at ranks {prev} and {rank}"
                )));
            }
            let merged = format!("{a}{b}");
            // later entries win, as with a dict built from the vocabulary list
            encoder.insert(merged.clone(), (BASE_UNITS + rank) as u32);
            decoder.push(merged);
        }

        let mut merge_ids = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let (Some(&ia), Some(&ib)) = (encoder.get(a), encoder.get(b)) else {
                // a part that is never produced makes the rule unreachable
                continue;
            };
            let merged = encoder[&format!("{a}{b}")];
            merge_ids.insert((ia, ib), (rank, merged));
        }

        let word_split = Regex::new(&format!(
            r"(?i){}|{}|'s|'t|'re|'ve|'m|'ll|'d|\p{{L}}+|\p{{N}}|[^\s\p{{L}}\p{{N}}]+",
            regex::escape(SOT_TEXT),
            regex::escape(EOT_TEXT)
        ))
        .expect("static pattern");

        Ok(MergeTable {
            base_tokens,
            merges,
            merge_ids,
            decoder,
            byte_to_id,
            unit_to_byte,
            word_split,
        })
    }

    pub fn vocab_size(&self) -> usize {
        BASE_UNITS + self.merges.len() + 2
    }

    pub fn sot_id(&self) -> u32 {
        (self.vocab_size() - 2) as u32
    }

    pub fn eot_id(&self) -> u32 {
        (self.vocab_size() - 1) as u32
    }

    pub fn base_tokens(&self) -> &[String] {
        &self.base_tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_marker(&self, id: u32) -> bool {
        id == self.sot_id() || id == self.eot_id()
    }

    /// Token string for an id, markers included.
    pub fn token_str(&self, id: u32) -> Option<&str> {
        if id == self.sot_id() {
            Some(SOT_TEXT)
        } else if id == self.eot_id() {
            Some(EOT_TEXT)
        } else {
            self.decoder.get(id as usize).map(String::as_str)
        }
    }

    fn bpe_word(&self, word: &str, out: &mut Vec<u32>) {
        let bytes = word.as_bytes();
        let Some((&last, head)) = bytes.split_last() else {
            return;
        };
        let mut symbols: Vec<u32> = head.iter().map(|&b| self.byte_to_id[b as usize]).collect();
        symbols.push(self.byte_to_id[last as usize] + 256);

        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ids.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, left, right)) = best else {
                break;
            };
            let merged = self.merge_ids[&(left, right)].1;
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Content token ids for `text` without markers.
    pub fn content_ids(&self, text: &str) -> Vec<u32> {
        let normalized = normalize_text(text);
        let mut ids = Vec::new();
        for m in self.word_split.find_iter(&normalized) {
            match m.as_str() {
                SOT_TEXT => ids.push(self.sot_id()),
                EOT_TEXT => ids.push(self.eot_id()),
                piece => self.bpe_word(piece, &mut ids),
            }
        }
        ids
    }

    /// The untruncated stream `[SOT, content.., EOT]`.
    pub fn token_stream(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(16);
        ids.push(self.sot_id());
        ids.extend(self.content_ids(text));
        ids.push(self.eot_id());
        ids
    }

    /// Encodes `text` into exactly `context` ids: wrapped in markers, padded
    /// with [`PAD_ID`], or truncated so the end marker sits in the last slot.
    pub fn encode(&self, text: &str, context: usize) -> Result<TokenSequence> {
        if context < MIN_CONTEXT {
            return Err(AnatomyError::invalid(format!(
                "context length must be at least {MIN_CONTEXT}, got {context}"
            )));
        }
        Ok(self.fit(self.token_stream(text), context))
    }

    /// Pads or truncates a marker-wrapped stream to `context` positions.
    pub fn fit(&self, mut stream: Vec<u32>, context: usize) -> TokenSequence {
        let full = stream.len();
        if full > context {
            stream.truncate(context);
            stream[context - 1] = self.eot_id();
            TokenSequence {
                ids: stream,
                content_len: context,
                truncated: true,
                dropped_tokens: full - context,
            }
        } else {
            stream.resize(context, PAD_ID);
            TokenSequence {
                ids: stream,
                content_len: full,
                truncated: false,
                dropped_tokens: 0,
            }
        }
    }

    /// Inverse of [`encode`](Self::encode) up to normalization. Markers and
    /// padding are dropped.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let vocab = self.vocab_size();
        if let Some(bad) = seq.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(AnatomyError::validation(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let content = &seq.ids[..seq.content_len.min(seq.ids.len())];
        self.decode_ids(content.iter().copied().filter(|&id| !self.is_marker(id)))
    }

    /// Decodes raw ids (no marker handling beyond skipping them).
    pub fn decode_ids(&self, ids: impl IntoIterator<Item = u32>) -> Result<String> {
        let mut bytes = Vec::new();
        for id in ids {
            if self.is_marker(id) {
                continue;
            }
            let tok = self.decoder.get(id as usize).ok_or_else(|| {
                AnatomyError::validation(format!("token id {id} out of range"))
            })?;
            let (units, eow) = match tok.strip_suffix(END_OF_WORD) {
                Some(stem) => (stem, true),
                None => (tok.as_str(), false),
            };
            bytes.extend(units.chars().map(|c| self.unit_to_byte[&c]));
            if eow {
                bytes.push(b' ');
            }
        }
        let text = String::from_utf8_lossy(&bytes);
        Ok(text.trim_end().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_table() -> MergeTable {
        let merges = ["d o", "do g</w>", "c a", "ca t</w>", "t h", "th e</w>", "r e", "re d</w>", "m a", "ma n</w>"];
        let text = merges.join("\n");
        MergeTable::load(text.as_bytes()).unwrap()
    }

    #[test]
    fn byte_units_cover_all_bytes() {
        let units = byte_units();
        assert_eq!(units.len(), 256);
        assert_eq!(units[0], (b'!', '!'));
        let mut bytes: Vec<u8> = units.iter().map(|u| u.0).collect();
        bytes.sort_unstable();
        bytes.dedup();
        assert_eq!(bytes.len(), 256);
        // space is not printable; it is shifted above U+0100
        let space = units.iter().find(|u| u.0 == b' ').unwrap();
        assert_eq!(space.1 as u32, 256 + 32);
    }

    #[test]
    fn vocabulary_layout() {
        let t = tiny_table();
        assert_eq!(t.vocab_size(), 524);
        assert_eq!(t.sot_id(), 522);
        assert_eq!(t.eot_id(), 523);
        assert_eq!(t.token_str(512), Some("do"));
    }

    #[test]
    fn header_line_is_skipped() {
        let t = MergeTable::load("#version: 0.2\na b\n".as_bytes()).unwrap();
        assert_eq!(t.merges().len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = MergeTable::load("#version: 0.2\na b\na b c\n".as_bytes()).unwrap_err();
        match err {
            AnatomyError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            MergeTable::load("single\n".as_bytes()),
            Err(AnatomyError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_merge_rejected() {
        let err = MergeTable::load("a b\nc d\na b\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AnatomyError::Validation(_)));
    }

    #[test]
    fn encode_wraps_and_pads() {
        let t = tiny_table();
        let seq = t.encode("dog", 8).unwrap();
        assert_eq!(seq.ids, vec![522, 513, 523, 0, 0, 0, 0, 0]);
        assert_eq!(seq.content_len, 3);
        assert!(!seq.truncated);

        let empty = t.encode("", 8).unwrap();
        assert_eq!(&empty.ids[..3], &[522, 523, 0]);
        assert_eq!(empty.content_len, 2);
    }

    #[test]
    fn truncation_keeps_end_marker() {
        let t = tiny_table();
        let seq = t.encode("the red dog the cat", 4).unwrap();
        assert_eq!(seq.ids.len(), 4);
        assert_eq!(seq.ids[3], t.eot_id());
        assert!(seq.truncated);
        assert_eq!(seq.dropped_tokens, 7 - 4);
    }

    #[test]
    fn context_too_small() {
        let t = tiny_table();
        assert!(matches!(t.encode("dog", 2), Err(AnatomyError::InvalidArgument(_))));
    }

    #[test]
    fn decode_round_trip_and_errors() {
        let t = tiny_table();
        let seq = t.encode("  The   RED dog ", 16).unwrap();
        assert_eq!(t.decode(&seq).unwrap(), "the red dog");
        let mut bad = seq.clone();
        bad.ids[1] = 10_000;
        assert!(matches!(t.decode(&bad), Err(AnatomyError::Validation(_))));
    }

    #[test]
    fn unmerged_word_falls_back_to_bytes() {
        let t = tiny_table();
        let ids = t.content_ids("zq");
        let z = t.base_tokens().iter().position(|s| s == "z").unwrap() as u32;
        let q = t.base_tokens().iter().position(|s| s == "q</w>").unwrap() as u32;
        assert_eq!(ids, vec![z, q]);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  White\tDOG \n"), "white dog");
        assert_eq!(normalize_text(""), "");
    }
}

#![allow(dead_code)]

use std::sync::LazyLock;

use anatomy_core::{MergeTable, TokenSequence};

pub static TABLE: LazyLock<MergeTable> = LazyLock::new(|| {
    MergeTable::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/clip_merges.txt")).unwrap()
});

/// Start marker 0, end marker 1, content ids in between, padded with `pad`.
pub fn seq(content: &[u32], context: usize, pad: u32) -> TokenSequence {
    let mut ids = vec![0];
    ids.extend_from_slice(content);
    ids.push(1);
    let content_len = ids.len();
    ids.resize(context, pad);
    TokenSequence { ids, content_len, truncated: false, dropped_tokens: 0 }
}

pub fn padded(seq: &TokenSequence, pad: u32) -> TokenSequence {
    let mut s = seq.clone();
    for id in &mut s.ids[seq.content_len..] {
        *id = pad;
    }
    s
}


//! Token-string to id mapping by stable feature hashing.
//!
//! Id 0 is reserved for unknown tokens; every string maps into
//! `1..vocab_size`. Hashing keeps the vocabulary open, so tokens of novel
//! entity types at meta-test time get their own (untrained) rows without a
//! vocabulary file.

use serde::{Deserialize, Serialize};

pub const UNK_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashVocab {
    pub size: usize,
    #[serde(default)]
    pub lowercase: bool,
}

impl HashVocab {
    pub fn new(size: usize) -> Self {
        assert!(size >= 2, "vocabulary needs room for UNK plus one bucket");
        HashVocab { size, lowercase: false }
    }

    pub fn id(&self, token: &str) -> usize {
        let h = if self.lowercase {
            fnv1a(token.to_lowercase().as_bytes())
        } else {
            fnv1a(token.as_bytes())
        };
        1 + (h % (self.size as u64 - 1)) as usize
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

// FNV-1a, 64-bit. Stable across platforms and releases, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

//! Whitespace tokenizer with hashed vocabulary.
//!
//! Each whitespace-separated token is hashed with 64-bit FNV-1a over its
//! UTF-8 bytes (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`)
//! and mapped to `1 + hash % (vocab_size - 1)`. Id 0 is reserved for the
//! pad token, which is also the whole encoding of an empty text.

pub const PAD: u32 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn token_id(token: &str, vocab_size: usize) -> u32 {
    debug_assert!(vocab_size >= 2);
    1 + (fnv1a64(token.as_bytes()) % (vocab_size as u64 - 1)) as u32
}

/// Tokenizes `text`, truncating to `max_len` ids.
pub fn tokenize(text: &str, vocab_size: usize, max_len: usize) -> Vec<u32> {
    let ids: Vec<u32> = text
        .split_whitespace()
        .take(max_len)
        .map(|t| token_id(t, vocab_size))
        .collect();
    if ids.is_empty() {
        vec![PAD]
    } else {
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_single_pad() {
        assert_eq!(tokenize("", 256, 8), vec![PAD]);
        assert_eq!(tokenize("   \t ", 256, 8), vec![PAD]);
    }

    #[test]
    fn repeated_tokens_share_an_id() {
        let ids = tokenize("a a a", 256, 8);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&id| id == ids[0] && id != PAD));
    }

    #[test]
    fn known_hash_values() {
        // Frozen from an independent FNV-1a evaluation.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(tokenize("graph neural network", 256, 8), vec![50, 203, 147]);
    }

    #[test]
    fn truncates_to_max_len() {
        assert_eq!(tokenize("a b c d e", 64, 3).len(), 3);
    }
}

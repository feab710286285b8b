//! Character offset to token index conversion over stored token texts.

use thiserror::Error;

use crate::trace::TokenRecord;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("character position {pos} outside decoded length {len}")]
pub struct OutOfRange {
    pub pos: usize,
    pub len: usize,
}

/// Exclusive character end offset of every token.
pub fn token_char_ends(tokens: &[TokenRecord]) -> Vec<usize> {
    tokens
        .iter()
        .scan(0usize, |acc, t| {
            *acc += t.char_len();
            Some(*acc)
        })
        .collect()
}

/// Index of the token whose `[start, end)` character interval contains
/// `char_pos`. The end of the text maps to the last token.
pub fn char_to_token(char_pos: usize, tokens: &[TokenRecord]) -> Result<usize, OutOfRange> {
    let ends = token_char_ends(tokens);
    let total = ends.last().copied().unwrap_or(0);
    if tokens.is_empty() || char_pos > total {
        return Err(OutOfRange { pos: char_pos, len: total });
    }
    if char_pos == total {
        return Ok(tokens.len() - 1);
    }
    Ok(ends.partition_point(|&end| end <= char_pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::test_support::trace_of;

    #[test]
    fn interval_lookup() {
        let t = trace_of("o", &["He", "llo", " wor", "ld"]);
        let tok = &t.cot_tokens;
        assert_eq!(char_to_token(5, tok), Ok(2));
        assert_eq!(char_to_token(0, tok), Ok(0));
        assert_eq!(char_to_token(4, tok), Ok(1));
        assert_eq!(char_to_token(11, tok), Ok(3));
        assert_eq!(char_to_token(12, tok), Err(OutOfRange { pos: 12, len: 11 }));
    }

    #[test]
    fn empty_tokens_are_skipped() {
        let t = trace_of("o", &["ab", "", "c"]);
        assert_eq!(char_to_token(2, &t.cot_tokens), Ok(2));
    }

    #[test]
    fn multibyte_text_counts_chars() {
        let t = trace_of("o", &["é", "€5", "0"]);
        assert_eq!(char_to_token(1, &t.cot_tokens), Ok(1));
        assert_eq!(char_to_token(3, &t.cot_tokens), Ok(2));
    }
}

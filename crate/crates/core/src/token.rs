//! Pluggable token counting.
//!
//! The default counter splits on Unicode whitespace and treats every
//! punctuation (more precisely: non-alphanumeric, non-whitespace) codepoint
//! as a single token. A run of alphanumeric codepoints is one token.
//! Exact parity with a specific model tokenizer can be obtained by plugging
//! in an implementation backed by that tokenizer.

/// Byte range of one token inside the original text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Counts tokens in a text and exposes token boundaries.
pub trait TokenCounter: Send + Sync {
    /// Byte spans of the tokens in `text`, in order.
    fn spans(&self, text: &str) -> Vec<TokenSpan>;

    /// Number of tokens in `text`.
    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

/// Default whitespace/punctuation token counter.
///
/// Rule: scan codepoints left to right; whitespace is a separator, a maximal
/// run of alphanumeric codepoints is one token, and every other codepoint is
/// a token by itself.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultTokenCounter;

impl TokenCounter for DefaultTokenCounter {
    fn spans(&self, text: &str) -> Vec<TokenSpan> {
        let mut spans = Vec::new();
        let mut word_start: Option<usize> = None;
        for (idx, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                if word_start.is_none() {
                    word_start = Some(idx);
                }
            } else {
                if let Some(start) = word_start.take() {
                    spans.push(TokenSpan { start, end: idx });
                }
                if !ch.is_whitespace() {
                    spans.push(TokenSpan {
                        start: idx,
                        end: idx + ch.len_utf8(),
                    });
                }
            }
        }
        if let Some(start) = word_start {
            spans.push(TokenSpan {
                start,
                end: text.len(),
            });
        }
        spans
    }
}

/// Convenience: count with the default counter.
pub fn count_tokens(text: &str) -> usize {
    DefaultTokenCounter.count(text)
}

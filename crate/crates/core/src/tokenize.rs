//! Tokenizers shared by the embedding tables and the Siamese model.
//!
//! A table built with one tokenizer must be consumed with the same one, so
//! every tokenizer carries a stable identifier that ends up in checkpoints.

use crate::lexsim::word_sequence;

pub trait Tokenizer: Send + Sync {
    /// Stable identifier, recorded in checkpoints.
    fn tokenizer_id(&self) -> String;
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercased alphanumeric runs, order and repeats preserved.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenizer_id(&self) -> String {
        "word-lower".to_string()
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        word_sequence(text).collect()
    }
}

/// Splits on whitespace only.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenizer_id(&self) -> String {
        "whitespace".to_string()
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}

/// Greedy longest-match-first subword tokenizer over a fixed vocabulary,
/// with `##` marking word-internal pieces. Words are lowercased and split on
/// whitespace and punctuation first; a word with no complete segmentation
/// becomes the unknown token.
#[derive(Clone, Debug)]
pub struct WordPiece {
    vocab: std::collections::HashSet<String>,
    unk: String,
    max_chars: usize,
    id: String,
}

impl WordPiece {
    pub fn new<I: IntoIterator<Item = String>>(vocab: I, id: impl Into<String>) -> Self {
        WordPiece {
            vocab: vocab.into_iter().collect(),
            unk: "[UNK]".to_string(),
            max_chars: 100,
            id: id.into(),
        }
    }

    fn split_word(&self, word: &str, out: &mut Vec<String>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > self.max_chars {
            out.push(self.unk.clone());
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if self.vocab.contains(&piece) {
                    found = Some(piece);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(p) => {
                    pieces.push(p);
                    start = end;
                }
                None => {
                    out.push(self.unk.clone());
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

impl Tokenizer for WordPiece {
    fn tokenizer_id(&self) -> String {
        self.id.clone()
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let lower = text.to_lowercase();
        for chunk in lower.split_whitespace() {
            let mut word = String::new();
            for c in chunk.chars() {
                if c.is_alphanumeric() {
                    word.push(c);
                } else {
                    if !word.is_empty() {
                        self.split_word(&word, &mut out);
                        word.clear();
                    }
                    out.push(c.to_string());
                }
            }
            if !word.is_empty() {
                self.split_word(&word, &mut out);
            }
        }
        out
    }
}

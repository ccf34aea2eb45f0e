// SPDX-License-Identifier: MIT OR Apache-2.0

//! Whitespace tokenizer with fixed-width subword chunking.
//!
//! Words of at most [`SPLIT_THRESHOLD`] characters are single pieces. Longer
//! words are cut into chunks of [`MAX_PIECE_LEN`] characters; every chunk
//! after the first carries the [`CONTINUATION_PREFIX`]. "Explanation"
//! therefore becomes `Expl`, `##anat`, `##ion`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;

pub const SPECIAL_PIECES: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const MAX_PIECE_LEN: usize = 4;
pub const SPLIT_THRESHOLD: usize = 6;
pub const CONTINUATION_PREFIX: &str = "##";

/// Splits one word into pieces according to the chunking rule.
pub fn split_word(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() <= SPLIT_THRESHOLD || SPECIAL_PIECES.contains(&word) {
        return vec![word.to_string()];
    }
    chars
        .chunks(MAX_PIECE_LEN)
        .enumerate()
        .map(|(i, chunk)| {
            let body: String = chunk.iter().collect();
            if i == 0 {
                body
            } else {
                format!("{CONTINUATION_PREFIX}{body}")
            }
        })
        .collect()
}

/// True for pieces that continue the preceding word.
pub fn is_continuation(piece: &str) -> bool {
    piece.starts_with(CONTINUATION_PREFIX) && piece.len() > CONTINUATION_PREFIX.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a tokenizer from an id-ordered piece list whose first four
    /// entries are the special tokens.
    pub fn new(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < SPECIAL_PIECES.len()
            || pieces.iter().zip(SPECIAL_PIECES).any(|(p, s)| p != s)
        {
            return Err(Error::Config(format!(
                "vocabulary must start with {SPECIAL_PIECES:?}"
            )));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (id, piece) in pieces.iter().enumerate() {
            if piece.is_empty() || piece.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary entry {piece:?} at id {id}")));
            }
            if index.insert(piece.clone(), id as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {piece:?}")));
            }
        }
        Ok(Self { pieces, index })
    }

    /// Vocabulary made of the special tokens followed by every piece of
    /// `corpus`, in order of first appearance.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        for line in corpus {
            for word in line.split_whitespace() {
                for piece in split_word(word) {
                    if seen.insert(piece.clone()) {
                        pieces.push(piece);
                    }
                }
            }
        }
        Self::new(pieces).expect("corpus pieces are valid")
    }

    /// Reads a vocabulary file: UTF-8, one piece per line, line number = id.
    pub fn load_vocab(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut text = self.pieces.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces_list(&self) -> &[String] {
        &self.pieces
    }

    /// Piece strings of `text` before id lookup.
    pub fn pieces(&self, text: &str) -> Vec<String> {
        text.split_whitespace().flat_map(split_word).collect()
    }

    /// Text to ids; pieces missing from the vocabulary map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.pieces(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    /// Piece string of an id; out-of-range ids render as `<unk>`.
    pub fn piece(&self, id: TokenId) -> &str {
        self.pieces
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIAL_PIECES[UNK_ID as usize])
    }

    pub fn id_pieces(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&id| self.piece(id).to_string()).collect()
    }

    /// Ids back to text. Padding, BOS and EOS are dropped and continuation
    /// pieces are glued to the preceding piece.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            let piece = self.piece(id);
            if is_continuation(piece) && !out.is_empty() {
                out.push_str(&piece[CONTINUATION_PREFIX.len()..]);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(piece);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn long_word_is_chunked_by_four() {
        assert_eq!(split_word("Explanation"), vec!["Expl", "##anat", "##ion"]);
        assert_eq!(split_word("abcdefg"), vec!["abcd", "##efg"]);
        assert_eq!(split_word("abcdef"), vec!["abcdef"]);
        assert_eq!(split_word("abcdefgh"), vec!["abcd", "##efgh"]);
    }

    #[test]
    fn chunking_counts_characters_not_bytes() {
        assert_eq!(split_word("öğretmen"), vec!["öğre", "##tmen"]);
    }

    #[test]
    fn short_words_are_not_split() {
        let tok = Tokenizer::from_corpus(["a b"]);
        assert_eq!(tok.pieces("a b"), vec!["a", "b"]);
        assert_eq!(tok.tokenize("a b"), vec![4, 5]);
    }

    #[test]
    fn unknown_pieces_map_to_unk() {
        let tok = Tokenizer::from_corpus(["hello"]);
        assert_eq!(tok.tokenize("hello there"), vec![4, UNK_ID]);
    }

    #[test]
    fn special_strings_are_recognised() {
        let tok = Tokenizer::from_corpus(["x"]);
        assert_eq!(tok.tokenize("x </s>"), vec![4, EOS_ID]);
    }

    #[test]
    fn vocab_must_start_with_specials() {
        assert!(Tokenizer::new(vec!["a".into(), "b".into()]).is_err());
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.push("x".into());
        pieces.push("x".into());
        assert!(Tokenizer::new(pieces).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let tok = Tokenizer::from_corpus(["the Explanation is here"]);
        tok.save_vocab(&path).unwrap();
        assert_eq!(Tokenizer::load_vocab(&path).unwrap(), tok);
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in proptest::collection::vec("[a-zA-Zçğış]{1,12}", 1..8)) {
            let text = words.join(" ");
            let tok = Tokenizer::from_corpus([text.as_str()]);
            prop_assert_eq!(tok.detokenize(&tok.tokenize(&text)), text.clone());
            for piece in tok.pieces(&text) {
                let body = piece.strip_prefix(CONTINUATION_PREFIX).unwrap_or(&piece);
                prop_assert!(body.chars().count() <= MAX_PIECE_LEN || !piece.starts_with(CONTINUATION_PREFIX));
            }
            // Word-initial pieces never carry the marker.
            for word in &words {
                prop_assert!(!split_word(word)[0].starts_with(CONTINUATION_PREFIX));
            }
        }
    }
}

//! Wordpiece vocabulary with an underscore word-end convention.
//!
//! A word is a sequence of pieces whose final piece carries the `_` suffix
//! (`Turner` → `Tur n er_`). Tokenization is greedy longest-match, which is
//! deterministic and total as long as every alphabet character exists both
//! as a word-internal piece and as a word-end piece — `load` enforces that.
//!
//! File format: UTF-8, one piece per line, LF-terminated; id = zero-based
//! line number. The four special ids (OOL, BLANK, SOS, EOS) are appended
//! after the file pieces and are never produced by tokenization.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const WORD_END_MARKER: char = '_';

pub type PieceId = usize;

#[derive(Debug, Clone)]
pub struct WordpieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, PieceId>,
    alphabet: BTreeSet<char>,
    max_piece_chars: usize,
}

/// Result of [`WordpieceVocab::detokenize`]. When the id sequence does not
/// close its last word with a word-end piece, the partial word is still
/// emitted and `complete` is false.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub words: Vec<String>,
    pub complete: bool,
}

impl WordpieceVocab {
    pub fn from_pieces<S: Into<String>>(pieces: impl IntoIterator<Item = S>) -> Result<Self> {
        let pieces: Vec<String> = pieces.into_iter().map(Into::into).collect();
        let mut index = HashMap::new();
        for (line, piece) in pieces.iter().enumerate() {
            if piece.is_empty() {
                return Err(Error::InvalidPiece {
                    piece: piece.clone(),
                    line: line + 1,
                    reason: "empty piece".into(),
                });
            }
            let chars: Vec<char> = piece.chars().collect();
            if chars[..chars.len() - 1].contains(&WORD_END_MARKER) {
                return Err(Error::InvalidPiece {
                    piece: piece.clone(),
                    line: line + 1,
                    reason: "word-end marker must be the final character".into(),
                });
            }
            if chars.len() == 1 && chars[0] == WORD_END_MARKER {
                return Err(Error::InvalidPiece {
                    piece: piece.clone(),
                    line: line + 1,
                    reason: "piece has no characters besides the marker".into(),
                });
            }
            if let Some(&first) = index.get(piece) {
                return Err(Error::DuplicatePiece {
                    piece: piece.clone(),
                    first_line: first + 1,
                    second_line: line + 1,
                });
            }
            index.insert(piece.clone(), line);
        }

        let alphabet: BTreeSet<char> = pieces
            .iter()
            .flat_map(|p| p.chars())
            .filter(|&c| c != WORD_END_MARKER)
            .collect();
        for &ch in &alphabet {
            let internal = ch.to_string();
            let word_end = format!("{ch}{WORD_END_MARKER}");
            if !index.contains_key(&internal) || !index.contains_key(&word_end) {
                return Err(Error::MissingCharCoverage { ch });
            }
        }
        let max_piece_chars = pieces
            .iter()
            .map(|p| p.trim_end_matches(WORD_END_MARKER).chars().count())
            .max()
            .unwrap_or(0);

        Ok(WordpieceVocab {
            pieces,
            index,
            alphabet,
            max_piece_chars,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        Self::from_pieces(lines)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for p in &self.pieces {
            let _ = writeln!(out, "{p}");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    // ── Ids ──────────────────────────────────────────────────────────

    /// Number of real (tokenizable) pieces.
    pub fn n_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Real pieces plus the four specials.
    pub fn total_ids(&self) -> usize {
        self.pieces.len() + 4
    }

    pub fn ool(&self) -> PieceId {
        self.pieces.len()
    }

    /// The transducer's no-emission symbol.
    pub fn blank(&self) -> PieceId {
        self.pieces.len() + 1
    }

    pub fn sos(&self) -> PieceId {
        self.pieces.len() + 2
    }

    pub fn eos(&self) -> PieceId {
        self.pieces.len() + 3
    }

    pub fn is_special(&self, id: PieceId) -> bool {
        id >= self.pieces.len()
    }

    pub fn piece_str(&self, id: PieceId) -> &str {
        match id {
            id if id < self.pieces.len() => &self.pieces[id],
            id if id == self.ool() => "<ool>",
            id if id == self.blank() => "<blank>",
            id if id == self.sos() => "<sos>",
            _ => "<eos>",
        }
    }

    pub fn piece_id(&self, piece: &str) -> Option<PieceId> {
        self.index.get(piece).copied()
    }

    /// True when emitting this piece closes a word.
    pub fn is_word_end(&self, id: PieceId) -> bool {
        id < self.pieces.len() && self.pieces[id].ends_with(WORD_END_MARKER)
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    /// Longest piece length in word characters (marker excluded). Greedy
    /// matching never looks further ahead than this.
    pub fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    // ── Tokenization ─────────────────────────────────────────────────

    /// Greedy longest-match tokenization of a single word. The final piece
    /// is always a word-end piece; concatenating the pieces (marker
    /// stripped) reproduces the word.
    pub fn tokenize_word(&self, word: &str) -> Result<Vec<PieceId>> {
        if word.is_empty() {
            return Err(Error::UntokenizableWord {
                word: word.into(),
                reason: "empty word".into(),
            });
        }
        let chars: Vec<char> = word.chars().collect();
        for &ch in &chars {
            if !self.alphabet.contains(&ch) {
                return Err(Error::CharOutsideAlphabet {
                    word: word.into(),
                    ch,
                });
            }
        }

        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let remaining = chars.len() - pos;
            let mut chosen: Option<(usize, PieceId)> = None; // (consumed chars, id)
            let horizon = self.max_piece_chars.min(remaining);
            for len in (1..=horizon).rev() {
                let segment: String = chars[pos..pos + len].iter().collect();
                if len == remaining {
                    // only a word-end piece may close the word
                    if let Some(&id) = self.index.get(&format!("{segment}{WORD_END_MARKER}")) {
                        chosen = Some((len, id));
                        break;
                    }
                }
                if len < remaining {
                    if let Some(&id) = self.index.get(&segment) {
                        chosen = Some((len, id));
                        break;
                    }
                }
            }
            match chosen {
                Some((len, id)) => {
                    out.push(id);
                    pos += len;
                }
                // unreachable under single-character coverage
                None => {
                    return Err(Error::UntokenizableWord {
                        word: word.into(),
                        reason: format!("no piece matches at character {pos}"),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Tokenize a word sequence into one flat piece-id sequence.
    pub fn tokenize_words(&self, words: &[String]) -> Result<Vec<PieceId>> {
        let mut out = Vec::new();
        for w in words {
            out.extend(self.tokenize_word(w)?);
        }
        Ok(out)
    }

    /// Inverse of tokenization on its image: splits at word-end pieces.
    pub fn detokenize(&self, ids: &[PieceId]) -> Result<Detokenized> {
        let mut words = Vec::new();
        let mut current = String::new();
        for &id in ids {
            if self.is_special(id) {
                return Err(Error::SpecialInDetokenize { id });
            }
            let piece = &self.pieces[id];
            if let Some(stem) = piece.strip_suffix(WORD_END_MARKER) {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            } else {
                current.push_str(piece);
            }
        }
        if current.is_empty() {
            Ok(Detokenized {
                words,
                complete: true,
            })
        } else {
            words.push(current);
            Ok(Detokenized {
                words,
                complete: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig_vocab() -> WordpieceVocab {
        // covers the Tur / n / er_ walkthrough plus full single-char coverage
        let mut pieces: Vec<String> = vec!["Tur".into(), "er_".into(), "in_".into()];
        for ch in ['T', 'u', 'r', 'n', 'e', 'i', 'a'] {
            pieces.push(ch.to_string());
            pieces.push(format!("{ch}_"));
        }
        WordpieceVocab::from_pieces(pieces).unwrap()
    }

    #[test]
    fn tokenizes_turner_through_longest_match() {
        let v = fig_vocab();
        let ids = v.tokenize_word("Turner").unwrap();
        let pieces: Vec<&str> = ids.iter().map(|&i| v.piece_str(i)).collect();
        assert_eq!(pieces, vec!["Tur", "n", "er_"]);
    }

    #[test]
    fn single_char_word_uses_word_end_piece() {
        let v = fig_vocab();
        let ids = v.tokenize_word("a").unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(v.piece_str(ids[0]), "a_");
    }

    #[test]
    fn detokenize_splits_at_word_ends() {
        let v = fig_vocab();
        let ids = v.tokenize_words(&["Turner".into(), "Turin".into()]).unwrap();
        let d = v.detokenize(&ids).unwrap();
        assert_eq!(d.words, vec!["Turner", "Turin"]);
        assert!(d.complete);

        assert_eq!(v.detokenize(&[]).unwrap().words, Vec::<String>::new());
    }

    #[test]
    fn trailing_internal_piece_is_flagged() {
        let v = fig_vocab();
        let tur = v.piece_id("Tur").unwrap();
        let d = v.detokenize(&[tur]).unwrap();
        assert_eq!(d.words, vec!["Tur"]);
        assert!(!d.complete);
    }

    #[test]
    fn specials_are_distinct_and_rejected() {
        let v = fig_vocab();
        let ids = [v.ool(), v.blank(), v.sos(), v.eos()];
        let set: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(set.len(), 4);
        assert!(v.detokenize(&[v.sos()]).is_err());
    }

    #[test]
    fn duplicate_piece_names_both_lines() {
        let err = WordpieceVocab::from_pieces(vec!["a", "a_", "a"]).unwrap_err();
        match err {
            Error::DuplicatePiece {
                first_line,
                second_line,
                ..
            } => {
                assert_eq!((first_line, second_line), (1, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_coverage_is_rejected() {
        // 'b' appears in a multi-char piece but has no single-char pieces
        let err = WordpieceVocab::from_pieces(vec!["ab_", "a", "a_"]).unwrap_err();
        assert!(matches!(err, Error::MissingCharCoverage { ch: 'b' }));
    }

    #[test]
    fn char_outside_alphabet_is_reported() {
        let v = fig_vocab();
        let err = v.tokenize_word("Tur9").unwrap_err();
        assert!(matches!(err, Error::CharOutsideAlphabet { ch: '9', .. }));
    }

    #[test]
    fn load_appends_specials_after_file_pieces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "a\na_\nb\nb_\n").unwrap();
        let v = WordpieceVocab::load(&path).unwrap();
        assert_eq!(v.n_pieces(), 4);
        assert_eq!(v.total_ids(), 8);
        assert_eq!(v.ool(), 4);
        assert_eq!(v.eos(), 7);
    }

    fn proptest_vocab() -> WordpieceVocab {
        let mut pieces: Vec<String> = Vec::new();
        for ch in 'a'..='f' {
            pieces.push(ch.to_string());
            pieces.push(format!("{ch}_"));
        }
        for multi in ["ab", "bc_", "abc", "fa", "de_", "cab_", "ee"] {
            pieces.push(multi.to_string());
        }
        WordpieceVocab::from_pieces(pieces).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        /// detokenize ∘ tokenize = identity on alphabet words.
        #[test]
        fn roundtrip_random_words(word in "[a-f]{1,12}") {
            let v = proptest_vocab();
            let ids = v.tokenize_word(&word).unwrap();
            prop_assert!(v.is_word_end(*ids.last().unwrap()));
            let d = v.detokenize(&ids).unwrap();
            prop_assert!(d.complete);
            prop_assert_eq!(d.words, vec![word]);
        }

        /// Sentence-level roundtrip.
        #[test]
        fn roundtrip_random_sentences(words in prop::collection::vec("[a-f]{1,8}", 1..6)) {
            let v = proptest_vocab();
            let ids = v.tokenize_words(&words).unwrap();
            let d = v.detokenize(&ids).unwrap();
            prop_assert!(d.complete);
            prop_assert_eq!(d.words, words);
        }

        /// Greedy matching is prefix-stable: pieces that end at least
        /// max_piece_chars before the end of `w` are unchanged when `w`
        /// is extended.
        #[test]
        fn prefix_stability(word in "[a-f]{4,10}", tail in "[a-f]{1,6}") {
            let v = proptest_vocab();
            let base = v.tokenize_word(&word).unwrap();
            let extended = v.tokenize_word(&format!("{word}{tail}")).unwrap();
            let safe_end = word.chars().count().saturating_sub(v.max_piece_chars());
            let mut pos = 0;
            for (i, &id) in base.iter().enumerate() {
                let stem = v.piece_str(id).trim_end_matches(WORD_END_MARKER);
                pos += stem.chars().count();
                if pos <= safe_end {
                    prop_assert_eq!(base[i], extended[i]);
                }
            }
        }
    }
}

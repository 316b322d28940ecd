use std::path::PathBuf;

/// Crate-wide error type for recoverable failures (I/O, malformed inputs,
/// configuration mismatches). Shape errors inside the numeric engine are
/// programming bugs and panic instead.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("vocab: duplicate piece {piece:?}) on lines {first_line} and {second_line}")]
    DuplicatePiece {
        piece: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("vocab: character {ch:?} lacks word-internal and word-end single-char pieces")]
    MissingCharCoverage { ch: char },

    #[error("vocab: invalid piece {piece:?} on line {line}: {reason}")]
    InvalidPiece {
        piece: String,
        line: usize,
        reason: String,
    },

    #[error("tokenize: character {ch:?} in word {word:?} is outside the vocabulary alphabet")]
    CharOutsideAlphabet { word: String, ch: char },

    #[error("detokenize: id {id} is a special token and cannot be detokenized")]
    SpecialInDetokenize { id: usize },

    #[error("biasing: word {word:?} is not tokenizable: {reason}")]
    UntokenizableWord { word: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("decode: {0}")]
    Decode(String),

    #[error("scoring: {0}")]
    Scoring(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

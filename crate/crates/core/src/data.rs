//! Character vocabulary and corpus splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Code-point-sorted character table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    ids: BTreeMap<char, usize>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self::from_chars(chars)
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, ids }
    }

    /// Rebuilds a table stored as a string of its characters in id order.
    pub fn from_table(table: &str) -> Result<Self> {
        let chars: Vec<char> = table.chars().collect();
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("vocabulary table is not strictly sorted".into()));
        }
        Ok(Self::from_chars(chars))
    }

    pub fn table(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Corpus(format!("character {c:?} is not in the vocabulary"))))
            .collect()
    }

    /// Like [`Vocab::encode`], mapping unknown characters to `fallback`.
    pub fn encode_lossy(&self, text: &str, fallback: usize) -> Vec<usize> {
        text.chars().map(|c| self.id(c).unwrap_or(fallback)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.chars.get(i).copied().unwrap_or('\u{fffd}')).collect()
    }

    /// Mean UTF-8 bytes per character over `text`.
    pub fn bytes_per_token(text: &str) -> f64 {
        let n = text.chars().count();
        if n == 0 {
            1.0
        } else {
            text.len() as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub bytes_per_token: f64,
}

/// Splits `text` contiguously at `split_ratio` after building its vocabulary.
pub fn split_text(text: &str, split_ratio: f64) -> Result<Corpus> {
    if text.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split_ratio must lie in (0, 1), got {split_ratio}")));
    }
    let vocab = Vocab::from_text(text);
    let ids = vocab.encode(text)?;
    let cut = ((ids.len() as f64) * split_ratio).round() as usize;
    let cut = cut.clamp(1, ids.len());
    Ok(Corpus {
        bytes_per_token: Vocab::bytes_per_token(text),
        train: ids[..cut].to_vec(),
        val: ids[cut..].to_vec(),
        vocab,
    })
}

pub fn ingest_corpus(path: impl AsRef<Path>, split_ratio: f64) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    split_text(&text, split_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_of_a_repeated_word() {
        let c = split_text("abcabc", 0.5).unwrap();
        assert_eq!(c.vocab.table(), "abc");
        assert_eq!(c.train, vec![0, 1, 2]);
        assert_eq!(c.val, vec![0, 1, 2]);
    }

    #[test]
    fn unicode_is_code_point_sorted() {
        let v = Vocab::from_text("zé a");
        assert_eq!(v.table(), " az\u{e9}");
        assert_eq!(v.decode(&v.encode("é z").unwrap()), "é z");
        assert_eq!(Vocab::from_table(&v.table()).unwrap(), v);
        assert!((Vocab::bytes_per_token("é") - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(split_text("", 0.9), Err(Error::Corpus(_))));
        assert!(matches!(split_text("ab", 1.0), Err(Error::Config(_))));
        assert!(matches!(ingest_corpus("/nonexistent/corpus.txt", 0.9), Err(Error::Corpus(_))));
        assert!(Vocab::from_table("ba").is_err());
    }

    #[test]
    fn same_file_gives_same_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "to be or not to be").unwrap();
        let a = ingest_corpus(&p, 0.9).unwrap();
        let b = ingest_corpus(&p, 0.9).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.train, b.train);
    }
}

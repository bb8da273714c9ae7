//! Greedy byte-pair-style word-piece training over characters, encoding and
//! decoding with a word-initial marker, and phonemization via the lexicon.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Lexicon;

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
/// Start and end of sequence share one id.
pub const SOS_EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<blank>", "<unk>", "<sos/eos>"];
/// Prefixed to the first piece of every word.
pub const MARKER: char = '▁';

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {requested} is below the {minimum} reserved and alphabet symbols")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("character {0:?} is outside the alphabet")]
    UnknownChar(char),
    #[error("token id {0} is out of range")]
    IdOutOfRange(usize),
    #[error("word {0:?} is not in the lexicon")]
    OutOfLexicon(String),
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { format!("{MARKER}{c}") } else { c.to_string() })
        .collect()
}

/// Applies merges in rank order; each merge joins every left-to-right,
/// non-overlapping occurrence of its pair.
pub fn apply_merges(mut symbols: Vec<String>, merges: &[(String, String)]) -> Vec<String> {
    for (a, b) in merges {
        if symbols.len() < 2 {
            break;
        }
        let mut out = Vec::with_capacity(symbols.len());
        let mut i = 0;
        while i < symbols.len() {
            if i + 1 < symbols.len() && symbols[i] == *a && symbols[i + 1] == *b {
                out.push(format!("{a}{b}"));
                i += 2;
            } else {
                out.push(std::mem::take(&mut symbols[i]));
                i += 1;
            }
        }
        symbols = out;
    }
    symbols
}

/// Trains on the words of `sentences`. Each round merges the most frequent
/// adjacent pair, breaking count ties by the lexicographically smaller
/// `(left, right)`. Training stops at `vocab_size` or when no pair remains.
pub fn train_bpe<S: AsRef<str>>(
    sentences: &[S],
    vocab_size: usize,
) -> Result<TokenizerModel, TokenizerError> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sentences {
        for w in s.as_ref().split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    if freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> =
        freq.iter().map(|(w, &n)| (initial_symbols(w), n)).collect();
    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let minimum = RESERVED.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    let mut merges = Vec::new();
    while minimum + merges.len() < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, n) in &words {
            for p in syms.windows(2) {
                *counts.entry((&p[0], &p[1])).or_default() += n;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties
        let Some(best) = counts
            .iter()
            .fold(None::<(&(&str, &str), usize)>, |acc, (k, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((k, c)),
            })
            .map(|(k, _)| (k.0.to_string(), k.1.to_string()))
        else {
            break;
        };
        let step = [best.clone()];
        for (syms, _) in words.iter_mut() {
            *syms = apply_merges(std::mem::take(syms), &step);
        }
        merges.push(best);
    }
    let tokens: Vec<String> = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(alphabet)
        .chain(merges.iter().map(|(a, b)| format!("{a}{b}")))
        .collect();
    TokenizerModel::from_parts(merges, tokens)
}

impl TokenizerModel {
    pub fn from_parts(
        merges: Vec<(String, String)>,
        tokens: Vec<String>,
    ) -> Result<Self, TokenizerError> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(r) {
                return Err(TokenizerError::Malformed(format!("id {i} must be {r}")));
            }
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(TokenizerError::Malformed(format!("bad token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(TokenizerError::Malformed(format!("duplicate token {t}")));
            }
        }
        for (a, b) in &merges {
            if !ids.contains_key(&format!("{a}{b}")) {
                return Err(TokenizerError::Malformed(format!("merge {a} {b} has no token")));
            }
        }
        Ok(Self {
            merges,
            tokens,
            ids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn encode_word(&self, word: &str, strict: bool) -> Result<Vec<usize>, TokenizerError> {
        let symbols = initial_symbols(word);
        if strict {
            for s in &symbols {
                if !self.ids.contains_key(s) {
                    let c = s.chars().last().expect("non-empty symbol");
                    return Err(TokenizerError::UnknownChar(c));
                }
            }
        }
        Ok(apply_merges(symbols, &self.merges)
            .iter()
            .map(|s| self.id(s).unwrap_or(UNK))
            .collect())
    }

    /// Characters outside the alphabet map to `<unk>`, or fail when `strict`.
    pub fn encode(&self, sentence: &str, strict: bool) -> Result<Vec<usize>, TokenizerError> {
        let mut out = Vec::new();
        for w in sentence.split_whitespace() {
            out.extend(self.encode_word(w, strict)?);
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode); blank and sos/eos are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut s = String::new();
        for &id in ids {
            if id == BLANK || id == SOS_EOS {
                continue;
            }
            let t = self.token(id).ok_or(TokenizerError::IdOutOfRange(id))?;
            if id == UNK {
                s.push_str(t);
            } else {
                s.push_str(&t.replace(MARKER, " "));
            }
        }
        Ok(s.trim_start().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("[merges]\n");
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s.push_str("[vocab]\n");
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t}\t{i}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        if lines.next() != Some("[merges]") {
            return Err(TokenizerError::Malformed("missing [merges] header".into()));
        }
        let mut merges = Vec::new();
        let mut tokens = Vec::new();
        let mut in_vocab = false;
        for line in lines {
            if !in_vocab && line == "[vocab]" {
                in_vocab = true;
            } else if in_vocab {
                let (t, id) = line
                    .split_once('\t')
                    .ok_or_else(|| TokenizerError::Malformed(format!("vocab line {line:?}")))?;
                if id.parse::<usize>().ok() != Some(tokens.len()) {
                    return Err(TokenizerError::Malformed(format!("ids not dense at {t}")));
                }
                tokens.push(t.to_string());
            } else {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| TokenizerError::Malformed(format!("merge line {line:?}")))?;
                merges.push((a.to_string(), b.to_string()));
            }
        }
        if !in_vocab {
            return Err(TokenizerError::Malformed("missing [vocab] section".into()));
        }
        Self::from_parts(merges, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Concatenated lexicon entries of the sentence's words.
pub fn phonemize(lexicon: &Lexicon, sentence: &str) -> Result<Vec<usize>, TokenizerError> {
    let mut out = Vec::new();
    for w in sentence.split_whitespace() {
        let p = lexicon
            .get(w)
            .ok_or_else(|| TokenizerError::OutOfLexicon(w.to_string()))?;
        out.extend_from_slice(p);
    }
    Ok(out)
}

/// Phone-level and word-piece-level targets of one transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPair {
    pub phones: Vec<usize>,
    pub pieces: Vec<usize>,
    pub text: String,
}

impl LabelPair {
    pub fn new(
        text: &str,
        lexicon: &Lexicon,
        tokenizer: &TokenizerModel,
    ) -> Result<Self, TokenizerError> {
        Ok(Self {
            phones: phonemize(lexicon, text)?,
            pieces: tokenizer.encode(text, true)?,
            text: text.split_whitespace().collect::<Vec<_>>().join(" "),
        })
    }
}

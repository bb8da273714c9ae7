//! Synthetic speech-like corpus with exact phone alignments, a phonetic
//! reduction simulator for evaluation sets, and the on-disk corpus layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::rng::derive_seed;
use crate::kernel::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("utterance length range must start at 1 or more words, got {0}..={1}")]
    BadLengthRange(usize, usize),
    #[error("invalid inventory: {0}")]
    Inventory(String),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error("invalid reduction spec: {0}")]
    Reduction(String),
    #[error("alignment overlap in {utt} at span {span}")]
    AlignmentOverlap { utt: String, span: usize },
    #[error("alignment gap in {utt} at span {span}")]
    AlignmentGap { utt: String, span: usize },
    #[error("alignment of {utt} is invalid: {reason}")]
    Alignment { utt: String, reason: String },
    #[error("{utt}: features have {feats} frames but alignment covers {align}")]
    FrameMismatch {
        utt: String,
        feats: usize,
        align: usize,
    },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// One phone: id (1-based, 0 is the CTC blank), spelling symbol, acoustic
/// prototype and duration distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Phone {
    pub id: usize,
    pub symbol: char,
    pub prototype: Vec<f64>,
    pub mean_duration: f64,
    pub duration_spread: f64,
}

impl Phone {
    /// Inclusive integer duration range `[mean − spread, mean + spread]`.
    pub fn duration_range(&self) -> (usize, usize) {
        let lo = (self.mean_duration - self.duration_spread).ceil().max(1.0) as usize;
        let hi = (self.mean_duration + self.duration_spread).floor().max(lo as f64) as usize;
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneInventory {
    phones: Vec<Phone>,
}

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz";

impl PhoneInventory {
    pub fn new(phones: Vec<Phone>) -> Result<Self, CorpusError> {
        if phones.is_empty() {
            return Err(CorpusError::Inventory("no phones".into()));
        }
        let dim = phones[0].prototype.len();
        for (i, p) in phones.iter().enumerate() {
            if p.id != i + 1 {
                return Err(CorpusError::Inventory(format!(
                    "phone ids must be 1..=N in order, found {} at position {i}",
                    p.id
                )));
            }
            if p.prototype.len() != dim || dim == 0 {
                return Err(CorpusError::Inventory(format!("phone {} has bad dimension", p.id)));
            }
            if p.prototype.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::Inventory(format!("phone {} not finite", p.id)));
            }
            if !(p.duration_spread >= 0.0) || p.duration_range().0 < 1 {
                return Err(CorpusError::Inventory(format!("phone {} duration", p.id)));
            }
            if phones[..i].iter().any(|q| q.symbol == p.symbol) {
                return Err(CorpusError::Inventory(format!("duplicate symbol {}", p.symbol)));
            }
        }
        Ok(Self { phones })
    }

    /// Prototypes from a seeded unit Gaussian, rescaled so the closest pair
    /// is strictly farther apart than `margin`.
    pub fn generate(
        n_phones: usize,
        dim: usize,
        margin: f64,
        mean_duration: f64,
        duration_spread: f64,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        if n_phones == 0 || n_phones > SYMBOLS.len() {
            return Err(CorpusError::Inventory(format!(
                "phone count must be in 1..={}, got {n_phones}",
                SYMBOLS.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut protos: Vec<Vec<f64>> = (0..n_phones)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let closest = min_pairwise_distance(&protos);
        if n_phones > 1 && closest <= margin {
            if closest == 0.0 {
                return Err(CorpusError::Inventory("coincident prototypes".into()));
            }
            let c = 1.05 * margin / closest;
            protos.iter_mut().flatten().for_each(|v| *v *= c);
        }
        let phones = protos
            .into_iter()
            .zip(SYMBOLS.chars())
            .enumerate()
            .map(|(i, (prototype, symbol))| Phone {
                id: i + 1,
                symbol,
                prototype,
                mean_duration,
                duration_spread,
            })
            .collect();
        Self::new(phones)
    }

    pub fn phones(&self) -> &[Phone] {
        &self.phones
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.phones[0].prototype.len()
    }

    pub fn phone(&self, id: usize) -> Option<&Phone> {
        id.checked_sub(1).and_then(|i| self.phones.get(i))
    }

    pub fn by_symbol(&self, c: char) -> Option<&Phone> {
        self.phones.iter().find(|p| p.symbol == c)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let protos: Vec<Vec<f64>> = self.phones.iter().map(|p| p.prototype.clone()).collect();
        min_pairwise_distance(&protos)
    }

    /// Id of the prototype nearest to `frame` (ties to the lower id).
    pub fn nearest(&self, frame: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for p in &self.phones {
            let d: f64 = p.prototype.iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, p.id);
            }
        }
        best.1
    }
}

fn min_pairwise_distance(protos: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d: f64 = protos[i]
                .iter()
                .zip(&protos[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Word spelling → phone ids. A word is spelled with its phones' symbols.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    pub fn new(
        entries: BTreeMap<String, Vec<usize>>,
        inventory: &PhoneInventory,
    ) -> Result<Self, CorpusError> {
        for (w, phones) in &entries {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(CorpusError::Lexicon(format!("bad word {w:?}")));
            }
            if phones.is_empty() {
                return Err(CorpusError::Lexicon(format!("word {w} has no phones")));
            }
            if let Some(p) = phones.iter().find(|&&p| inventory.phone(p).is_none()) {
                return Err(CorpusError::Lexicon(format!("word {w} uses unknown phone {p}")));
            }
        }
        Ok(Self { entries })
    }

    /// `n_words` distinct words of `min_len..=max_len` phones each.
    pub fn generate(
        inventory: &PhoneInventory,
        n_words: usize,
        min_len: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        if min_len == 0 || min_len > max_len {
            return Err(CorpusError::Lexicon(format!("bad word length {min_len}..={max_len}")));
        }
        let capacity: f64 = (min_len..=max_len)
            .map(|l| (inventory.len() as f64).powi(l as i32))
            .sum();
        if (n_words as f64) > capacity {
            return Err(CorpusError::Lexicon(format!("cannot draw {n_words} distinct words")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        while entries.len() < n_words {
            let len = rng.gen_range(min_len..=max_len);
            let phones: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=inventory.len())).collect();
            let word: String = phones
                .iter()
                .map(|&p| inventory.phone(p).expect("drawn in range").symbol)
                .collect();
            entries.entry(word).or_insert(phones);
        }
        Self::new(entries, inventory)
    }

    pub fn get(&self, word: &str) -> Option<&[usize]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Frames `[start, end)` realize `phone`, which belongs to word `word`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub phone: usize,
    pub word: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × F` features.
    pub feats: Tensor,
    pub words: Vec<String>,
    pub align: Vec<Span>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.feats.rows()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn phones(&self) -> Vec<usize> {
        self.align.iter().map(|s| s.phone).collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        validate_alignment(&self.id, &self.align, self.frames())?;
        if let Some(last) = self.align.last() {
            if last.word >= self.words.len() {
                return Err(CorpusError::Alignment {
                    utt: self.id.clone(),
                    reason: format!("word index {} with {} words", last.word, self.words.len()),
                });
            }
        }
        Ok(())
    }
}

/// Coverage invariant: non-empty spans tile `[0, frames)` in order and word
/// indices never decrease.
pub fn validate_alignment(utt: &str, align: &[Span], frames: usize) -> Result<(), CorpusError> {
    let mut cursor = 0;
    for (i, s) in align.iter().enumerate() {
        if s.start < cursor {
            return Err(CorpusError::AlignmentOverlap {
                utt: utt.into(),
                span: i,
            });
        }
        if s.start > cursor {
            return Err(CorpusError::AlignmentGap {
                utt: utt.into(),
                span: i,
            });
        }
        if s.end <= s.start {
            return Err(CorpusError::Alignment {
                utt: utt.into(),
                reason: format!("span {i} is empty"),
            });
        }
        if i > 0 && s.word < align[i - 1].word {
            return Err(CorpusError::Alignment {
                utt: utt.into(),
                reason: format!("word index decreases at span {i}"),
            });
        }
        cursor = s.end;
    }
    if cursor != frames {
        return Err(CorpusError::FrameMismatch {
            utt: utt.into(),
            feats: frames,
            align: cursor,
        });
    }
    Ok(())
}

/// Draws `n_utts` utterances of `len_range` words each. Utterance `i` uses
/// its own seed derived from `(seed, i)`.
pub fn generate_corpus(
    inventory: &PhoneInventory,
    lexicon: &Lexicon,
    n_utts: usize,
    len_range: (usize, usize),
    noise: f64,
    seed: u64,
) -> Result<Vec<Utterance>, CorpusError> {
    if lexicon.is_empty() {
        return Err(CorpusError::EmptyLexicon);
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(CorpusError::BadLengthRange(lo, hi));
    }
    let words: Vec<&str> = lexicon.words().collect();
    Ok((0..n_utts)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let n = rng.gen_range(lo..=hi);
            let chosen: Vec<String> = (0..n)
                .map(|_| words.choose(&mut rng).expect("non-empty").to_string())
                .collect();
            synthesize(format!("utt{i:06}"), chosen, inventory, lexicon, noise, &mut rng)
        })
        .collect())
}

/// Realizes one word sequence: each phone is its prototype repeated for a
/// sampled duration, plus Gaussian noise.
pub fn synthesize(
    id: String,
    words: Vec<String>,
    inventory: &PhoneInventory,
    lexicon: &Lexicon,
    noise: f64,
    rng: &mut impl Rng,
) -> Utterance {
    let mut align = Vec::new();
    let mut t = 0;
    for (wi, w) in words.iter().enumerate() {
        for &p in lexicon.get(w).expect("word drawn from lexicon") {
            let (lo, hi) = inventory.phone(p).expect("validated").duration_range();
            let dur = rng.gen_range(lo..=hi);
            align.push(Span {
                phone: p,
                word: wi,
                start: t,
                end: t + dur,
            });
            t += dur;
        }
    }
    let f = inventory.dim();
    let mut data = Vec::with_capacity(t * f);
    for s in &align {
        let proto = &inventory.phone(s.phone).expect("validated").prototype;
        for _ in s.start..s.end {
            for &v in proto {
                let e: f64 = if noise > 0.0 {
                    noise * Distribution::<f64>::sample(&StandardNormal, rng)
                } else {
                    0.0
                };
                data.push(v + e);
            }
        }
    }
    Utterance {
        id,
        feats: Tensor::new(vec![t, f], data).expect("sized above"),
        words,
        align,
    }
}

/// Simulated phonetic reduction: a fraction of phones is shortened and
/// attenuated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionSpec {
    pub fraction: f64,
    pub shrink: f64,
    pub attenuation: f64,
    /// Std of Gaussian noise added to the frames of reduced phones.
    pub noise: f64,
}

impl Default for ReductionSpec {
    fn default() -> Self {
        Self {
            fraction: 0.3,
            shrink: 0.4,
            attenuation: 0.5,
            noise: 0.0,
        }
    }
}

impl ReductionSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(CorpusError::Reduction(format!("fraction {}", self.fraction)));
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(CorpusError::Reduction(format!("shrink {}", self.shrink)));
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(CorpusError::Reduction(format!("attenuation {}", self.attenuation)));
        }
        if !(self.noise >= 0.0) {
            return Err(CorpusError::Reduction(format!("noise {}", self.noise)));
        }
        Ok(())
    }

    pub fn shrunk_len(&self, len: usize) -> usize {
        ((len as f64 * self.shrink).round() as usize).clamp(1, len)
    }
}

/// Shortens each selected phone to `round(len · shrink)` frames by dropping
/// frames symmetrically from both edges (the extra one from the right), then
/// scales the kept frames by the attenuation factor. Labels are untouched.
pub fn apply_reduction(
    utt: &Utterance,
    spec: &ReductionSpec,
    seed: u64,
) -> Result<Utterance, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = utt.feats.cols();
    let mut data = Vec::with_capacity(utt.feats.len());
    let mut align = Vec::with_capacity(utt.align.len());
    let mut t = 0;
    for s in &utt.align {
        let selected = spec.fraction > 0.0 && rng.gen_bool(spec.fraction);
        let (keep_from, keep_to, gain) = if selected {
            let new_len = spec.shrunk_len(s.len());
            let left = (s.len() - new_len) / 2;
            (s.start + left, s.start + left + new_len, spec.attenuation)
        } else {
            (s.start, s.end, 1.0)
        };
        for r in keep_from..keep_to {
            for &v in utt.feats.row(r) {
                let e: f64 = if selected && spec.noise > 0.0 {
                    spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                data.push(if selected { v * gain + e } else { v });
            }
        }
        let len = keep_to - keep_from;
        align.push(Span {
            start: t,
            end: t + len,
            ..*s
        });
        t += len;
    }
    Ok(Utterance {
        id: utt.id.clone(),
        feats: Tensor::new(vec![t, f], data).expect("sized above"),
        words: utt.words.clone(),
        align,
    })
}

/// Everything a corpus directory holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub inventory: PhoneInventory,
    pub lexicon: Lexicon,
    pub utterances: Vec<Utterance>,
}

const FEAT_MAGIC: &[u8; 4] = b"PMFB";

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        write_corpus(&self.utterances, &self.inventory, &self.lexicon, dir)
    }

    pub fn read(dir: &Path) -> Result<Self, CorpusError> {
        read_corpus(dir)
    }
}

pub fn write_corpus(
    utts: &[Utterance],
    inventory: &PhoneInventory,
    lexicon: &Lexicon,
    dir: &Path,
) -> Result<(), CorpusError> {
    for sub in ["feats", "align"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut inv = String::new();
    for p in inventory.phones() {
        inv.push_str(&format!(
            "{}\t{}\t{}\t{}",
            p.id, p.symbol, p.mean_duration, p.duration_spread
        ));
        for v in &p.prototype {
            inv.push_str(&format!("\t{v}"));
        }
        inv.push('\n');
    }
    write_text(&dir.join("inventory.tsv"), &inv)?;

    let mut lex = String::new();
    for (w, phones) in lexicon.entries() {
        let ids: Vec<String> = phones.iter().map(usize::to_string).collect();
        lex.push_str(&format!("{w}\t{}\n", ids.join(" ")));
    }
    write_text(&dir.join("lexicon.tsv"), &lex)?;

    let mut meta = String::new();
    for u in utts {
        u.validate()?;
        if u.id.is_empty() || u.id.contains(['\t', '\n', '/']) {
            return Err(CorpusError::Alignment {
                utt: u.id.clone(),
                reason: "id must be a plain file name".into(),
            });
        }
        meta.push_str(&format!("{}\t{}\n", u.id, u.text()));
        write_feats(&dir.join("feats").join(format!("{}.fbin", u.id)), &u.feats)?;
        let mut al = String::new();
        for s in &u.align {
            al.push_str(&format!("{}\t{}\t{}\t{}\n", s.phone, s.word, s.start, s.end));
        }
        write_text(&dir.join("align").join(format!("{}.tsv", u.id)), &al)?;
    }
    write_text(&dir.join("meta.tsv"), &meta)
}

fn write_text(path: &Path, text: &str) -> Result<(), CorpusError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_feats(path: &Path, feats: &Tensor) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let (t, f) = (feats.rows() as u32, feats.cols() as u32);
    let mut write = || -> io::Result<()> {
        w.write_all(FEAT_MAGIC)?;
        w.write_all(&t.to_le_bytes())?;
        w.write_all(&f.to_le_bytes())?;
        for v in feats.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

pub fn read_feats(path: &Path) -> Result<Tensor, CorpusError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[..4] != FEAT_MAGIC {
        return Err(malformed(path, "missing PMFB header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != t * f * 8 {
        return Err(malformed(
            path,
            format!("expected {} data bytes for {t}x{f}, found {}", t * f * 8, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(malformed(path, "non-finite feature value"));
    }
    Tensor::new(vec![t, f], data).map_err(|e| malformed(path, e.to_string()))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T, CorpusError> {
    field
        .parse()
        .map_err(|_| malformed(path, format!("line {}: cannot parse {field:?}", line + 1)))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let path = dir.join("inventory.tsv");
    let mut phones = Vec::new();
    for (i, line) in read_lines(&path)?.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            return Err(malformed(&path, format!("line {}: too few columns", i + 1)));
        }
        let mut sym = cols[1].chars();
        let symbol = match (sym.next(), sym.next()) {
            (Some(c), None) => c,
            _ => return Err(malformed(&path, format!("line {}: bad symbol", i + 1))),
        };
        phones.push(Phone {
            id: parse_field(&path, i, cols[0])?,
            symbol,
            mean_duration: parse_field(&path, i, cols[2])?,
            duration_spread: parse_field(&path, i, cols[3])?,
            prototype: cols[4..]
                .iter()
                .map(|c| parse_field(&path, i, c))
                .collect::<Result<_, _>>()?,
        });
    }
    let inventory = PhoneInventory::new(phones)?;

    let path = dir.join("lexicon.tsv");
    let mut entries = BTreeMap::new();
    for (i, line) in read_lines(&path)?.iter().enumerate() {
        let (w, ids) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&path, format!("line {}: missing tab", i + 1)))?;
        let ids: Vec<usize> = ids
            .split(' ')
            .map(|c| parse_field(&path, i, c))
            .collect::<Result<_, _>>()?;
        if entries.insert(w.to_string(), ids).is_some() {
            return Err(malformed(&path, format!("duplicate word {w}")));
        }
    }
    let lexicon = Lexicon::new(entries, &inventory)?;

    let path = dir.join("meta.tsv");
    let mut utterances = Vec::new();
    for (i, line) in read_lines(&path)?.iter().enumerate() {
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&path, format!("line {}: missing tab", i + 1)))?;
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let feats = read_feats(&dir.join("feats").join(format!("{id}.fbin")))?;
        if feats.cols() != inventory.dim() {
            return Err(malformed(&path, format!("{id}: feature dim {}", feats.cols())));
        }
        let apath = dir.join("align").join(format!("{id}.tsv"));
        let mut align = Vec::new();
        for (j, l) in read_lines(&apath)?.iter().enumerate() {
            let c: Vec<&str> = l.split('\t').collect();
            if c.len() != 4 {
                return Err(malformed(&apath, format!("line {}: expected 4 columns", j + 1)));
            }
            align.push(Span {
                phone: parse_field(&apath, j, c[0])?,
                word: parse_field(&apath, j, c[1])?,
                start: parse_field(&apath, j, c[2])?,
                end: parse_field(&apath, j, c[3])?,
            });
        }
        let utt = Utterance {
            id: id.to_string(),
            feats,
            words,
            align,
        };
        utt.validate()?;
        check_labels(&utt, &lexicon)?;
        utterances.push(utt);
    }
    Ok(Corpus {
        inventory,
        lexicon,
        utterances,
    })
}

/// The alignment's phone sequence, grouped by word, must spell the
/// transcript through the lexicon.
fn check_labels(utt: &Utterance, lexicon: &Lexicon) -> Result<(), CorpusError> {
    let bad = |reason: String| CorpusError::Alignment {
        utt: utt.id.clone(),
        reason,
    };
    let mut k = 0;
    for (wi, w) in utt.words.iter().enumerate() {
        let phones = lexicon.get(w).ok_or_else(|| bad(format!("word {w} not in lexicon")))?;
        for &p in phones {
            match utt.align.get(k) {
                Some(s) if s.phone == p && s.word == wi => k += 1,
                _ => return Err(bad(format!("span {k} does not match word {wi} ({w})"))),
            }
        }
    }
    if k != utt.align.len() {
        return Err(bad(format!("{} spans beyond the transcript", utt.align.len() - k)));
    }
    Ok(())
}

//! Label-synchronous joint CTC/attention beam search and error-rate metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::ctc::{CtcError, CtcPrefixScorer, PrefixState};
use crate::kernel::Tensor;
use crate::model::{decoder_forward, encoder_forward, ModelError, ModelParams};
use crate::tokenizer::{BLANK, SOS_EOS};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("lambda {0} is outside [0, 1]")]
    BadLambda(f64),
    #[error("beam must be at least 1")]
    ZeroBeam,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Attention weight; `1 − lambda` goes to the CTC prefix score.
    pub lambda: f64,
    pub beam: usize,
    /// Defaults to `T' + 10` when unset.
    pub max_len: Option<usize>,
    /// When set, an eos expansion is kept only if its score is at least the
    /// best non-eos expansion of the same hypothesis minus this margin.
    pub eos_margin: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            beam: 10,
            max_len: None,
            eos_margin: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DecodeError::BadLambda(self.lambda));
        }
        if self.beam == 0 {
            return Err(DecodeError::ZeroBeam);
        }
        Ok(())
    }
}

/// A scored label sequence starting with sos. Component scores are `None`
/// when the corresponding scorer was bypassed (weight zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub attention: Option<f64>,
    pub ctc: Option<f64>,
    pub score: f64,
}

impl Hypothesis {
    pub fn is_final(&self) -> bool {
        self.tokens.len() > 1 && self.tokens.last() == Some(&SOS_EOS)
    }

    /// Output labels without sos and eos.
    pub fn labels(&self) -> &[usize] {
        let end = if self.is_final() {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }
}

fn combine(lambda: f64, attention: Option<f64>, ctc: Option<f64>) -> f64 {
    match (attention, ctc) {
        (Some(a), Some(c)) => lambda * a + (1.0 - lambda) * c,
        (Some(a), None) => a,
        (None, Some(c)) => c,
        (None, None) => 0.0,
    }
}

/// Descending score, then ascending token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Active {
    hyp: Hypothesis,
    state: Option<PrefixState>,
}

/// Next-token log-distribution for a prefix starting with sos.
type DecoderFn<'a> = dyn Fn(&[usize]) -> Result<Vec<f64>, DecodeError> + 'a;

fn search(
    decoder: Option<&DecoderFn<'_>>,
    ctc: Option<&CtcPrefixScorer<'_>>,
    vocab: usize,
    frames: usize,
    cfg: &SearchConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let max_len = cfg.max_len.unwrap_or(frames + 10).max(1);
    let mut active = vec![Active {
        hyp: Hypothesis {
            tokens: vec![SOS_EOS],
            attention: decoder.map(|_| 0.0),
            ctc: ctc.map(|_| 0.0),
            score: 0.0,
        },
        state: ctc.map(|s| s.initial_state()),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let last = step + 1 == max_len;
        let mut cands: Vec<Active> = Vec::new();
        for a in &active {
            let att = decoder.map(|d| d(&a.hyp.tokens)).transpose()?;
            let mut own: Vec<Active> = Vec::new();
            for tok in 1..vocab {
                if tok == BLANK || (last && tok != SOS_EOS) {
                    continue;
                }
                let attention = att
                    .as_ref()
                    .map(|row| a.hyp.attention.unwrap_or(0.0) + row[tok]);
                let (ctc_score, state) = match (ctc, &a.state) {
                    (Some(s), Some(st)) => {
                        let (sc, ns) = s.extend(st, tok)?;
                        (Some(sc), Some(ns))
                    }
                    _ => (None, None),
                };
                let mut tokens = a.hyp.tokens.clone();
                tokens.push(tok);
                own.push(Active {
                    hyp: Hypothesis {
                        tokens,
                        attention,
                        ctc: ctc_score,
                        score: combine(cfg.lambda, attention, ctc_score),
                    },
                    state,
                });
            }
            if let (Some(m), false) = (cfg.eos_margin, last) {
                let best_other = own
                    .iter()
                    .filter(|c| !c.hyp.is_final())
                    .map(|c| c.hyp.score)
                    .fold(f64::NEG_INFINITY, f64::max);
                own.retain(|c| !c.hyp.is_final() || c.hyp.score >= best_other - m);
            }
            cands.extend(own);
        }
        cands.sort_by(|x, y| rank(&x.hyp, &y.hyp));
        cands.truncate(cfg.beam);
        active.clear();
        for c in cands {
            if c.hyp.is_final() {
                finished.push(c.hyp);
            } else {
                active.push(c);
            }
        }
        if active.is_empty() {
            break;
        }
        // Extensions never raise a score, so nothing active can overtake.
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_open = active[0].hyp.score;
        if best_done >= best_open {
            break;
        }
    }
    finished.sort_by(rank);
    Ok(finished)
}

fn decoder_fn<'a>(params: &'a ModelParams, mem: &'a Tensor) -> impl Fn(&[usize]) -> Result<Vec<f64>, DecodeError> + 'a {
    move |prefix: &[usize]| {
        let out = decoder_forward(params, mem, prefix)?;
        Ok(out.row(out.rows() - 1).to_vec())
    }
}

/// Joint search over one utterance's word-piece lattice and encoder memory.
/// `lambda == 1` skips the CTC scorer and `lambda == 0` skips the decoder.
pub fn joint_beam_search(
    params: &ModelParams,
    mem: &Tensor,
    lattice: &Tensor,
    cfg: &SearchConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let dec = decoder_fn(params, mem);
    let scorer = CtcPrefixScorer::new(lattice, SOS_EOS)?;
    search(
        (cfg.lambda > 0.0).then_some(&dec as &DecoderFn<'_>),
        (cfg.lambda < 1.0).then_some(&scorer),
        params.config.v_wp,
        lattice.rows(),
        cfg,
    )
}

pub fn attention_beam_search(
    params: &ModelParams,
    mem: &Tensor,
    cfg: &SearchConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let dec = decoder_fn(params, mem);
    search(
        Some(&dec),
        None,
        params.config.v_wp,
        mem.rows(),
        &SearchConfig { lambda: 1.0, ..*cfg },
    )
}

/// Label-synchronous CTC prefix search with the same pruning and tie-break
/// as [`joint_beam_search`].
pub fn ctc_prefix_search(lattice: &Tensor, cfg: &SearchConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    let scorer = CtcPrefixScorer::new(lattice, SOS_EOS)?;
    search(
        None,
        Some(&scorer),
        lattice.cols(),
        lattice.rows(),
        &SearchConfig { lambda: 0.0, ..*cfg },
    )
}

/// Encodes `x` in eval mode and runs the joint search.
pub fn recognize(params: &ModelParams, x: &Tensor, cfg: &SearchConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    let enc = encoder_forward(params, x, false, 0)?;
    joint_beam_search(params, &enc.h_wplr, &enc.wp_logp, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// Errors over reference length; an empty reference gives 0 without
    /// errors and infinity otherwise.
    pub fn rate(&self) -> f64 {
        match (self.errors(), self.ref_len) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

impl std::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.sub += o.sub;
        self.ins += o.ins;
        self.del += o.del;
        self.ref_len += o.ref_len;
    }
}

/// Unit-cost Levenshtein alignment. Among minimum-cost alignments the
/// backtrace prefers match/substitution, then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = ErrorCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let miss = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + miss {
                c.sub += miss;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.del += 1;
            i -= 1;
        } else {
            c.ins += 1;
            j -= 1;
        }
    }
    c
}

/// Micro-averaged counts over a set of aligned reference/hypothesis pairs.
pub fn edit_distance_metrics<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<ErrorCounts, DecodeError> {
    if refs.len() != hyps.len() {
        return Err(DecodeError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut total = ErrorCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total += edit_distance(r, h);
    }
    Ok(total)
}

/// Word, word-piece and (when an intermediate phoneme head exists) phone
/// error counts of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub word: ErrorCounts,
    pub piece: ErrorCounts,
    pub phone: Option<ErrorCounts>,
}

impl Metrics {
    pub fn wer(&self) -> f64 {
        self.word.rate()
    }

    pub fn ter(&self) -> f64 {
        self.piece.rate()
    }

    pub fn per(&self) -> Option<f64> {
        self.phone.map(|c| c.rate())
    }
}

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub word_errors: usize,
    pub attention: Option<f64>,
    pub ctc: Option<f64>,
}

pub const DECODE_HEADER: &str = "utt\treference\thypothesis\tword_errors\tattention\tctc";

pub fn decode_tsv(rows: &[DecodeRow]) -> String {
    let score = |s: Option<f64>| s.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    let mut out = String::new();
    out.push_str(DECODE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            r.reference,
            r.hypothesis,
            r.word_errors,
            score(r.attention),
            score(r.ctc)
        );
    }
    out
}

pub fn write_decode_tsv(rows: &[DecodeRow], path: &Path) -> Result<(), DecodeError> {
    std::fs::write(path, decode_tsv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_is_zero() {
        let c = edit_distance(&words("a b c"), &words("a b c"));
        assert_eq!(c.errors(), 0);
        assert_eq!(c.rate(), 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let c = edit_distance(&words("a b c d"), &[]);
        assert_eq!((c.del, c.rate()), (4, 1.0));
    }

    #[test]
    fn sub_and_insertion() {
        let c = edit_distance(&words("a b c"), &words("a x c d"));
        assert_eq!((c.sub, c.ins, c.del), (1, 1, 0));
        assert!((c.rate() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let r = edit_distance_metrics(&[vec![1]], &[]);
        assert!(matches!(r, Err(DecodeError::LengthMismatch { refs: 1, hyps: 0 })));
    }

    #[test]
    fn bad_search_config() {
        let lat = Tensor::new(vec![2, 3], vec![(1.0f64 / 3.0).ln(); 6]).unwrap();
        let zero = SearchConfig { beam: 0, ..Default::default() };
        assert!(matches!(ctc_prefix_search(&lat, &zero), Err(DecodeError::ZeroBeam)));
        let heavy = SearchConfig { lambda: 1.5, ..Default::default() };
        assert!(matches!(heavy.validate(), Err(DecodeError::BadLambda(_))));
    }

    #[test]
    fn ctc_search_finds_the_dominant_labels() {
        // frames favour 3, blank, 4
        let p = |k: usize| -> Vec<f64> {
            (0..5).map(|j| if j == k { 0.9f64.ln() } else { 0.025f64.ln() }).collect()
        };
        let lat = Tensor::from_rows(&[p(3), p(0), p(4)]).unwrap();
        let hyps = ctc_prefix_search(&lat, &SearchConfig { beam: 3, ..Default::default() }).unwrap();
        assert_eq!(hyps[0].labels(), &[3, 4]);
        assert!(hyps[0].attention.is_none());
        assert_eq!(hyps[0].score, hyps[0].ctc.unwrap());
    }
}

//! Connectionist temporal classification: exact negative log-likelihood and
//! its gradient by forward–backward, an enumeration oracle, greedy decoding
//! and incremental prefix scoring for beam search.
//!
//! Lattices are `frames × vocab` tensors of log-probabilities; class 0 is
//! the blank for every head.

use thiserror::Error;

use crate::kernel::Tensor;

pub const BLANK: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("infeasible target: {labels} labels with {repeats} adjacent repeats need {needed} frames, lattice has {frames}")]
    Infeasible {
        labels: usize,
        repeats: usize,
        needed: usize,
        frames: usize,
    },
    #[error("label {label} outside [1, {vocab})")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error("lattice must be a non-empty frames × vocab matrix, got shape {0:?}")]
    BadLattice(Vec<usize>),
    #[error("lattice row {row} is not normalized (log-sum-exp {lse})")]
    Unnormalized { row: usize, lse: f64 },
    #[error("enumeration over {0} paths exceeds the 1e7 limit")]
    TooLarge(f64),
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn dims(lattice: &Tensor) -> Result<(usize, usize), CtcError> {
    match *lattice.shape() {
        [t, v] if t > 0 && v > 1 => Ok((t, v)),
        _ => Err(CtcError::BadLattice(lattice.shape().to_vec())),
    }
}

/// Number of adjacent equal label pairs; each forces an extra blank frame.
pub fn repeats(targets: &[usize]) -> usize {
    targets.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum number of frames a CTC alignment of `targets` needs.
pub fn min_frames(targets: &[usize]) -> usize {
    targets.len() + repeats(targets)
}

fn check_targets(targets: &[usize], vocab: usize) -> Result<(), CtcError> {
    match targets.iter().find(|&&l| l == BLANK || l >= vocab) {
        Some(&label) => Err(CtcError::LabelOutOfRange { label, vocab }),
        None => Ok(()),
    }
}

fn check_feasible(targets: &[usize], frames: usize) -> Result<(), CtcError> {
    let needed = min_frames(targets);
    if frames < needed {
        return Err(CtcError::Infeasible {
            labels: targets.len(),
            repeats: repeats(targets),
            needed,
            frames,
        });
    }
    Ok(())
}

/// A validated CTC instance: normalized lattice rows, in-range labels and a
/// feasible target length.
#[derive(Debug, Clone)]
pub struct CtcProblem {
    lattice: Tensor,
    targets: Vec<usize>,
}

impl CtcProblem {
    pub fn new(lattice: Tensor, targets: Vec<usize>) -> Result<Self, CtcError> {
        let (frames, vocab) = dims(&lattice)?;
        for row in 0..frames {
            let lse = log_sum(lattice.row(row));
            if lse.abs() > 1e-9 {
                return Err(CtcError::Unnormalized { row, lse });
            }
        }
        check_targets(&targets, vocab)?;
        check_feasible(&targets, frames)?;
        Ok(Self { lattice, targets })
    }

    pub fn lattice(&self) -> &Tensor {
        &self.lattice
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn loss(&self) -> (f64, Tensor) {
        ctc_loss(&self.lattice, &self.targets).expect("validated on construction")
    }

    pub fn brute_force(&self) -> Result<f64, CtcError> {
        ctc_brute_force(&self.lattice, &self.targets)
    }
}

/// Negative log-likelihood of `targets` and its gradient with respect to
/// every lattice entry.
///
/// Rows need not be normalized; the lattice entries are treated as free
/// log-scores, which is what the finite-difference checks perturb.
pub fn ctc_loss(lattice: &Tensor, targets: &[usize]) -> Result<(f64, Tensor), CtcError> {
    let (frames, vocab) = dims(lattice)?;
    check_targets(targets, vocab)?;
    check_feasible(targets, frames)?;

    // blank-augmented label sequence: −, l1, −, l2, …, lU, −
    let states: Vec<usize> = std::iter::once(BLANK)
        .chain(targets.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = states.len();
    let skip_ok = |s: usize| s >= 2 && states[s] != BLANK && states[s] != states[s - 2];
    let lp = |t: usize, s: usize| lattice.at(t, states[s]);

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }

    // beta[t][s]: log-probability of frames t+1.. given state s at frame t
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut acc = next[s] + lp(t + 1, s);
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2] + lp(t + 1, s + 2));
            }
            cur[s] = acc;
        }
    }

    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(CtcError::Infeasible {
            labels: targets.len(),
            repeats: repeats(targets),
            needed: min_frames(targets),
            frames,
        });
    }

    let mut grad = Tensor::zeros(&[frames, vocab]);
    for t in 0..frames {
        let row = grad.row_mut(t);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != ninf {
                row[states[s]] -= (ab - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Enumerates every frame-level path, keeps those that collapse to
/// `targets`, and returns the negative log of their total probability.
/// Infinite when no path collapses to the target.
pub fn ctc_brute_force(lattice: &Tensor, targets: &[usize]) -> Result<f64, CtcError> {
    let (frames, vocab) = dims(lattice)?;
    let count = (vocab as f64).powi(frames as i32);
    if count > 1e7 {
        return Err(CtcError::TooLarge(count));
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == targets {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| lattice.at(t, k))
                .sum::<f64>()
                .exp();
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == frames {
                return Ok(-total.ln());
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Merges repeated labels then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (lowest id wins ties), then [`collapse`].
pub fn ctc_greedy_decode(lattice: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.rows())
        .map(|t| {
            let row = lattice.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Forward variables of one label prefix, split by whether the prefix
/// ends in its last label (`nonblank`) or in a blank at each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    prefix: Vec<usize>,
    nonblank: Vec<f64>,
    blank: Vec<f64>,
    score: f64,
    finished: bool,
}

impl PrefixState {
    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    /// Log prefix probability; for a finished state, the log probability of
    /// exactly this label sequence.
    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

/// Incremental CTC prefix scorer over one lattice, as used by label-
/// synchronous joint CTC/attention decoding.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer<'a> {
    lattice: &'a Tensor,
    eos: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    /// `eos` is the end-of-sequence id; extending with it closes the prefix.
    pub fn new(lattice: &'a Tensor, eos: usize) -> Result<Self, CtcError> {
        dims(lattice)?;
        Ok(Self { lattice, eos })
    }

    pub fn frames(&self) -> usize {
        self.lattice.rows()
    }

    pub fn vocab(&self) -> usize {
        self.lattice.cols()
    }

    /// State of the empty prefix: every frame so far emitted blank.
    pub fn initial_state(&self) -> PrefixState {
        let frames = self.frames();
        let mut blank = vec![0.0; frames];
        let mut acc = 0.0;
        for (t, b) in blank.iter_mut().enumerate() {
            acc += self.lattice.at(t, BLANK);
            *b = acc;
        }
        PrefixState {
            prefix: Vec::new(),
            nonblank: vec![f64::NEG_INFINITY; frames],
            blank,
            score: 0.0,
            finished: false,
        }
    }

    /// Scores `state.prefix · token`. For `token == eos` the score is the
    /// probability of the prefix as a complete label sequence.
    pub fn extend(&self, state: &PrefixState, token: usize) -> Result<(f64, PrefixState), CtcError> {
        let vocab = self.vocab();
        if token == BLANK || token >= vocab || state.finished {
            return Err(CtcError::LabelOutOfRange {
                label: token,
                vocab,
            });
        }
        let frames = self.frames();
        let mut prefix = state.prefix.clone();
        prefix.push(token);
        if token == self.eos {
            let score = log_add(state.nonblank[frames - 1], state.blank[frames - 1]);
            return Ok((
                score,
                PrefixState {
                    prefix,
                    nonblank: state.nonblank.clone(),
                    blank: state.blank.clone(),
                    score,
                    finished: true,
                },
            ));
        }
        let ninf = f64::NEG_INFINITY;
        let lp = |t: usize, k: usize| self.lattice.at(t, k);
        let same_as_last = state.prefix.last() == Some(&token);
        let mut nonblank = vec![ninf; frames];
        let mut blank = vec![ninf; frames];
        if state.prefix.is_empty() {
            nonblank[0] = lp(0, token);
        }
        let mut score = nonblank[0];
        for t in 1..frames {
            let phi = if same_as_last {
                state.blank[t - 1]
            } else {
                log_add(state.blank[t - 1], state.nonblank[t - 1])
            };
            nonblank[t] = log_add(nonblank[t - 1], phi) + lp(t, token);
            blank[t] = log_add(blank[t - 1], nonblank[t - 1]) + lp(t, BLANK);
            score = log_add(score, phi + lp(t, token));
        }
        Ok((
            score,
            PrefixState {
                prefix,
                nonblank,
                blank,
                score,
                finished: false,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut impl Rng, frames: usize, vocab: usize) -> Tensor {
        let mut rows = Vec::new();
        for _ in 0..frames {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = log_sum(&logits);
            rows.push(logits.iter().map(|v| v - lse).collect());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    fn random_feasible_target(rng: &mut impl Rng, frames: usize, vocab: usize, max_len: usize) -> Vec<usize> {
        loop {
            let len = rng.gen_range(0..=max_len);
            let z: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
            if min_frames(&z) <= frames {
                return z;
            }
        }
    }

    #[test]
    fn uniform_two_frame_single_label() {
        let h = 0.5f64.ln();
        let lat = Tensor::from_rows(&[vec![h, h], vec![h, h]]).unwrap();
        let (nll, _) = ctc_loss(&lat, &[1]).unwrap();
        // three of the four paths collapse to "a"
        assert!((nll - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((nll - 0.287_682_072_451_780_9).abs() < 1e-9);
        assert!((ctc_brute_force(&lat, &[1]).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn certain_path_has_zero_loss() {
        let lat = Tensor::from_rows(&[vec![f64::NEG_INFINITY, 0.0]]).unwrap();
        let (nll, _) = ctc_loss(&lat, &[1]).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separator_frame() {
        let lat = Tensor::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()]]).unwrap();
        let err = ctc_loss(&lat, &[1, 1]).unwrap_err();
        assert_eq!(
            err,
            CtcError::Infeasible {
                labels: 2,
                repeats: 1,
                needed: 3,
                frames: 1
            }
        );
    }

    #[test]
    fn out_of_range_and_blank_labels_rejected() {
        let lat = Tensor::from_rows(&vec![vec![0.5f64.ln(), 0.5f64.ln()]; 3]).unwrap();
        assert!(matches!(ctc_loss(&lat, &[2]), Err(CtcError::LabelOutOfRange { .. })));
        assert!(matches!(ctc_loss(&lat, &[0]), Err(CtcError::LabelOutOfRange { .. })));
    }

    #[test]
    fn problem_rejects_unnormalized_rows() {
        let lat = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            CtcProblem::new(lat, vec![1]),
            Err(CtcError::Unnormalized { .. })
        ));
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(&mut rng, 5, 3);
        let all_blank: f64 = (0..5).map(|t| lat.at(t, BLANK)).sum();
        let (nll, _) = ctc_loss(&lat, &[]).unwrap();
        assert!((nll + all_blank).abs() < 1e-12);
        assert!((ctc_brute_force(&lat, &[]).unwrap() + all_blank).abs() < 1e-12);
    }

    #[test]
    fn deterministic_lattice_brute_force_is_path_product() {
        // one-hot rows (up to tiny mass elsewhere) spelling a, −, b
        let eps: f64 = 1e-12;
        let big = (1.0 - 2.0 * eps).ln();
        let small = eps.ln();
        let lat = Tensor::from_rows(&[
            vec![small, big, small],
            vec![big, small, small],
            vec![small, small, big],
        ])
        .unwrap();
        let nll = ctc_brute_force(&lat, &[1, 2]).unwrap();
        let (fb, _) = ctc_loss(&lat, &[1, 2]).unwrap();
        assert!((nll - fb).abs() < 1e-9);
        assert!((nll + 3.0 * big).abs() < 1e-9);
    }

    #[test]
    fn forward_backward_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let frames = rng.gen_range(1..=8);
            let vocab = rng.gen_range(2..=4);
            let lat = random_lattice(&mut rng, frames, vocab);
            let z = random_feasible_target(&mut rng, frames, vocab, 3);
            let (nll, _) = ctc_loss(&lat, &z).unwrap();
            let oracle = ctc_brute_force(&lat, &z).unwrap();
            assert!((nll - oracle).abs() < 1e-9, "z={z:?} {nll} vs {oracle}");
        }
    }

    #[test]
    fn lattice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..30 {
            let frames = rng.gen_range(2..=7);
            let vocab = rng.gen_range(2..=5);
            let lat = random_lattice(&mut rng, frames, vocab);
            let z = random_feasible_target(&mut rng, frames, vocab, 3);
            let (_, grad) = ctc_loss(&lat, &z).unwrap();
            for i in 0..lat.len() {
                let mut p = lat.clone();
                p.data_mut()[i] += h;
                let plus = ctc_loss(&p, &z).unwrap().0;
                p.data_mut()[i] -= 2.0 * h;
                let minus = ctc_loss(&p, &z).unwrap().0;
                let fd = (plus - minus) / (2.0 * h);
                let a = grad.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-6 || (a - fd).abs() < 1e-9, "entry {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn label_probabilities_are_subnormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let frames = rng.gen_range(1..=4);
            let vocab = 3;
            let lat = random_lattice(&mut rng, frames, vocab);
            let mut total = 0.0;
            // all label sequences over {1, 2} of length ≤ frames
            let mut seqs: Vec<Vec<usize>> = vec![vec![]];
            for len in 1..=frames {
                for code in 0..(1usize << len) {
                    seqs.push((0..len).map(|b| 1 + ((code >> b) & 1)).collect());
                }
            }
            for z in seqs {
                if let Ok((nll, _)) = ctc_loss(&lat, &z) {
                    total += (-nll).exp();
                }
            }
            assert!(total <= 1.0 + 1e-12, "total {total}");
            // all paths collapse to some sequence of length ≤ frames, so the
            // sum is exactly one here
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_collapses_repeats_and_blanks() {
        let one_hot = |k: usize| {
            let mut r = vec![-10.0; 3];
            r[k] = 0.0;
            r
        };
        let lat = Tensor::from_rows(&[one_hot(1), one_hot(1), one_hot(0), one_hot(2)]).unwrap();
        assert_eq!(ctc_greedy_decode(&lat), vec![1, 2]);
        let blanks = Tensor::from_rows(&[one_hot(0), one_hot(0)]).unwrap();
        assert!(ctc_greedy_decode(&blanks).is_empty());
    }

    #[test]
    fn greedy_matches_independent_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let frames = rng.gen_range(1..12);
            let lat = random_lattice(&mut rng, frames, 4);
            let argmax: Vec<usize> = (0..frames)
                .map(|t| {
                    let r = lat.row(t);
                    (0..4).fold(0, |b, k| if r[k] > r[b] { k } else { b })
                })
                .collect();
            // independent formulation: keep frame t if non-blank and differs from t-1
            let expected: Vec<usize> = (0..frames)
                .filter(|&t| argmax[t] != 0 && (t == 0 || argmax[t] != argmax[t - 1]))
                .map(|t| argmax[t])
                .collect();
            assert_eq!(ctc_greedy_decode(&lat), expected);
        }
    }

    #[test]
    fn prefix_score_of_full_sequence_equals_negative_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eos = 4;
        for _ in 0..200 {
            let frames = rng.gen_range(1..=9);
            let lat = random_lattice(&mut rng, frames, 5);
            let z = random_feasible_target(&mut rng, frames, 4, 4);
            let scorer = CtcPrefixScorer::new(&lat, eos).unwrap();
            let mut state = scorer.initial_state();
            for &k in &z {
                state = scorer.extend(&state, k).unwrap().1;
            }
            let (full, fin) = scorer.extend(&state, eos).unwrap();
            assert!(fin.is_finished());
            let (nll, _) = ctc_loss(&lat, &z).unwrap();
            assert!((full + nll).abs() < 1e-9, "{full} vs {}", -nll);
        }
    }

    #[test]
    fn empty_prefix_closes_to_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let lat = random_lattice(&mut rng, 6, 4);
        let scorer = CtcPrefixScorer::new(&lat, 3).unwrap();
        let init = scorer.initial_state();
        assert_eq!(init.score(), 0.0);
        let (s, _) = scorer.extend(&init, 3).unwrap();
        let all_blank: f64 = (0..6).map(|t| lat.at(t, BLANK)).sum();
        assert!((s - all_blank).abs() < 1e-12);
    }

    #[test]
    fn extending_never_increases_prefix_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let frames = rng.gen_range(1..=10);
            let lat = random_lattice(&mut rng, frames, 5);
            let scorer = CtcPrefixScorer::new(&lat, 4).unwrap();
            let mut state = scorer.initial_state();
            for _ in 0..4 {
                let k = rng.gen_range(1..5);
                let (s, next) = scorer.extend(&state, k).unwrap();
                assert!(s <= state.score() + 1e-12);
                if next.is_finished() {
                    break;
                }
                state = next;
            }
        }
    }

    #[test]
    fn prefix_extend_rejects_blank_and_out_of_range() {
        let lat = Tensor::from_rows(&[vec![0.5f64.ln(), 0.5f64.ln()]]).unwrap();
        let scorer = CtcPrefixScorer::new(&lat, 1).unwrap();
        let s = scorer.initial_state();
        assert!(scorer.extend(&s, 0).is_err());
        assert!(scorer.extend(&s, 2).is_err());
    }
}

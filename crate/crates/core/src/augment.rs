//! Training-time feature transforms: phone masking, SpecAugment-style band
//! zeroing and speed perturbation by linear resampling.

use rand::Rng;
use thiserror::Error;

use crate::corpus::Span;
use crate::kernel::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("alignment covers {align} frames but features have {feats}")]
    LengthMismatch { feats: usize, align: usize },
    #[error("mask ratio {0} is outside [0, 1]")]
    BadRatio(f64),
    #[error("{axis} mask width {width} exceeds dimension {dim}")]
    WidthTooLarge {
        axis: &'static str,
        width: usize,
        dim: usize,
    },
    #[error("speed factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("{frames} frames cannot hold {spans} phone spans")]
    TooShort { frames: usize, spans: usize },
}

fn check_alignment(x: &Tensor, ali: &[Span]) -> Result<(), AugmentError> {
    let mut cursor = 0;
    for s in ali {
        if s.start != cursor || s.end <= s.start {
            return Err(AugmentError::LengthMismatch {
                feats: x.rows(),
                align: cursor,
            });
        }
        cursor = s.end;
    }
    if cursor != x.rows() {
        return Err(AugmentError::LengthMismatch {
            feats: x.rows(),
            align: cursor,
        });
    }
    Ok(())
}

/// Phone masking with Bernoulli(`p`) selection per phone; returns the
/// masked features.
pub fn phone_mask(
    x: &Tensor,
    ali: &[Span],
    p: f64,
    rng: &mut impl Rng,
) -> Result<Tensor, AugmentError> {
    Ok(phone_mask_with_selection(x, ali, p, rng)?.0)
}

/// Same as [`phone_mask`], also returning which spans were selected.
pub fn phone_mask_with_selection(
    x: &Tensor,
    ali: &[Span],
    p: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<bool>), AugmentError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AugmentError::BadRatio(p));
    }
    check_alignment(x, ali)?;
    let selected: Vec<bool> = ali.iter().map(|_| rng.gen_bool(p)).collect();
    Ok((mask_selected(x, ali, &selected), selected))
}

/// Replaces every frame of each selected span by the per-dimension mean of
/// its word's frames in `x`.
pub fn mask_selected(x: &Tensor, ali: &[Span], selected: &[bool]) -> Tensor {
    let f = x.cols();
    let mut out = x.clone();
    let mut i = 0;
    while i < ali.len() {
        let mut j = i;
        while j < ali.len() && ali[j].word == ali[i].word {
            j += 1;
        }
        if selected[i..j].iter().any(|&s| s) {
            let (from, to) = (ali[i].start, ali[j - 1].end);
            let mut mean = vec![0.0; f];
            for t in from..to {
                for (m, v) in mean.iter_mut().zip(x.row(t)) {
                    *m += v;
                }
            }
            let n = (to - from) as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            for k in i..j {
                if selected[k] {
                    for t in ali[k].start..ali[k].end {
                        out.row_mut(t).copy_from_slice(&mean);
                    }
                }
            }
        }
        i = j;
    }
    out
}

/// Zeroed bands: `(start, width)` along time and along features.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bands {
    pub time: Vec<(usize, usize)>,
    pub feat: Vec<(usize, usize)>,
}

/// Widths are uniform in `[0, max_width]`, starts uniform over the
/// positions where the band fits.
pub fn sample_bands(
    frames: usize,
    dims: usize,
    n_time_masks: usize,
    max_time_width: usize,
    n_feat_masks: usize,
    max_feat_width: usize,
    rng: &mut impl Rng,
) -> Result<Bands, AugmentError> {
    if max_time_width > frames {
        return Err(AugmentError::WidthTooLarge {
            axis: "time",
            width: max_time_width,
            dim: frames,
        });
    }
    if max_feat_width > dims {
        return Err(AugmentError::WidthTooLarge {
            axis: "feature",
            width: max_feat_width,
            dim: dims,
        });
    }
    let mut band = |n: usize, max_w: usize, len: usize| -> Vec<(usize, usize)> {
        (0..n)
            .map(|_| {
                let w = rng.gen_range(0..=max_w);
                (rng.gen_range(0..=len - w), w)
            })
            .collect()
    };
    let time = band(n_time_masks, max_time_width, frames);
    let feat = band(n_feat_masks, max_feat_width, dims);
    Ok(Bands { time, feat })
}

pub fn apply_bands(x: &Tensor, bands: &Bands) -> Tensor {
    let mut out = x.clone();
    for &(s, w) in &bands.time {
        for t in s..s + w {
            out.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for &(s, w) in &bands.feat {
        for t in 0..out.rows() {
            out.row_mut(t)[s..s + w].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

pub fn spec_augment(
    x: &Tensor,
    n_time_masks: usize,
    max_time_width: usize,
    n_feat_masks: usize,
    max_feat_width: usize,
    rng: &mut impl Rng,
) -> Result<Tensor, AugmentError> {
    Ok(spec_augment_with_bands(
        x,
        n_time_masks,
        max_time_width,
        n_feat_masks,
        max_feat_width,
        rng,
    )?
    .0)
}

pub fn spec_augment_with_bands(
    x: &Tensor,
    n_time_masks: usize,
    max_time_width: usize,
    n_feat_masks: usize,
    max_feat_width: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Bands), AugmentError> {
    let bands = sample_bands(
        x.rows(),
        x.cols(),
        n_time_masks,
        max_time_width,
        n_feat_masks,
        max_feat_width,
        rng,
    )?;
    Ok((apply_bands(x, &bands), bands))
}

/// Resamples to `round(T / factor)` frames; output frame `t` is `x` linearly
/// interpolated at position `t · factor` (extrapolated from the last two
/// frames past the end). Span boundaries are rescaled by `1 / factor` and
/// repaired so every span keeps at least one frame.
pub fn speed_perturb(
    x: &Tensor,
    ali: &[Span],
    factor: f64,
) -> Result<(Tensor, Vec<Span>), AugmentError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AugmentError::BadFactor(factor));
    }
    check_alignment(x, ali)?;
    let (t, f) = (x.rows(), x.cols());
    let t_new = (t as f64 / factor).round() as usize;
    if t_new < ali.len() || t_new == 0 {
        return Err(AugmentError::TooShort {
            frames: t_new,
            spans: ali.len().max(1),
        });
    }
    if factor == 1.0 {
        return Ok((x.clone(), ali.to_vec()));
    }
    let mut data = Vec::with_capacity(t_new * f);
    for i in 0..t_new {
        let pos = i as f64 * factor;
        let lo = if t == 1 { 0 } else { (pos.floor() as usize).min(t - 2) };
        let frac = pos - lo as f64;
        if t == 1 {
            data.extend_from_slice(x.row(0));
        } else {
            for (a, b) in x.row(lo).iter().zip(x.row(lo + 1)) {
                data.push(a + frac * (b - a));
            }
        }
    }
    let n = ali.len();
    let mut starts: Vec<usize> = ali
        .iter()
        .map(|s| (s.start as f64 / factor).round() as usize)
        .collect();
    starts[0] = 0;
    for k in 1..n {
        starts[k] = starts[k].max(starts[k - 1] + 1).min(t_new - (n - k));
    }
    let spans = (0..n)
        .map(|k| Span {
            start: starts[k],
            end: if k + 1 < n { starts[k + 1] } else { t_new },
            ..ali[k]
        })
        .collect();
    Ok((Tensor::new(vec![t_new, f], data).expect("sized above"), spans))
}

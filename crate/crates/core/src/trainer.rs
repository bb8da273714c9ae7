//! Training loop, evaluation and the ablation grid.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{phone_mask, spec_augment, speed_perturb, AugmentError};
use crate::corpus::{
    apply_reduction, generate_corpus, CorpusError, Lexicon, PhoneInventory, ReductionSpec, Utterance,
};
use crate::ctc::ctc_greedy_decode;
use crate::decode::{
    edit_distance, joint_beam_search, DecodeError, DecodeRow, ErrorCounts, Metrics, SearchConfig,
};
use crate::kernel::rng::{derive_seed, label_hash};
use crate::kernel::Tensor;
use crate::model::{
    compute_loss, encoder_forward, Example, InterUnit, LossComponents, ModelConfig, ModelError, ModelParams,
};
use crate::tokenizer::{phonemize, train_bpe, TokenizerError, TokenizerModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            peak_lr: 1e-3,
            warmup: 800,
            clip: 5.0,
        }
    }
}

impl OptimConfig {
    /// Linear warmup to `peak_lr`, then inverse square-root decay.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub phone_mask: bool,
    pub mask_p: f64,
    pub spec_augment: bool,
    pub time_masks: usize,
    pub max_time_width: usize,
    pub feat_masks: usize,
    pub max_feat_width: usize,
    pub speed_perturb: bool,
    pub speed_factors: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            phone_mask: false,
            mask_p: 0.15,
            spec_augment: false,
            time_masks: 2,
            max_time_width: 5,
            feat_masks: 2,
            max_feat_width: 3,
            speed_perturb: false,
            speed_factors: vec![0.9, 1.0, 1.1],
        }
    }
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub phones: usize,
    pub margin: f64,
    pub dur_mean: f64,
    pub dur_spread: f64,
    pub words: usize,
    pub word_min: usize,
    pub word_max: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub utt_min: usize,
    pub utt_max: usize,
    pub noise: f64,
    pub vocab: usize,
    pub reduction: ReductionSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phones: 12,
            margin: 2.0,
            dur_mean: 5.5,
            dur_spread: 2.5,
            words: 40,
            word_min: 2,
            word_max: 4,
            n_train: 1000,
            n_test: 200,
            utt_min: 2,
            utt_max: 5,
            noise: 0.5,
            vocab: 64,
            reduction: ReductionSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub decode: SearchConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub valid_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            decode: SearchConfig::default(),
            data: DataConfig::default(),
            batch_size: 16,
            epochs: 30,
            seed: 0,
            valid_fraction: 0.05,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("bad value {v:?} for {key}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("bad value {v:?} for {key}")),
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| x.to_string())
}

impl TrainConfig {
    /// Flat `section.key = value` pairs in a fixed order; feeding them back
    /// through [`TrainConfig::set`] reproduces the config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .model
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let o = &self.optim;
        let a = &self.augment;
        let d = &self.data;
        let r = &d.reduction;
        let factors: Vec<String> = a.speed_factors.iter().map(|f| f.to_string()).collect();
        let rest = [
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.peak_lr", o.peak_lr.to_string()),
            ("optim.warmup", o.warmup.to_string()),
            ("optim.clip", o.clip.to_string()),
            ("augment.phone_mask", a.phone_mask.to_string()),
            ("augment.mask_p", a.mask_p.to_string()),
            ("augment.spec_augment", a.spec_augment.to_string()),
            ("augment.time_masks", a.time_masks.to_string()),
            ("augment.max_time_width", a.max_time_width.to_string()),
            ("augment.feat_masks", a.feat_masks.to_string()),
            ("augment.max_feat_width", a.max_feat_width.to_string()),
            ("augment.speed_perturb", a.speed_perturb.to_string()),
            ("augment.speed_factors", factors.join(",")),
            ("decode.lambda", self.decode.lambda.to_string()),
            ("decode.beam", self.decode.beam.to_string()),
            (
                "decode.max_len",
                self.decode.max_len.map_or_else(|| "auto".into(), |v| v.to_string()),
            ),
            ("decode.eos_margin", opt_f64(self.decode.eos_margin)),
            ("data.phones", d.phones.to_string()),
            ("data.margin", d.margin.to_string()),
            ("data.dur_mean", d.dur_mean.to_string()),
            ("data.dur_spread", d.dur_spread.to_string()),
            ("data.words", d.words.to_string()),
            ("data.word_min", d.word_min.to_string()),
            ("data.word_max", d.word_max.to_string()),
            ("data.n_train", d.n_train.to_string()),
            ("data.n_test", d.n_test.to_string()),
            ("data.utt_min", d.utt_min.to_string()),
            ("data.utt_max", d.utt_max.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.vocab", d.vocab.to_string()),
            ("reduce.fraction", r.fraction.to_string()),
            ("reduce.shrink", r.shrink.to_string()),
            ("reduce.attenuation", r.attenuation.to_string()),
            ("reduce.noise", r.noise.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.valid_fraction", self.valid_fraction.to_string()),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), TrainError> {
        let v = v.trim();
        let r: Result<(), String> = (|| {
            if self.model.set(key, v)? {
                return Ok(());
            }
            let o = &mut self.optim;
            let a = &mut self.augment;
            let d = &mut self.data;
            match key {
                "optim.beta1" => o.beta1 = parse(key, v)?,
                "optim.beta2" => o.beta2 = parse(key, v)?,
                "optim.eps" => o.eps = parse(key, v)?,
                "optim.peak_lr" => o.peak_lr = parse(key, v)?,
                "optim.warmup" => o.warmup = parse(key, v)?,
                "optim.clip" => o.clip = parse(key, v)?,
                "augment.phone_mask" => a.phone_mask = parse_bool(key, v)?,
                "augment.mask_p" => a.mask_p = parse(key, v)?,
                "augment.spec_augment" => a.spec_augment = parse_bool(key, v)?,
                "augment.time_masks" => a.time_masks = parse(key, v)?,
                "augment.max_time_width" => a.max_time_width = parse(key, v)?,
                "augment.feat_masks" => a.feat_masks = parse(key, v)?,
                "augment.max_feat_width" => a.max_feat_width = parse(key, v)?,
                "augment.speed_perturb" => a.speed_perturb = parse_bool(key, v)?,
                "augment.speed_factors" => {
                    a.speed_factors = v
                        .split(',')
                        .map(|f| parse(key, f.trim()))
                        .collect::<Result<_, _>>()?
                }
                "decode.lambda" => self.decode.lambda = parse(key, v)?,
                "decode.beam" => self.decode.beam = parse(key, v)?,
                "decode.max_len" => {
                    self.decode.max_len = if v == "auto" { None } else { Some(parse(key, v)?) }
                }
                "decode.eos_margin" => {
                    self.decode.eos_margin = if v == "none" { None } else { Some(parse(key, v)?) }
                }
                "data.phones" => d.phones = parse(key, v)?,
                "data.margin" => d.margin = parse(key, v)?,
                "data.dur_mean" => d.dur_mean = parse(key, v)?,
                "data.dur_spread" => d.dur_spread = parse(key, v)?,
                "data.words" => d.words = parse(key, v)?,
                "data.word_min" => d.word_min = parse(key, v)?,
                "data.word_max" => d.word_max = parse(key, v)?,
                "data.n_train" => d.n_train = parse(key, v)?,
                "data.n_test" => d.n_test = parse(key, v)?,
                "data.utt_min" => d.utt_min = parse(key, v)?,
                "data.utt_max" => d.utt_max = parse(key, v)?,
                "data.noise" => d.noise = parse(key, v)?,
                "data.vocab" => d.vocab = parse(key, v)?,
                "reduce.fraction" => d.reduction.fraction = parse(key, v)?,
                "reduce.shrink" => d.reduction.shrink = parse(key, v)?,
                "reduce.attenuation" => d.reduction.attenuation = parse(key, v)?,
                "reduce.noise" => d.reduction.noise = parse(key, v)?,
                "train.batch_size" => self.batch_size = parse(key, v)?,
                "train.epochs" => self.epochs = parse(key, v)?,
                "train.seed" => self.seed = parse(key, v)?,
                "train.valid_fraction" => self.valid_fraction = parse(key, v)?,
                _ => return Err(format!("unknown key {key:?}")),
            }
            Ok(())
        })();
        r.map_err(TrainError::Config)
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.decode.validate()?;
        self.data.reduction.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.optim.warmup == 0 {
            return bad("optim.warmup must be at least 1");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("train.valid_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.augment.mask_p) {
            return bad("augment.mask_p must be in [0, 1]");
        }
        if self.augment.speed_factors.is_empty() || self.augment.speed_factors.iter().any(|f| !(*f > 0.0)) {
            return bad("augment.speed_factors must be positive");
        }
        if self.model.v_phone != self.data.phones + 1 {
            return bad("model.v_phone must be data.phones + 1");
        }
        if self.model.v_wp != self.data.vocab {
            return bad("model.v_wp must equal data.vocab");
        }
        Ok(())
    }
}

/// Generated corpora: training set plus clean and reduced renditions of the
/// same test transcripts.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub inventory: PhoneInventory,
    pub lexicon: Lexicon,
    pub train: Vec<Utterance>,
    pub test_clean: Vec<Utterance>,
    pub test_reduced: Vec<Utterance>,
}

pub const TRAIN_DIR: &str = "train";
pub const CLEAN_DIR: &str = "test_clean";
pub const REDUCED_DIR: &str = "test_reduced";

pub fn generate_datasets(cfg: &DataConfig, feat_dim: usize, seed: u64) -> Result<Datasets, TrainError> {
    let s = |tag: &str| derive_seed(seed, &[label_hash(tag)]);
    let inventory = PhoneInventory::generate(
        cfg.phones,
        feat_dim,
        cfg.margin,
        cfg.dur_mean,
        cfg.dur_spread,
        s("inventory"),
    )?;
    let lexicon = Lexicon::generate(&inventory, cfg.words, cfg.word_min, cfg.word_max, s("lexicon"))?;
    let range = (cfg.utt_min, cfg.utt_max);
    let train = generate_corpus(&inventory, &lexicon, cfg.n_train, range, cfg.noise, s("train"))?;
    let mut test_clean = generate_corpus(&inventory, &lexicon, cfg.n_test, range, cfg.noise, s("test"))?;
    for u in &mut test_clean {
        u.id = format!("test{}", &u.id[3..]);
    }
    let reduce_seed = s("reduce");
    let test_reduced = test_clean
        .par_iter()
        .enumerate()
        .map(|(i, u)| apply_reduction(u, &cfg.reduction, derive_seed(reduce_seed, &[i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Datasets {
        inventory,
        lexicon,
        train,
        test_clean,
        test_reduced,
    })
}

impl Datasets {
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        for (name, utts) in [
            (TRAIN_DIR, &self.train),
            (CLEAN_DIR, &self.test_clean),
            (REDUCED_DIR, &self.test_reduced),
        ] {
            crate::corpus::write_corpus(utts, &self.inventory, &self.lexicon, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, TrainError> {
        let train = crate::corpus::read_corpus(&dir.join(TRAIN_DIR))?;
        let clean = crate::corpus::read_corpus(&dir.join(CLEAN_DIR))?;
        let reduced = crate::corpus::read_corpus(&dir.join(REDUCED_DIR))?;
        Ok(Self {
            inventory: train.inventory,
            lexicon: train.lexicon,
            train: train.utterances,
            test_clean: clean.utterances,
            test_reduced: reduced.utterances,
        })
    }
}

pub fn train_tokenizer(utts: &[Utterance], vocab: usize) -> Result<TokenizerModel, TrainError> {
    let texts: Vec<String> = utts.iter().map(Utterance::text).collect();
    Ok(train_bpe(&texts, vocab)?)
}

/// One labeled utterance ready for training or scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub utt: Utterance,
    pub phones: Vec<usize>,
    pub pieces: Vec<usize>,
}

pub fn label(utts: &[Utterance], lexicon: &Lexicon, tok: &TokenizerModel) -> Result<Vec<Labeled>, TrainError> {
    utts.iter()
        .map(|u| {
            let text = u.text();
            Ok(Labeled {
                phones: phonemize(lexicon, &text)?,
                pieces: tok.encode(&text, true)?,
                utt: u.clone(),
            })
        })
        .collect()
}

/// Indices of the held-out validation utterances, fixed by `seed`.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label_hash("split")]));
    idx.shuffle(&mut rng);
    let k = if fraction > 0.0 && n > 1 {
        ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut valid = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    (train, valid)
}

/// Speed perturbation, phone masking and band masking, each when enabled.
pub fn augment_example(
    item: &Labeled,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Example, TrainError> {
    let (mut x, ali) = if cfg.speed_perturb {
        let f = *cfg.speed_factors.choose(rng).expect("validated non-empty");
        speed_perturb(&item.utt.feats, &item.utt.align, f)?
    } else {
        (item.utt.feats.clone(), item.utt.align.clone())
    };
    if cfg.phone_mask {
        x = phone_mask(&x, &ali, cfg.mask_p, rng)?;
    }
    if cfg.spec_augment {
        let tw = cfg.max_time_width.min(x.rows());
        let fw = cfg.max_feat_width.min(x.cols());
        x = spec_augment(&x, cfg.time_masks, tw, cfg.feat_masks, fw, rng)?;
    }
    Ok(Example {
        id: item.utt.id.clone(),
        feats: x,
        phones: item.phones.clone(),
        pieces: item.pieces.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64, o: &OptimConfig) {
        self.t += 1;
        let c1 = 1.0 - o.beta1.powi(self.t as i32);
        let c2 = 1.0 - o.beta2.powi(self.t as i32);
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("same keys");
            let v = self.v.get_mut(name).expect("same keys");
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = o.beta1 * *mi + (1.0 - o.beta1) * gi;
                *vi = o.beta2 * *vi + (1.0 - o.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + o.eps);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub kept: usize,
    pub loss: LossComponents,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Step-averaged batch losses.
    pub loss: LossComponents,
    pub mean_grad_norm: f64,
    pub valid_ter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub system: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub dropped: usize,
    pub best_epoch: usize,
    pub best_valid_ter: f64,
    pub tests: Vec<(String, Metrics)>,
}

pub const SCHEDULE_NOTE: &str =
    "schedule: Adam with linear warmup and inverse square-root decay (stand-in; not the original recipe)";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

impl RunReport {
    pub fn epochs_tsv(&self) -> String {
        let mut s = String::from("epoch\ttotal\twpctc\tpctc\tce\tmean_grad_norm\tvalid_ter\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                e.loss.total,
                e.loss.wpctc,
                fmt_opt(e.loss.pctc),
                e.loss.ce,
                e.mean_grad_norm,
                e.valid_ter
            );
        }
        s
    }

    pub fn steps_tsv(&self) -> String {
        let mut s = String::from("step\tepoch\tlr\tkept\ttotal\twpctc\tpctc\tce\tgrad_norm\n");
        for st in &self.steps {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                st.step,
                st.epoch,
                st.lr,
                st.kept,
                st.loss.total,
                st.loss.wpctc,
                fmt_opt(st.loss.pctc),
                st.loss.ce,
                st.grad_norm
            );
        }
        s
    }

    pub fn metrics_tsv(&self) -> String {
        let mut s = String::from(
            "set\twer\tter\tper\tword_sub\tword_ins\tword_del\twords\tpieces\tpiece_errors\n",
        );
        for (name, m) in &self.tests {
            let _ = writeln!(
                s,
                "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.wer(),
                m.ter(),
                fmt_opt(m.per()),
                m.word.sub,
                m.word.ins,
                m.word.del,
                m.word.ref_len,
                m.piece.ref_len,
                m.piece.errors()
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "system: {}", self.system);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "{SCHEDULE_NOTE}");
        let _ = writeln!(s, "steps: {}", self.steps.len());
        let _ = writeln!(s, "dropped utterances: {}", self.dropped);
        let _ = writeln!(
            s,
            "best epoch: {} (validation TER {:.4})",
            self.best_epoch, self.best_valid_ter
        );
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch {:>3}  loss {:.4}  wpctc {:.4}  pctc {}  ce {:.4}  |g| {:.3}  valid TER {:.4}",
                e.epoch,
                e.loss.total,
                e.loss.wpctc,
                e.loss.pctc.map_or_else(|| "-".into(), |p| format!("{p:.4}")),
                e.loss.ce,
                e.mean_grad_norm,
                e.valid_ter
            );
        }
        for (name, m) in &self.tests {
            let _ = writeln!(
                s,
                "{name}: WER {:.4}  TER {:.4}  PER {}  (S {} I {} D {} / {} words)",
                m.wer(),
                m.ter(),
                m.per().map_or_else(|| "-".into(), |p| format!("{p:.4}")),
                m.word.sub,
                m.word.ins,
                m.word.del,
                m.word.ref_len
            );
        }
        s.push_str("config:\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "  {k}={v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.to_text())?;
        fs::write(dir.join("epochs.tsv"), self.epochs_tsv())?;
        fs::write(dir.join("steps.tsv"), self.steps_tsv())?;
        fs::write(dir.join("metrics.tsv"), self.metrics_tsv())?;
        Ok(())
    }
}

/// Mean word-piece edit rate of greedy CTC output in eval mode.
pub fn greedy_ter(params: &ModelParams, items: &[&Labeled]) -> Result<f64, TrainError> {
    let counts = items
        .par_iter()
        .map(|it| {
            let out = encoder_forward(params, &it.utt.feats, false, 0)?;
            Ok(edit_distance(&it.pieces, &ctc_greedy_decode(&out.wp_logp)))
        })
        .collect::<Result<Vec<ErrorCounts>, TrainError>>()?;
    let mut total = ErrorCounts::default();
    counts.into_iter().for_each(|c| total += c);
    Ok(total.rate())
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: RunReport,
}

/// Trains from `seed`-initialized parameters and returns the parameters of
/// the epoch with the lowest validation TER (earliest on ties).
pub fn train(cfg: &TrainConfig, data: &[Labeled], system: &str) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty("training set"));
    }
    let seed = cfg.seed;
    let mut params = ModelParams::init(&cfg.model, derive_seed(seed, &[label_hash("init")]))?;
    let (train_idx, valid_idx) = validation_split(data.len(), cfg.valid_fraction, seed);
    let valid: Vec<&Labeled> = if valid_idx.is_empty() {
        train_idx.iter().map(|&i| &data[i]).collect()
    } else {
        valid_idx.iter().map(|&i| &data[i]).collect()
    };
    let mut adam = Adam::new(&params);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut dropped = 0;
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[label_hash("shuffle"), epoch as u64],
        )));
        let first = steps.len();
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        seed,
                        &[label_hash("augment"), step as u64, k as u64],
                    ));
                    augment_example(&data[i], &cfg.augment, &mut rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let bl = compute_loss(&params, &batch, true, derive_seed(seed, &[label_hash("dropout"), step as u64]))?;
            dropped += bl.dropped.len();
            if bl.kept == 0 {
                continue;
            }
            let mut grads = bl.grads;
            let norm = global_norm(&grads);
            if !bl.loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    what: format!("loss {} gradient norm {norm}", bl.loss),
                });
            }
            if cfg.optim.clip > 0.0 && norm > cfg.optim.clip {
                let c = cfg.optim.clip / norm;
                grads.values_mut().for_each(|g| g.scale_in_place(c));
            }
            let lr = cfg.optim.lr(step);
            adam.step(&mut params, &grads, lr, &cfg.optim);
            steps.push(StepLog {
                step,
                epoch,
                lr,
                kept: bl.kept,
                loss: bl.components,
                grad_norm: norm,
            });
        }
        let ep = &steps[first..];
        let n = ep.len().max(1) as f64;
        let mean = |f: &dyn Fn(&StepLog) -> f64| ep.iter().map(f).sum::<f64>() / n;
        let loss = LossComponents {
            wpctc: mean(&|s| s.loss.wpctc),
            pctc: cfg
                .model
                .has_inter_head()
                .then(|| mean(&|s| s.loss.pctc.unwrap_or(0.0))),
            ce: mean(&|s| s.loss.ce),
            total: mean(&|s| s.loss.total),
        };
        let valid_ter = greedy_ter(&params, &valid)?;
        log::info!(
            "{system} seed {seed} epoch {epoch}: loss {:.4} valid TER {valid_ter:.4}",
            loss.total
        );
        epochs.push(EpochLog {
            epoch,
            loss,
            mean_grad_norm: mean(&|s| s.grad_norm),
            valid_ter,
        });
        if best.as_ref().map_or(true, |(b, _, _)| valid_ter < *b) {
            best = Some((valid_ter, epoch, params.clone()));
        }
    }
    let (best_valid_ter, best_epoch, params) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        params,
        report: RunReport {
            system: system.to_string(),
            seed,
            config: cfg.to_pairs(),
            epochs,
            steps,
            dropped,
            best_epoch,
            best_valid_ter,
            tests: Vec::new(),
        },
    })
}

/// Joint-decodes every utterance and scores words, word-pieces and, when
/// the intermediate head predicts phones, greedy phone output.
pub fn evaluate(
    params: &ModelParams,
    items: &[Labeled],
    tok: &TokenizerModel,
    search: &SearchConfig,
) -> Result<(Metrics, Vec<DecodeRow>), TrainError> {
    if items.is_empty() {
        return Err(TrainError::Empty("evaluation set"));
    }
    if tok.vocab_size() != params.config.v_wp {
        return Err(TrainError::Config(format!(
            "tokenizer has {} pieces but the model expects {}",
            tok.vocab_size(),
            params.config.v_wp
        )));
    }
    let phone_head = params.config.has_inter_head() && params.config.inter_unit == InterUnit::Phoneme;
    let per_utt = items
        .par_iter()
        .map(|it| {
            let out = encoder_forward(params, &it.utt.feats, false, 0)?;
            let hyps = joint_beam_search(params, &out.h_wplr, &out.wp_logp, search)?;
            let best = hyps.first();
            let pieces: Vec<usize> = best.map(|h| h.labels().to_vec()).unwrap_or_default();
            let text = tok.decode(&pieces)?;
            let ref_words: Vec<&str> = it.utt.words.iter().map(String::as_str).collect();
            let hyp_words: Vec<&str> = text.split_whitespace().collect();
            let word = edit_distance(&ref_words, &hyp_words);
            let piece = edit_distance(&it.pieces, &pieces);
            let phone = match (&out.inter_logp, phone_head) {
                (Some(lat), true) => Some(edit_distance(&it.phones, &ctc_greedy_decode(lat))),
                _ => None,
            };
            let row = DecodeRow {
                id: it.utt.id.clone(),
                reference: it.utt.text(),
                hypothesis: text,
                word_errors: word.errors(),
                attention: best.and_then(|h| h.attention),
                ctc: best.and_then(|h| h.ctc),
            };
            Ok((word, piece, phone, row))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut m = Metrics {
        phone: phone_head.then(ErrorCounts::default),
        ..Default::default()
    };
    let mut rows = Vec::with_capacity(per_utt.len());
    for (w, p, ph, row) in per_utt {
        m.word += w;
        m.piece += p;
        if let (Some(acc), Some(c)) = (m.phone.as_mut(), ph) {
            *acc += c;
        }
        rows.push(row);
    }
    Ok((m, rows))
}

/// The compared training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum System {
    Baseline,
    Pmt,
    Mmut,
    PmMmut,
    PmMmutWp,
    InterCtc,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Baseline,
        System::Pmt,
        System::Mmut,
        System::PmMmut,
        System::PmMmutWp,
        System::InterCtc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::Pmt => "pmt",
            System::Mmut => "mmut",
            System::PmMmut => "pm-mmut",
            System::PmMmutWp => "pm-mmut-wp",
            System::InterCtc => "inter-ctc",
        }
    }

    /// Whether the intermediate weight and split point matter.
    pub fn uses_intermediate(self) -> bool {
        !matches!(self, System::Baseline | System::Pmt)
    }

    /// Rewrites the recipe-defining fields of `cfg`. Inter-CTC places a
    /// word-piece head at the middle block and ignores `n_a2p`.
    pub fn configure(self, cfg: &mut TrainConfig, alpha: f64, n_a2p: usize) {
        let mask = matches!(self, System::Pmt | System::PmMmut | System::PmMmutWp | System::InterCtc);
        cfg.augment.phone_mask = mask;
        let m = &mut cfg.model;
        match self {
            System::Baseline | System::Pmt => m.alpha = 0.0,
            System::Mmut | System::PmMmut => {
                m.alpha = alpha;
                m.n_a2p = n_a2p;
                m.inter_unit = InterUnit::Phoneme;
            }
            System::PmMmutWp => {
                m.alpha = alpha;
                m.n_a2p = n_a2p;
                m.inter_unit = InterUnit::WordPiece;
            }
            System::InterCtc => {
                m.alpha = alpha;
                m.n_a2p = (m.n_total / 2).max(1);
                m.inter_unit = InterUnit::WordPiece;
            }
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| format!("unknown system {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub systems: Vec<System>,
    pub alphas: Vec<f64>,
    pub n_a2p: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// One grid point; systems without an intermediate head carry `alpha = 0`
/// and the base config's split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub system: System,
    pub alpha: f64,
    pub n_a2p: usize,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.system.uses_intermediate() {
            format!("{}(a={},n={})", self.system, self.alpha, self.n_a2p)
        } else {
            self.system.to_string()
        }
    }
}

impl Grid {
    pub fn cells(&self, base: &TrainConfig) -> Vec<Cell> {
        let mut out = Vec::new();
        for &system in &self.systems {
            let variants: Vec<(f64, usize)> = if system.uses_intermediate() {
                let splits: Vec<usize> = if system == System::InterCtc {
                    vec![(base.model.n_total / 2).max(1)]
                } else {
                    self.n_a2p.clone()
                };
                self.alphas
                    .iter()
                    .flat_map(|&a| splits.iter().map(move |&n| (a, n)))
                    .collect()
            } else {
                vec![(0.0, base.model.n_a2p)]
            };
            for (alpha, n_a2p) in variants {
                for &seed in &self.seeds {
                    out.push(Cell {
                        system,
                        alpha,
                        n_a2p,
                        seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: Result<RunReport, String>,
}

impl CellResult {
    pub fn metric(&self, set: &str) -> Option<Metrics> {
        let r = self.outcome.as_ref().ok()?;
        r.tests.iter().find(|(n, _)| n == set).map(|(_, m)| *m)
    }
}

/// Trains and evaluates one configuration on the clean and reduced sets.
pub fn run_cell(
    base: &TrainConfig,
    cell: &Cell,
    train_items: &[Labeled],
    clean: &[Labeled],
    reduced: &[Labeled],
    tok: &TokenizerModel,
) -> Result<(TrainOutcome, Vec<DecodeRow>, Vec<DecodeRow>), TrainError> {
    let mut cfg = base.clone();
    cell.system.configure(&mut cfg, cell.alpha, cell.n_a2p);
    cfg.seed = cell.seed;
    let mut out = train(&cfg, train_items, &cell.label())?;
    let (mc, rows_c) = evaluate(&out.params, clean, tok, &cfg.decode)?;
    let (mr, rows_r) = evaluate(&out.params, reduced, tok, &cfg.decode)?;
    out.report.tests = vec![("clean".into(), mc), ("reduced".into(), mr)];
    Ok((out, rows_c, rows_r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub results: Vec<CellResult>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl AblationTable {
    /// Configuration labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.results {
            let l = r.cell.label();
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    pub fn wer_by_seed(&self, label: &str, set: &str) -> BTreeMap<u64, f64> {
        self.results
            .iter()
            .filter(|r| r.cell.label() == label)
            .filter_map(|r| Some((r.cell.seed, r.metric(set)?.wer())))
            .collect()
    }

    pub fn median_wer(&self, label: &str, set: &str) -> Option<f64> {
        median(self.wer_by_seed(label, set).into_values().collect())
    }

    /// Seeds (shared by both) on which `a` has strictly lower WER than `b`,
    /// and the number of shared seeds.
    pub fn wins(&self, a: &str, b: &str, set: &str) -> (usize, usize) {
        let wa = self.wer_by_seed(a, set);
        let wb = self.wer_by_seed(b, set);
        let shared: Vec<u64> = wa.keys().filter(|s| wb.contains_key(s)).copied().collect();
        let won = shared.iter().filter(|s| wa[s] < wb[s]).count();
        (won, shared.len())
    }

    pub fn cells_tsv(&self) -> String {
        let mut s = String::from("system\talpha\tn_a2p\tseed\tclean_wer\treduced_wer\tclean_ter\treduced_ter\tstatus\n");
        for r in &self.results {
            let c = r.metric("clean");
            let d = r.metric("reduced");
            let f = |m: Option<Metrics>, ter: bool| {
                m.map_or_else(|| "-".into(), |m| if ter { m.ter() } else { m.wer() }.to_string())
            };
            let status = match &r.outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("error: {e}"),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.cell.system,
                r.cell.alpha,
                r.cell.n_a2p,
                r.cell.seed,
                f(c, false),
                f(d, false),
                f(c, true),
                f(d, true),
                status
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let labels = self.labels();
        let mut s = String::from("configuration\tmedian_clean_wer\tmedian_reduced_wer\truns\n");
        for l in &labels {
            let m = |set| self.median_wer(l, set).map_or_else(|| "-".into(), |v: f64| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{l}\t{}\t{}\t{}",
                m("clean"),
                m("reduced"),
                self.wer_by_seed(l, "reduced").len()
            );
        }
        s.push_str("\nwins on reduced (row beats column / shared seeds)\n");
        for a in &labels {
            for b in &labels {
                if a != b {
                    let (w, n) = self.wins(a, b, "reduced");
                    let _ = writeln!(s, "{a}\t{b}\t{w}/{n}");
                }
            }
        }
        s
    }
}

/// Runs every grid cell (in parallel); a failing cell is recorded and the
/// rest continue.
pub fn ablate(
    base: &TrainConfig,
    grid: &Grid,
    train_items: &[Labeled],
    clean: &[Labeled],
    reduced: &[Labeled],
    tok: &TokenizerModel,
) -> AblationTable {
    let cells = grid.cells(base);
    let results = cells
        .par_iter()
        .map(|cell| {
            let outcome = run_cell(base, cell, train_items, clean, reduced, tok)
                .map(|(o, _, _)| o.report)
                .map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("cell {} seed {} failed: {e}", cell.label(), cell.seed);
            }
            CellResult { cell: *cell, outcome }
        })
        .collect();
    AblationTable { results }
}

pub fn write_text(path: &PathBuf, text: &str) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let o = OptimConfig::default();
        assert!((o.lr(800) - 1e-3).abs() < 1e-18);
        assert!((o.lr(400) - 5e-4).abs() < 1e-18);
        assert!((o.lr(3200) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn config_text_round_trip_and_unknown_key() {
        let mut c = TrainConfig::default();
        c.set("loss.alpha", "0.7").unwrap();
        c.set("decode.eos_margin", "2.5").unwrap();
        c.set("augment.speed_factors", "0.9, 1.1").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(c.set("model.nope", "1"), Err(TrainError::Config(_))));
        assert!(matches!(c.set("train.epochs", "x"), Err(TrainError::Config(_))));
        assert!(TrainConfig::from_text("train.epochs\n").is_err());
    }

    #[test]
    fn split_is_fixed_and_disjoint() {
        let (t, v) = validation_split(100, 0.05, 3);
        assert_eq!((t.len(), v.len()), (95, 5));
        assert_eq!(validation_split(100, 0.05, 3), (t.clone(), v.clone()));
        assert!(v.iter().all(|i| !t.contains(i)));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }

    #[test]
    fn systems_parse_and_configure() {
        for s in System::ALL {
            assert_eq!(s.name().parse::<System>().unwrap(), s);
        }
        let mut c = TrainConfig::default();
        System::PmMmutWp.configure(&mut c, 0.5, 5);
        assert!(c.augment.phone_mask);
        assert_eq!((c.model.inter_unit, c.model.n_a2p), (InterUnit::WordPiece, 5));
        System::Baseline.configure(&mut c, 0.5, 5);
        assert!(!c.augment.phone_mask);
        assert_eq!(c.model.alpha, 0.0);
    }
}

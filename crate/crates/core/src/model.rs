//! The encoder–decoder network: a stack of conformer-lite blocks split into
//! an acoustic-to-phone part and a phone-to-word-piece part, CTC heads on
//! both representations, and an attention decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ctc::min_frames;
use crate::kernel::rng::{derive_seed, label_hash};
use crate::kernel::{grad_check_report, Bindings, GradCheckReport, Gradients, Graph, KernelError, NodeId, Tensor};
use crate::tokenizer::SOS_EOS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{frames} input frames leave no output frames at subsampling {subsample}")]
    TooShort { frames: usize, subsample: usize },
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("{unit} CTC target of length {labels} needs {needed} frames, have {frames}")]
    Infeasible {
        unit: &'static str,
        labels: usize,
        needed: usize,
        frames: usize,
    },
    #[error("checkpoint config mismatch on {key}: expected {expected}, found {found}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which targets the intermediate CTC head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterUnit {
    Phoneme,
    WordPiece,
}

impl fmt::Display for InterUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InterUnit::Phoneme => "phoneme",
            InterUnit::WordPiece => "word-piece",
        })
    }
}

impl std::str::FromStr for InterUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phoneme" => Ok(InterUnit::Phoneme),
            "word-piece" => Ok(InterUnit::WordPiece),
            _ => Err(format!("expected phoneme or word-piece, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub n_total: usize,
    pub n_a2p: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub conv_kernel: usize,
    pub subsample: usize,
    /// Phone classes including the blank.
    pub v_phone: usize,
    /// Word-piece classes including blank, unk and sos/eos.
    pub v_wp: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub smoothing: f64,
    pub alpha: f64,
    pub beta: f64,
    pub inter_unit: InterUnit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            n_total: 6,
            n_a2p: 5,
            d_model: 64,
            heads: 4,
            ffn: 128,
            conv_kernel: 7,
            subsample: 4,
            v_phone: 13,
            v_wp: 64,
            dec_layers: 2,
            dropout: 0.1,
            smoothing: 0.1,
            alpha: 0.5,
            beta: 0.3,
            inter_unit: InterUnit::Phoneme,
        }
    }
}

impl ModelConfig {
    /// Small configuration for full-model gradient checks.
    pub fn tiny() -> Self {
        Self {
            feat_dim: 4,
            n_total: 4,
            n_a2p: 3,
            d_model: 16,
            heads: 2,
            ffn: 32,
            conv_kernel: 3,
            subsample: 4,
            v_phone: 8,
            v_wp: 12,
            dec_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.feat_dim == 0 || self.d_model == 0 || self.ffn == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.n_a2p == 0 || self.n_a2p > self.n_total {
            return bad(format!("n_a2p {} must be in 1..={}", self.n_a2p, self.n_total));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.subsample == 0 {
            return bad("subsample must be positive".into());
        }
        if self.v_phone < 2 || self.v_wp <= SOS_EOS {
            return bad(format!("vocabularies too small: {} / {}", self.v_phone, self.v_wp));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.smoothing) {
            return bad("dropout and smoothing must be in [0, 1)".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("alpha {} / beta {}", self.alpha, self.beta));
        }
        Ok(())
    }

    /// The intermediate head exists only when its loss carries weight.
    pub fn has_inter_head(&self) -> bool {
        self.alpha > 0.0
    }

    pub fn shares_representation(&self) -> bool {
        self.n_a2p == self.n_total
    }

    pub fn inter_vocab(&self) -> usize {
        match self.inter_unit {
            InterUnit::Phoneme => self.v_phone,
            InterUnit::WordPiece => self.v_wp,
        }
    }

    pub fn subsampled_len(&self, frames: usize) -> usize {
        frames / self.subsample
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.feat_dim", self.feat_dim.to_string()),
            ("model.n_total", self.n_total.to_string()),
            ("model.n_a2p", self.n_a2p.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.ffn", self.ffn.to_string()),
            ("model.conv_kernel", self.conv_kernel.to_string()),
            ("model.subsample", self.subsample.to_string()),
            ("model.v_phone", self.v_phone.to_string()),
            ("model.v_wp", self.v_wp.to_string()),
            ("model.dec_layers", self.dec_layers.to_string()),
            ("model.dropout", self.dropout.to_string()),
            ("model.inter_unit", self.inter_unit.to_string()),
            ("loss.smoothing", self.smoothing.to_string()),
            ("loss.alpha", self.alpha.to_string()),
            ("loss.beta", self.beta.to_string()),
        ]
    }

    /// Sets one `section.key` field; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {key}"))
        }
        match key {
            "model.feat_dim" => self.feat_dim = p(key, value)?,
            "model.n_total" => self.n_total = p(key, value)?,
            "model.n_a2p" => self.n_a2p = p(key, value)?,
            "model.d_model" => self.d_model = p(key, value)?,
            "model.heads" => self.heads = p(key, value)?,
            "model.ffn" => self.ffn = p(key, value)?,
            "model.conv_kernel" => self.conv_kernel = p(key, value)?,
            "model.subsample" => self.subsample = p(key, value)?,
            "model.v_phone" => self.v_phone = p(key, value)?,
            "model.v_wp" => self.v_wp = p(key, value)?,
            "model.dec_layers" => self.dec_layers = p(key, value)?,
            "model.dropout" => self.dropout = p(key, value)?,
            "model.inter_unit" => self.inter_unit = value.parse()?,
            "loss.smoothing" => self.smoothing = p(key, value)?,
            "loss.alpha" => self.alpha = p(key, value)?,
            "loss.beta" => self.beta = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every trainable tensor and its shape, determined by the config alone.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, f) = (self.d_model, self.ffn);
        let mut m = BTreeMap::new();
        let mut add = |name: String, shape: Vec<usize>| {
            m.insert(name, shape);
        };
        add("sub.w".into(), vec![self.subsample * self.feat_dim, d]);
        add("sub.b".into(), vec![d]);
        let attn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                add(format!("{p}.{w}"), vec![d, d]);
            }
            for b in ["bq", "bv", "bo"] {
                add(format!("{p}.{b}"), vec![d]);
            }
        };
        let norm = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            add(format!("{p}.g"), vec![d]);
            add(format!("{p}.b"), vec![d]);
        };
        let ffn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            add(format!("{p}.w1"), vec![d, f]);
            add(format!("{p}.b1"), vec![f]);
            add(format!("{p}.w2"), vec![f, d]);
            add(format!("{p}.b2"), vec![d]);
        };
        for i in 0..self.n_total {
            let p = format!("enc.{i}");
            norm(&mut add, &format!("{p}.ln1"));
            attn(&mut add, &format!("{p}.att"));
            norm(&mut add, &format!("{p}.ln2"));
            add(format!("{p}.conv.w"), vec![self.conv_kernel, d]);
            add(format!("{p}.conv.b"), vec![d]);
            ffn(&mut add, &format!("{p}.ff"));
        }
        norm(&mut add, "enc.ln");
        add("ctc_wp.w".into(), vec![d, self.v_wp]);
        add("ctc_wp.b".into(), vec![self.v_wp]);
        if self.has_inter_head() {
            add("ctc_inter.w".into(), vec![d, self.inter_vocab()]);
            add("ctc_inter.b".into(), vec![self.inter_vocab()]);
        }
        add("dec.emb".into(), vec![self.v_wp, d]);
        for j in 0..self.dec_layers {
            let p = format!("dec.{j}");
            norm(&mut add, &format!("{p}.ln1"));
            attn(&mut add, &format!("{p}.self"));
            norm(&mut add, &format!("{p}.ln2"));
            attn(&mut add, &format!("{p}.src"));
            norm(&mut add, &format!("{p}.ln3"));
            ffn(&mut add, &format!("{p}.ff"));
        }
        norm(&mut add, "dec.ln");
        add("dec.out.w".into(), vec![d, self.v_wp]);
        add("dec.out.b".into(), vec![self.v_wp]);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Each tensor draws from its own generator seeded by `(seed, name)`, so
    /// configurations that share a parameter name share its initial value.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label_hash(&name)]));
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn bindings(&self) -> Bindings<'_> {
        self.tensors.iter().collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let mut t = Tensor::zeros(shape);
    match leaf {
        "g" => t = Tensor::filled(shape, 1.0),
        "emb" => t.data_mut().iter_mut().for_each(|v| *v = StandardNormal.sample(rng)),
        _ if shape.len() == 2 => {
            // conv taps use the kernel width as fan-in; matrices are Glorot-uniform
            let a = if name.ends_with("conv.w") {
                (1.0 / shape[0] as f64).sqrt()
            } else {
                (6.0 / (shape[0] + shape[1]) as f64).sqrt()
            };
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        }
        _ => {}
    }
    t
}

/// Sinusoidal absolute positions, `T × d`.
pub fn positions(t: usize, d: usize) -> Tensor {
    let mut p = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        let row = p.row_mut(pos);
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    p
}

/// Adds model sub-graphs to a [`Graph`]. Dropout sites are seeded by
/// `(seed, site name)`.
pub struct Builder<'c> {
    pub graph: Graph,
    cfg: &'c ModelConfig,
    train: bool,
    seed: u64,
}

/// Node ids of the encoder's outputs within a [`Builder`]'s graph.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub h_plr: NodeId,
    pub h_wplr: NodeId,
    pub wp_logp: NodeId,
    pub inter_logp: Option<NodeId>,
    pub frames: usize,
}

impl<'c> Builder<'c> {
    pub fn new(cfg: &'c ModelConfig, train: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            cfg,
            train,
            seed,
        }
    }

    fn p(&mut self, name: &str) -> NodeId {
        self.graph.param(name)
    }

    fn dropout(&mut self, x: NodeId, site: &str) -> NodeId {
        if !self.train {
            return x;
        }
        let seed = derive_seed(self.seed, &[label_hash(site)]);
        self.graph.dropout(x, self.cfg.dropout, seed)
    }

    fn norm(&mut self, x: NodeId, p: &str) -> NodeId {
        let (g, b) = (self.p(&format!("{p}.g")), self.p(&format!("{p}.b")));
        self.graph.layer_norm(x, g, b)
    }

    fn lin(&mut self, x: NodeId, p: &str, w: &str, b: &str) -> NodeId {
        let (w, b) = (self.p(&format!("{p}.{w}")), self.p(&format!("{p}.{b}")));
        self.graph.linear(x, w, b)
    }

    /// Multi-head attention with projections; keys carry no bias since a
    /// shared key offset cannot change the softmax.
    fn attend(&mut self, x: NodeId, mem: NodeId, p: &str, causal: bool) -> NodeId {
        let q = self.lin(x, p, "wq", "bq");
        let wk = self.p(&format!("{p}.wk"));
        let k = self.graph.matmul(mem, wk);
        let v = self.lin(mem, p, "wv", "bv");
        let o = self.graph.attention(q, k, v, self.cfg.heads, causal);
        self.lin(o, p, "wo", "bo")
    }

    fn feed_forward(&mut self, x: NodeId, p: &str) -> NodeId {
        let h = self.lin(x, p, "w1", "b1");
        let h = self.graph.swish(h);
        self.lin(h, p, "w2", "b2")
    }

    fn encoder_block(&mut self, h: NodeId, i: usize) -> NodeId {
        let p = format!("enc.{i}");
        let a = self.norm(h, &format!("{p}.ln1"));
        let a = self.attend(a, a, &format!("{p}.att"), false);
        let a = self.dropout(a, &format!("{p}.att.drop"));
        let h = self.graph.add(h, a);
        let c = self.norm(h, &format!("{p}.ln2"));
        let (w, b) = (self.p(&format!("{p}.conv.w")), self.p(&format!("{p}.conv.b")));
        let c = self.graph.depthwise_conv1d(c, w, b);
        let c = self.feed_forward(c, &format!("{p}.ff"));
        let c = self.dropout(c, &format!("{p}.ff.drop"));
        self.graph.add(h, c)
    }

    /// `x` is the `T × F` input leaf. `with_plr` forces the intermediate
    /// representation to be built even without an intermediate head.
    pub fn encoder(&mut self, x: NodeId, frames: usize, with_plr: bool) -> Result<EncoderNodes, ModelError> {
        let cfg = self.cfg;
        let t = cfg.subsampled_len(frames);
        if t == 0 {
            return Err(ModelError::TooShort {
                frames,
                subsample: cfg.subsample,
            });
        }
        let s = self.graph.stack_frames(x, cfg.subsample);
        let h = self.lin(s, "sub", "w", "b");
        let pos = self.graph.constant(positions(t, cfg.d_model));
        let h = self.graph.add(h, pos);
        let mut h = self.dropout(h, "sub.drop");
        let mut plr = None;
        for i in 0..cfg.n_total {
            h = self.encoder_block(h, i);
            if i + 1 == cfg.n_a2p && (with_plr || cfg.has_inter_head() || cfg.shares_representation()) {
                plr = Some(self.norm(h, "enc.ln"));
            }
        }
        let h_wplr = match plr {
            Some(p) if cfg.shares_representation() => p,
            _ => self.norm(h, "enc.ln"),
        };
        let h_plr = plr.unwrap_or(h_wplr);
        let wp = self.lin(h_wplr, "ctc_wp", "w", "b");
        let wp_logp = self.graph.log_softmax(wp);
        let inter_logp = if cfg.has_inter_head() {
            let z = self.lin(h_plr, "ctc_inter", "w", "b");
            Some(self.graph.log_softmax(z))
        } else {
            None
        };
        Ok(EncoderNodes {
            h_plr,
            h_wplr,
            wp_logp,
            inter_logp,
            frames: t,
        })
    }

    /// Per-step log-distributions over the word-piece vocabulary for the
    /// input `prefix` (starting with sos), attending over `mem`.
    pub fn decoder(&mut self, mem: NodeId, prefix: &[usize]) -> Result<NodeId, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        let d = self.cfg.d_model;
        let emb = self.p("dec.emb");
        let e = self.graph.embedding(emb, prefix.to_vec());
        let pos = self.graph.constant(positions(prefix.len(), d));
        let e = self.graph.add(e, pos);
        let mut h = self.dropout(e, "dec.emb.drop");
        for j in 0..self.cfg.dec_layers {
            let p = format!("dec.{j}");
            let a = self.norm(h, &format!("{p}.ln1"));
            let a = self.attend(a, a, &format!("{p}.self"), true);
            let a = self.dropout(a, &format!("{p}.self.drop"));
            h = self.graph.add(h, a);
            let a = self.norm(h, &format!("{p}.ln2"));
            let a = self.attend(a, mem, &format!("{p}.src"), false);
            let a = self.dropout(a, &format!("{p}.src.drop"));
            h = self.graph.add(h, a);
            let a = self.norm(h, &format!("{p}.ln3"));
            let a = self.feed_forward(a, &format!("{p}.ff"));
            let a = self.dropout(a, &format!("{p}.ff.drop"));
            h = self.graph.add(h, a);
        }
        let h = self.norm(h, "dec.ln");
        let z = self.lin(h, "dec.out", "w", "b");
        Ok(self.graph.log_softmax(z))
    }
}

/// Encoder outputs for one utterance. When the two representations are the
/// same node, both fields hold the same allocation.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub h_plr: Arc<Tensor>,
    pub h_wplr: Arc<Tensor>,
    pub inter_logp: Option<Tensor>,
    pub wp_logp: Tensor,
}

pub fn encoder_forward(
    params: &ModelParams,
    x: &Tensor,
    train: bool,
    seed: u64,
) -> Result<ForwardOutput, ModelError> {
    let mut b = Builder::new(&params.config, train, seed);
    let xn = b.graph.input("x");
    let nodes = b.encoder(xn, x.rows(), true)?;
    let mut bind = params.bindings();
    bind.bind("x", x);
    let mut g = b.graph;
    g.evaluate(&bind)?;
    let h_plr = Arc::new(g.value(nodes.h_plr)?.clone());
    let h_wplr = if nodes.h_plr == nodes.h_wplr {
        Arc::clone(&h_plr)
    } else {
        Arc::new(g.value(nodes.h_wplr)?.clone())
    };
    Ok(ForwardOutput {
        h_plr,
        h_wplr,
        inter_logp: nodes.inter_logp.map(|n| g.value(n).cloned()).transpose()?,
        wp_logp: g.value(nodes.wp_logp)?.clone(),
    })
}

/// Evaluation-mode decoder: row `i` is the distribution of the token after
/// `prefix[..=i]`.
pub fn decoder_forward(
    params: &ModelParams,
    mem: &Tensor,
    prefix: &[usize],
) -> Result<Tensor, ModelError> {
    let mut b = Builder::new(&params.config, false, 0);
    let m = b.graph.input("mem");
    let out = b.decoder(m, prefix)?;
    let mut bind = params.bindings();
    bind.bind("mem", mem);
    let mut g = b.graph;
    g.evaluate(&bind)?;
    Ok(g.value(out)?.clone())
}

/// One training utterance: (augmented) features and both target sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub feats: Tensor,
    pub phones: Vec<usize>,
    pub pieces: Vec<usize>,
}

impl Example {
    pub fn inter_targets(&self, cfg: &ModelConfig) -> &[usize] {
        match cfg.inter_unit {
            InterUnit::Phoneme => &self.phones,
            InterUnit::WordPiece => &self.pieces,
        }
    }

    /// Fails when either CTC target cannot fit in the subsampled length.
    pub fn check_feasible(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let frames = cfg.subsampled_len(self.feats.rows());
        let check = |unit, t: &[usize]| {
            let needed = min_frames(t);
            if needed > frames || frames == 0 {
                return Err(ModelError::Infeasible {
                    unit,
                    labels: t.len(),
                    needed,
                    frames,
                });
            }
            Ok(())
        };
        check("word-piece", &self.pieces)?;
        if cfg.has_inter_head() {
            check("intermediate", self.inter_targets(cfg))?;
        }
        Ok(())
    }
}

/// Per-utterance loss terms (negative log-likelihoods).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub wpctc: f64,
    /// Absent when the configuration has no intermediate head.
    pub pctc: Option<f64>,
    pub ce: f64,
    pub total: f64,
}

impl LossComponents {
    /// `β·(wp + α·p) + (1 − β)·ce`.
    pub fn recombine(&self, alpha: f64, beta: f64) -> f64 {
        beta * (self.wpctc + alpha * self.pctc.unwrap_or(0.0)) + (1.0 - beta) * self.ce
    }
}

/// The loss graph of one example plus the nodes of its components.
pub struct LossGraph {
    pub graph: Graph,
    pub wpctc: NodeId,
    pub pctc: Option<NodeId>,
    pub ce: NodeId,
    pub total: NodeId,
    pub encoder: EncoderNodes,
}

impl LossGraph {
    pub fn components(&self) -> Result<LossComponents, ModelError> {
        let v = |n: NodeId| -> Result<f64, ModelError> { Ok(self.graph.value(n)?.item()?) };
        Ok(LossComponents {
            wpctc: v(self.wpctc)?,
            pctc: self.pctc.map(v).transpose()?,
            ce: v(self.ce)?,
            total: v(self.total)?,
        })
    }
}

/// Builds (without evaluating) the loss of one example. The input leaf is
/// named `x`.
pub fn loss_graph(
    cfg: &ModelConfig,
    ex: &Example,
    train: bool,
    seed: u64,
) -> Result<LossGraph, ModelError> {
    ex.check_feasible(cfg)?;
    let mut b = Builder::new(cfg, train, seed);
    let x = b.graph.input("x");
    let enc = b.encoder(x, ex.feats.rows(), false)?;
    let mut dec_in = vec![SOS_EOS];
    dec_in.extend_from_slice(&ex.pieces);
    let mut dec_out = ex.pieces.clone();
    dec_out.push(SOS_EOS);
    let dec = b.decoder(enc.h_wplr, &dec_in)?;
    let g = &mut b.graph;
    let wpctc = g.ctc_nll(enc.wp_logp, ex.pieces.clone());
    let ce = g.smoothed_ce(dec, dec_out, cfg.smoothing);
    let pctc = enc
        .inter_logp
        .map(|lp| g.ctc_nll(lp, ex.inter_targets(cfg).to_vec()));
    let mut terms = vec![(wpctc, cfg.beta)];
    if let Some(p) = pctc {
        terms.push((p, cfg.beta * cfg.alpha));
    }
    terms.push((ce, 1.0 - cfg.beta));
    let total = g.weighted_sum(&terms);
    g.set_loss(total);
    Ok(LossGraph {
        graph: b.graph,
        wpctc,
        pctc,
        ce,
        total,
        encoder: enc,
    })
}

/// Batch-mean loss, its components and gradients.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub components: LossComponents,
    pub per_example: Vec<LossComponents>,
    pub grads: Gradients,
    pub kept: usize,
    pub dropped: Vec<String>,
}

/// Example `k` uses dropout seed `(seed, k)`. Examples whose CTC targets do
/// not fit are dropped with a warning; the mean is over the kept ones.
pub fn compute_loss(
    params: &ModelParams,
    batch: &[Example],
    train: bool,
    seed: u64,
) -> Result<BatchLoss, ModelError> {
    let cfg = &params.config;
    let results: Vec<Result<Option<(LossComponents, Gradients)>, ModelError>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, ex)| {
            let mut lg = match loss_graph(cfg, ex, train, derive_seed(seed, &[k as u64])) {
                Ok(lg) => lg,
                Err(ModelError::Infeasible { unit, labels, needed, frames }) => {
                    log::warn!(
                        "dropping {}: {unit} target of {labels} labels needs {needed} frames, has {frames}",
                        ex.id
                    );
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let mut bind = params.bindings();
            bind.bind("x", &ex.feats);
            lg.graph.evaluate(&bind)?;
            let grads = lg.graph.backward()?;
            Ok(Some((lg.components()?, grads)))
        })
        .collect();
    let mut per_example = Vec::new();
    let mut dropped = Vec::new();
    let mut grads: Gradients = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
        .collect();
    for (ex, r) in batch.iter().zip(results) {
        match r? {
            Some((c, g)) => {
                for (name, t) in g {
                    if let Some(acc) = grads.get_mut(&name) {
                        acc.add_assign(&t);
                    }
                }
                per_example.push(c);
            }
            None => dropped.push(ex.id.clone()),
        }
    }
    let kept = per_example.len();
    let mut mean = LossComponents::default();
    if kept > 0 {
        let n = kept as f64;
        mean.wpctc = per_example.iter().map(|c| c.wpctc).sum::<f64>() / n;
        mean.ce = per_example.iter().map(|c| c.ce).sum::<f64>() / n;
        mean.total = per_example.iter().map(|c| c.total).sum::<f64>() / n;
        if cfg.has_inter_head() {
            mean.pctc = Some(per_example.iter().map(|c| c.pctc.unwrap_or(0.0)).sum::<f64>() / n);
        }
        grads.values_mut().for_each(|g| g.scale_in_place(1.0 / n));
    }
    Ok(BatchLoss {
        loss: mean.total,
        components: mean,
        per_example,
        grads,
        kept,
        dropped,
    })
}

const CKPT_MAGIC: &[u8; 4] = b"PMCK";
const CKPT_VERSION: u32 = 1;

pub fn params_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg: String = params
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, n: usize) -> Result<&'a str, ModelError> {
        std::str::from_utf8(self.take(n)?).map_err(|_| ModelError::Checkpoint("bad utf-8".into()))
    }
}

/// Parses a checkpoint; when `expected` is given its config must match the
/// stored one exactly.
pub fn params_from_bytes(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<ModelParams, ModelError> {
    if bytes.len() < 4 + 32 || &bytes[..4] != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("missing PMCK header".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored {
        return Err(ModelError::Checkpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u32()? as u32;
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()?;
    let mut config = ModelConfig::default();
    let mut seen = Vec::new();
    for line in c.text(n)?.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Checkpoint(format!("config line {line:?}")))?;
        match config.set(k, v) {
            Ok(true) => seen.push(k.to_string()),
            Ok(false) => return Err(ModelError::Checkpoint(format!("unknown config key {k}"))),
            Err(e) => return Err(ModelError::Checkpoint(e)),
        }
    }
    if seen.len() != config.to_pairs().len() {
        return Err(ModelError::Checkpoint("incomplete config block".into()));
    }
    config.validate()?;
    if let Some(exp) = expected {
        for ((k, want), (_, got)) in exp.to_pairs().into_iter().zip(config.to_pairs()) {
            if want != got {
                return Err(ModelError::ConfigMismatch {
                    key: k.to_string(),
                    expected: want,
                    found: got,
                });
            }
        }
    }
    let shapes = config.param_shapes();
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = c.text(len)?.to_string();
        let rank = c.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32()).collect::<Result<_, _>>()?;
        if shapes.get(&name) != Some(&shape) {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {name} {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = c
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Checkpoint(format!("non-finite value in {name}")));
        }
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if tensors.len() != shapes.len() || c.pos != body.len() {
        return Err(ModelError::Checkpoint("tensor set does not match config".into()));
    }
    Ok(ModelParams { config, tensors })
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    Ok(fs::write(path, params_to_bytes(params))?)
}

pub fn load_params(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams, ModelError> {
    params_from_bytes(&fs::read(path)?, expected)
}

pub const TINY_FRAMES: usize = 24;

/// Random `frames × feat_dim` utterance with three phones and two pieces.
pub fn random_example(cfg: &ModelConfig, frames: usize, seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * cfg.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Example {
        id: format!("ex{seed}"),
        feats: Tensor::new(vec![frames, cfg.feat_dim], data).expect("sized"),
        phones: (0..3).map(|_| rng.gen_range(1..cfg.v_phone)).collect(),
        pieces: (0..2).map(|_| rng.gen_range(3..cfg.v_wp)).collect(),
    }
}

/// Finite-difference check of the training-mode loss of `cfg` on a random
/// utterance; `seed` drives initialization, the utterance and dropout.
pub fn model_grad_check(
    cfg: &ModelConfig,
    frames: usize,
    seed: u64,
    step: f64,
) -> Result<(GradCheckReport, LossComponents), ModelError> {
    let params = ModelParams::init(cfg, seed)?;
    let ex = random_example(cfg, frames, seed);
    let mut lg = loss_graph(cfg, &ex, true, seed)?;
    let mut b = params.bindings();
    b.bind("x", &ex.feats);
    let rep = grad_check_report(&mut lg.graph, &b, step)?;
    Ok((rep, lg.components()?))
}

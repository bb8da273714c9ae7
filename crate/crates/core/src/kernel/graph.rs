use std::collections::BTreeMap;

use super::ops::{self, Saved};
use super::{KernelError, Tensor};
use crate::ctc;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// Trainable leaf, bound by name at evaluation time.
    Param(String),
    /// Non-trainable leaf, bound by name at evaluation time.
    Input(String),
    /// Leaf whose value is baked into the graph.
    Const(Tensor),
    MatMul,
    AddBias,
    Add,
    /// Elementwise product of equally shaped tensors.
    Mul,
    Scale(f64),
    Swish,
    Relu,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Attention { heads: usize, causal: bool },
    DepthwiseConv1d,
    Embedding(Vec<usize>),
    StackFrames(usize),
    Dropout { p: f64, seed: u64 },
    Sum,
    /// Scalar combination `Σ wᵢ·xᵢ` of scalar inputs.
    WeightedSum(Vec<f64>),
    /// CTC negative log-likelihood of the given labels under a log-prob lattice.
    CtcNll(Vec<usize>),
    SmoothedCe { targets: Vec<usize>, smoothing: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Swish => "swish",
            Op::Relu => "relu",
            Op::LayerNorm => "layer_norm",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Attention { .. } => "attention",
            Op::DepthwiseConv1d => "depthwise_conv1d",
            Op::Embedding(_) => "embedding",
            Op::StackFrames(_) => "stack_frames",
            Op::Dropout { .. } => "dropout",
            Op::Sum => "sum",
            Op::WeightedSum(_) => "weighted_sum",
            Op::CtcNll(_) => "ctc_nll",
            Op::SmoothedCe { .. } => "smoothed_ce",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

/// Named leaf tensors supplied to [`Graph::evaluate`].
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    leaves: BTreeMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: &'a Tensor) -> &mut Self {
        self.leaves.insert(name.into(), tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.leaves.get(name).copied()
    }
}

impl<'a> FromIterator<(&'a String, &'a Tensor)> for Bindings<'a> {
    fn from_iter<I: IntoIterator<Item = (&'a String, &'a Tensor)>>(iter: I) -> Self {
        Self {
            leaves: iter.into_iter().map(|(k, v)| (k.clone(), v)).collect(),
        }
    }
}

/// Gradient of the loss with respect to each parameter leaf, keyed by name.
pub type Gradients = BTreeMap<String, Tensor>;

/// A topologically ordered list of primitive applications.
///
/// Nodes can only reference nodes created before them, so creation order is
/// a valid evaluation order and its reverse a valid backward order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    saved: Vec<Saved>,
    loss: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.values.clear();
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Param(name.into()), vec![])
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()), vec![])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t), vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddBias, vec![x, b])
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Swish, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm, vec![x, gamma, beta])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::LogSoftmax, vec![x])
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> NodeId {
        self.push(Op::Attention { heads, causal }, vec![q, k, v])
    }

    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::DepthwiseConv1d, vec![x, w, b])
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding(ids), vec![table])
    }

    pub fn stack_frames(&mut self, x: NodeId, factor: usize) -> NodeId {
        self.push(Op::StackFrames(factor), vec![x])
    }

    /// Inverted dropout; `p == 0` adds no node.
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        self.push(Op::Dropout { p, seed }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let (ids, ws) = terms.iter().copied().unzip();
        self.push(Op::WeightedSum(ws), ids)
    }

    pub fn ctc_nll(&mut self, logp: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::CtcNll(targets), vec![logp])
    }

    pub fn smoothed_ce(&mut self, logp: NodeId, targets: Vec<usize>, smoothing: f64) -> NodeId {
        self.push(Op::SmoothedCe { targets, smoothing }, vec![logp])
    }

    pub fn set_loss(&mut self, id: NodeId) {
        self.loss = Some(id);
    }

    pub fn loss_node(&self) -> Option<NodeId> {
        self.loss
    }

    /// Names of every parameter leaf, in first-use order without duplicates.
    pub fn param_names(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) if seen.insert(name.clone()) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn is_evaluated(&self) -> bool {
        !self.nodes.is_empty() && self.values.len() == self.nodes.len()
    }

    /// Value of a node after [`Graph::evaluate`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor, KernelError> {
        self.values.get(id.0).ok_or(KernelError::NotEvaluated)
    }

    /// Computes every node value in creation order.
    pub fn evaluate(&mut self, bindings: &Bindings<'_>) -> Result<(), KernelError> {
        self.values.clear();
        self.saved.clear();
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut saved = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let arg = |i: usize| &values[node.inputs[i].0];
            let mut keep = Saved::Nothing;
            let out = match &node.op {
                Op::Param(name) | Op::Input(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| KernelError::UnboundLeaf(name.clone()))?,
                Op::Const(t) => t.clone(),
                Op::MatMul => ops::matmul(arg(0), arg(1))?,
                Op::AddBias => ops::add_bias(arg(0), arg(1))?,
                Op::Add => ops::add(arg(0), arg(1))?,
                Op::Mul => ops::mul(arg(0), arg(1))?,
                Op::Scale(c) => ops::map(arg(0), |v| v * c),
                Op::Swish => ops::swish(arg(0)),
                Op::Relu => ops::relu(arg(0)),
                Op::LayerNorm => {
                    let (y, s) = ops::layer_norm(arg(0), arg(1), arg(2))?;
                    keep = s;
                    y
                }
                Op::Softmax => ops::softmax(arg(0))?,
                Op::LogSoftmax => ops::log_softmax(arg(0))?,
                Op::Attention { heads, causal } => {
                    let (y, s) = ops::attention(arg(0), arg(1), arg(2), *heads, *causal)?;
                    keep = s;
                    y
                }
                Op::DepthwiseConv1d => ops::depthwise_conv1d(arg(0), arg(1), arg(2))?,
                Op::Embedding(ids) => ops::embedding(arg(0), ids)?,
                Op::StackFrames(f) => ops::stack_frames(arg(0), *f)?,
                Op::Dropout { p, seed } => {
                    let (y, s) = ops::dropout(arg(0), *p, *seed);
                    keep = s;
                    y
                }
                Op::Sum => Tensor::scalar(arg(0).sum()),
                Op::WeightedSum(ws) => {
                    let mut acc = 0.0;
                    for (i, w) in ws.iter().enumerate() {
                        acc += w * arg(i).item()?;
                    }
                    Tensor::scalar(acc)
                }
                Op::CtcNll(targets) => {
                    let (nll, grad) = ctc::ctc_loss(arg(0), targets)?;
                    keep = Saved::LatticeGrad(grad);
                    Tensor::scalar(nll)
                }
                Op::SmoothedCe { targets, smoothing } => {
                    ops::smoothed_ce(arg(0), targets, *smoothing)?
                }
            };
            if !out.is_finite() {
                return Err(KernelError::NonFinite {
                    op: node.op.name(),
                    node: idx,
                });
            }
            values.push(out);
            saved.push(keep);
        }
        self.values = values;
        self.saved = saved;
        Ok(())
    }

    /// Value of the loss node after evaluation.
    pub fn loss_value(&self) -> Result<f64, KernelError> {
        let id = self.loss.ok_or(KernelError::NoLoss)?;
        self.value(id)?.item()
    }

    /// Reverse-mode sweep from the scalar loss node.
    pub fn backward(&self) -> Result<Gradients, KernelError> {
        let loss = self.loss.ok_or(KernelError::NoLoss)?;
        if !self.is_evaluated() {
            return Err(KernelError::NotEvaluated);
        }
        if self.values[loss.0].len() != 1 {
            return Err(KernelError::NonScalarLoss(
                self.values[loss.0].shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.values[loss.0].shape(), 1.0));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |i: usize| &self.values[node.inputs[i].0];
            let input_grads: Vec<Tensor> = match &node.op {
                Op::Param(name) => {
                    match out.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.insert(name.clone(), g);
                        }
                    }
                    continue;
                }
                Op::Input(_) | Op::Const(_) => continue,
                Op::MatMul => {
                    let (ga, gb) = ops::matmul_back(val(0), val(1), &g);
                    vec![ga, gb]
                }
                Op::AddBias => {
                    let gb = ops::add_bias_back(val(0), &g);
                    vec![g, gb]
                }
                Op::Add => vec![g.clone(), g],
                Op::Mul => {
                    let ga = ops::mul(&g, val(1))?;
                    let gb = ops::mul(&g, val(0))?;
                    vec![ga, gb]
                }
                Op::Scale(c) => vec![ops::map(&g, |v| v * c)],
                Op::Swish => vec![ops::swish_back(val(0), &g)],
                Op::Relu => vec![ops::relu_back(val(0), &g)],
                Op::LayerNorm => {
                    let Saved::LayerNorm { xhat, rstd } = &self.saved[idx] else {
                        unreachable!("layer norm saves its statistics")
                    };
                    let (gx, gg, gb) = ops::layer_norm_back(val(1), &g, xhat, rstd);
                    vec![gx, gg, gb]
                }
                Op::Softmax => vec![ops::softmax_back(&self.values[idx], &g)],
                Op::LogSoftmax => vec![ops::log_softmax_back(&self.values[idx], &g)],
                Op::Attention { heads, .. } => {
                    let Saved::Attention { probs } = &self.saved[idx] else {
                        unreachable!("attention saves its probabilities")
                    };
                    let (gq, gk, gv) =
                        ops::attention_back(val(0), val(1), val(2), *heads, probs, &g);
                    vec![gq, gk, gv]
                }
                Op::DepthwiseConv1d => {
                    let (gx, gw, gb) = ops::depthwise_conv1d_back(val(0), val(1), &g);
                    vec![gx, gw, gb]
                }
                Op::Embedding(ids) => vec![ops::embedding_back(val(0), ids, &g)],
                Op::StackFrames(f) => vec![ops::stack_frames_back(val(0), *f, &g)],
                Op::Dropout { .. } => {
                    let Saved::Dropout { keep } = &self.saved[idx] else {
                        unreachable!("dropout saves its mask")
                    };
                    let data = g.data().iter().zip(keep).map(|(a, k)| a * k).collect();
                    vec![Tensor::new(g.shape().to_vec(), data)?]
                }
                Op::Sum => vec![Tensor::filled(val(0).shape(), g.item()?)],
                Op::WeightedSum(ws) => {
                    let gv = g.item()?;
                    ws.iter()
                        .enumerate()
                        .map(|(i, w)| Tensor::filled(val(i).shape(), w * gv))
                        .collect()
                }
                Op::CtcNll(_) => {
                    let Saved::LatticeGrad(lg) = &self.saved[idx] else {
                        unreachable!("ctc saves its lattice gradient")
                    };
                    let mut gl = lg.clone();
                    gl.scale_in_place(g.item()?);
                    vec![gl]
                }
                Op::SmoothedCe { targets, smoothing } => vec![ops::smoothed_ce_back(
                    val(0),
                    targets,
                    *smoothing,
                    g.item()?,
                )],
            };
            for (input, gi) in node.inputs.iter().zip(input_grads) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(self.values[idx].shape()));
            }
        }
        Ok(out)
    }
}

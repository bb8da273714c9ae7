//! Dense 64-bit tensors and a small define-then-run graph with exact
//! reverse-mode gradients for every primitive the model needs.

mod graph;
mod ops;
pub mod rng;
pub mod suite;
mod tensor;

pub use graph::{Bindings, Gradients, Graph, NodeId, Op};
pub use tensor::Tensor;

use thiserror::Error;

use crate::ctc::CtcError;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("loss node must be scalar, has shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph has not been evaluated")]
    NotEvaluated,
    #[error("graph has no loss node")]
    NoLoss,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Ctc(#[from] CtcError),
}

/// Compares reverse-mode gradients against central finite differences.
///
/// Returns the maximum over every parameter entry of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check(
    graph: &mut Graph,
    bindings: &Bindings<'_>,
    step: f64,
) -> Result<f64, KernelError> {
    Ok(grad_check_report(graph, bindings, step)?.max_rel_error)
}

/// Location and size of the worst finite-difference disagreement.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Every `(analytic, numeric)` pair, in parameter-name then index order.
    pub pairs: Vec<(f64, f64)>,
    /// Parameter names with their entry counts, in the order of `pairs`.
    pub params: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn entries(&self) -> usize {
        self.pairs.len()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.pairs
            .iter()
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }

    /// `|a − n| ≤ abs_tol + rel_tol · max(|a|, |n|)` for every entry.
    pub fn allclose(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.pairs
            .iter()
            .all(|(a, n)| (a - n).abs() <= abs_tol + rel_tol * a.abs().max(n.abs()))
    }
}

pub fn grad_check_report(
    graph: &mut Graph,
    bindings: &Bindings<'_>,
    step: f64,
) -> Result<GradCheckReport, KernelError> {
    if !(step > 0.0) {
        return Err(KernelError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    graph.evaluate(bindings)?;
    let analytic = graph.backward()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        pairs: Vec::new(),
        params: Vec::new(),
    };
    for name in graph.param_names() {
        let base = bindings
            .get(&name)
            .ok_or_else(|| KernelError::UnboundLeaf(name.clone()))?;
        let grad = &analytic[&name];
        report.params.push((name.clone(), base.len()));
        let mut probe = base.clone();
        for i in 0..base.len() {
            let orig = base.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = eval_loss_with(graph, bindings, &name, &probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = eval_loss_with(graph, bindings, &name, &probe)?;
            probe.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.pairs.push((a, numeric));
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    // leave the graph holding the unperturbed values
    graph.evaluate(bindings)?;
    Ok(report)
}

fn eval_loss_with(
    graph: &mut Graph,
    bindings: &Bindings<'_>,
    name: &str,
    value: &Tensor,
) -> Result<f64, KernelError> {
    let mut b = bindings.clone();
    b.bind(name, value);
    graph.evaluate(&b)?;
    graph.loss_value()
}

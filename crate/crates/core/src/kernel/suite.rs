//! Fixed-shape finite-difference checks of every primitive, for use outside
//! the unit tests (acceptance runs and the `grad-check` command).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_report, Bindings, GradCheckReport, Graph, KernelError, NodeId, Tensor};

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// `loss = Σ out ⊙ R` with readout weights of magnitude in [0.5, 1.5].
fn readout(g: &mut Graph, out: NodeId, shape: &[usize], rng: &mut impl Rng) {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let r = g.constant(Tensor::new(shape.to_vec(), data).expect("sized"));
    let prod = g.mul(out, r);
    let s = g.sum(prod);
    g.set_loss(s);
}

type Case = (Graph, Vec<(&'static str, Tensor)>);

fn cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Case)> {
    let mut out = Vec::new();

    let mut g = Graph::new();
    let (x, w, b) = (g.param("x"), g.param("w"), g.param("b"));
    let y = g.linear(x, w, b);
    readout(&mut g, y, &[2, 5, 3], rng);
    let leaves = vec![
        ("x", random_tensor(rng, &[2, 5, 4])),
        ("w", random_tensor(rng, &[4, 3])),
        ("b", random_tensor(rng, &[3])),
    ];
    out.push(("matmul+bias", (g, leaves)));

    let mut g = Graph::new();
    let (a, c) = (g.param("a"), g.param("c"));
    let s = g.add(a, c);
    let m = g.mul(s, a);
    let y = g.scale(m, 0.7);
    readout(&mut g, y, &[4, 6], rng);
    let leaves = vec![("a", random_tensor(rng, &[4, 6])), ("c", random_tensor(rng, &[4, 6]))];
    out.push(("add/mul/scale", (g, leaves)));

    let mut g = Graph::new();
    let x = g.param("x");
    let s = g.swish(x);
    let r = g.relu(x);
    let y = g.add(s, r);
    readout(&mut g, y, &[5, 7], rng);
    let mut xt = random_tensor(rng, &[5, 7]);
    for v in xt.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.05;
        }
    }
    out.push(("swish/relu", (g, vec![("x", xt)])));

    let mut g = Graph::new();
    let (x, ga, be) = (g.param("x"), g.param("g"), g.param("b"));
    let y = g.layer_norm(x, ga, be);
    readout(&mut g, y, &[6, 8], rng);
    let leaves = vec![
        ("x", random_tensor(rng, &[6, 8])),
        ("g", random_tensor(rng, &[8])),
        ("b", random_tensor(rng, &[8])),
    ];
    out.push(("layer_norm", (g, leaves)));

    let mut g = Graph::new();
    let x = g.param("x");
    let s = g.softmax(x);
    let l = g.log_softmax(x);
    let y = g.add(s, l);
    readout(&mut g, y, &[5, 6], rng);
    out.push(("softmax/log_softmax", (g, vec![("x", random_tensor(rng, &[5, 6]))])));

    for causal in [false, true] {
        let mut g = Graph::new();
        let (q, k, v) = (g.param("q"), g.param("k"), g.param("v"));
        let y = g.attention(q, k, v, 2, causal);
        readout(&mut g, y, &[5, 8], rng);
        let tk = if causal { 5 } else { 7 };
        let leaves = vec![
            ("q", random_tensor(rng, &[5, 8])),
            ("k", random_tensor(rng, &[tk, 8])),
            ("v", random_tensor(rng, &[tk, 8])),
        ];
        out.push((if causal { "attention(causal)" } else { "attention" }, (g, leaves)));
    }

    let mut g = Graph::new();
    let (x, w, b) = (g.param("x"), g.param("w"), g.param("b"));
    let y = g.depthwise_conv1d(x, w, b);
    readout(&mut g, y, &[9, 4], rng);
    let leaves = vec![
        ("x", random_tensor(rng, &[9, 4])),
        ("w", random_tensor(rng, &[5, 4])),
        ("b", random_tensor(rng, &[4])),
    ];
    out.push(("depthwise_conv1d", (g, leaves)));

    let mut g = Graph::new();
    let t = g.param("table");
    let ids: Vec<usize> = (0..8).map(|_| rng.gen_range(0..6)).collect();
    let e = g.embedding(t, ids);
    let s = g.stack_frames(e, 4);
    readout(&mut g, s, &[2, 20], rng);
    out.push(("embedding/stack_frames", (g, vec![("table", random_tensor(rng, &[6, 5]))])));

    let mut g = Graph::new();
    let x = g.param("x");
    let y = g.dropout(x, 0.3, 11);
    readout(&mut g, y, &[4, 9], rng);
    out.push(("dropout", (g, vec![("x", random_tensor(rng, &[4, 9]))])));

    let mut g = Graph::new();
    let x = g.param("x");
    let lp = g.log_softmax(x);
    let c = g.ctc_nll(lp, vec![1, 3, 3, 2]);
    let e = g.smoothed_ce(lp, vec![0, 1, 2, 3, 4, 1, 2, 0], 0.1);
    let l = g.weighted_sum(&[(c, 0.3), (e, 0.7)]);
    g.set_loss(l);
    let mut xt = random_tensor(rng, &[8, 5]);
    xt.scale_in_place(2.0);
    out.push(("ctc_nll/smoothed_ce", (g, vec![("x", xt)])));

    out
}

/// One finite-difference report per primitive group.
pub fn primitive_checks(seed: u64, step: f64) -> Result<Vec<(&'static str, GradCheckReport)>, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(&mut rng)
        .into_iter()
        .map(|(name, (mut g, leaves))| {
            let mut b = Bindings::new();
            for (n, t) in &leaves {
                b.bind(*n, t);
            }
            Ok((name, grad_check_report(&mut g, &b, step)?))
        })
        .collect()
}

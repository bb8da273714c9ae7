//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs without the test harness so the verdict lines are always shown. The
//! process exits 0 once every criterion has been evaluated; set
//! `PMMUT_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails, and
//! `PMMUT_ACCEPTANCE_ONLY=1,4` to run a subset.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmmut::augment::phone_mask_with_selection;
use pmmut::corpus::Span;
use pmmut::ctc::{ctc_brute_force, ctc_loss, min_frames};
use pmmut::decode::{attention_beam_search, ctc_prefix_search, joint_beam_search, SearchConfig};
use pmmut::kernel::suite::primitive_checks;
use pmmut::kernel::Tensor;
use pmmut::model::{encoder_forward, model_grad_check, random_example, InterUnit, ModelConfig, ModelParams, TINY_FRAMES};
use pmmut::trainer::{
    ablate, generate_datasets, label, run_cell, train, train_tokenizer, Cell, Grid, Labeled, System, TrainConfig,
};

use common::{code, pmmut, snapshot, write_config, SMALL_CONFIG};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("PMMUT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("PMMUT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(usize, &str, fn() -> Verdict); 8] = [
        (1, "ctc loss equals path enumeration", ctc_correctness),
        (2, "gradients match finite differences", gradient_fidelity),
        (3, "loss components recombine", loss_composition),
        (4, "decoding collapses at the lambda extremes", decoding_collapses),
        (5, "phone masking contract", masking_contract),
        (6, "reduced-set WER ordering over 5 seeds", directional_ordering),
        (7, "ablation harness structure", ablation_structure),
        (8, "cli artifacts are byte-identical on rerun", determinism),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let v = run();
        ran += 1;
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id}. {name} ({:.1}s): {}", t.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} criteria pass; failing: {failed:?}", ran - failed.len());
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}

fn random_lattice(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let z: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(z.iter().map(|x| x - lse));
    }
    Tensor::new(vec![t, v], data).unwrap()
}

fn ctc_correctness() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 500 {
        let t = rng.gen_range(1..=8);
        let v = rng.gen_range(2..=4);
        let u = rng.gen_range(0..=3);
        let targets: Vec<usize> = (0..u).map(|_| rng.gen_range(1..v)).collect();
        if min_frames(&targets) > t {
            continue;
        }
        let lat = random_lattice(&mut rng, t, v);
        let (loss, _) = ctc_loss(&lat, &targets).unwrap();
        let brute = ctc_brute_force(&lat, &targets).unwrap();
        worst = worst.max((loss - brute).abs());
        n += 1;
    }
    let elapsed = t0.elapsed();
    verdict(
        worst < 1e-9 && elapsed < Duration::from_secs(10),
        format!("500 instances, max |dp - brute| {worst:.2e} (< 1e-9), {:.2}s (< 10s)", elapsed.as_secs_f64()),
    )
}

fn gradient_fidelity() -> Verdict {
    let t0 = Instant::now();
    const STEP: f64 = 1e-5;
    let checks = primitive_checks(0, STEP).unwrap();
    let (prim_name, prim) = checks
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let (rep, loss) = model_grad_check(&ModelConfig::tiny(), TINY_FRAMES, 0, STEP).unwrap();
    let elapsed = t0.elapsed();
    // Secondary diagnostic: the same comparison measured per parameter tensor
    // in the 2-norm, which is insensitive to individual near-zero entries.
    let mut by_tensor = 0.0f64;
    let mut offset = 0;
    for (_, len) in &rep.params {
        let pairs = &rep.pairs[offset..offset + len];
        offset += len;
        let norm = |f: fn(&(f64, f64)) -> f64| pairs.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
        let scale = norm(|p| p.0).max(norm(|p| p.1));
        if scale > 0.0 {
            by_tensor = by_tensor.max(norm(|p| p.0 - p.1) / scale);
        }
    }
    let pass = prim.max_rel_error < 1e-4 && rep.max_rel_error < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "primitives worst {:.2e} ({prim_name}); tiny model {:.2e} at {}[{}] analytic {:.3e} numeric {:.3e} \
             (|diff| {:.1e}, loss {:.3}); per-tensor norm-wise {by_tensor:.2e}; bound 1e-4; {:.1}s",
            prim.max_rel_error,
            rep.max_rel_error,
            rep.worst_param,
            rep.worst_index,
            rep.analytic,
            rep.numeric,
            (rep.analytic - rep.numeric).abs(),
            loss.total,
            elapsed.as_secs_f64()
        ),
    )
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(SMALL_CONFIG).unwrap();
    c
}

struct Small {
    cfg: TrainConfig,
    tok: pmmut::tokenizer::TokenizerModel,
    train: Vec<Labeled>,
    clean: Vec<Labeled>,
    reduced: Vec<Labeled>,
}

fn small_world() -> Small {
    let cfg = small_config();
    let data = generate_datasets(&cfg.data, cfg.model.feat_dim, 0).unwrap();
    let tok = train_tokenizer(&data.train, cfg.data.vocab).unwrap();
    Small {
        train: label(&data.train, &data.lexicon, &tok).unwrap(),
        clean: label(&data.test_clean, &data.lexicon, &tok).unwrap(),
        reduced: label(&data.test_reduced, &data.lexicon, &tok).unwrap(),
        cfg,
        tok,
    }
}

fn loss_composition() -> Verdict {
    let w = small_world();
    let mut worst = 0.0f64;
    let mut steps = 0;
    let runs = [
        (System::PmMmut, 0.3),
        (System::PmMmut, 0.5),
        (System::PmMmut, 1.0),
        (System::Mmut, 0.7),
        (System::PmMmutWp, 0.5),
        (System::InterCtc, 0.5),
        (System::Baseline, 0.0),
    ];
    for (system, alpha) in runs {
        let mut c = w.cfg.clone();
        system.configure(&mut c, alpha, 2);
        let r = train(&c, &w.train, system.name()).unwrap().report;
        for s in &r.steps {
            let l = &s.loss;
            let by_hand = c.model.beta * (l.wpctc + c.model.alpha * l.pctc.unwrap_or(0.0)) + (1.0 - c.model.beta) * l.ce;
            worst = worst.max((by_hand - l.total).abs());
            steps += 1;
        }
    }
    let mut pm = w.cfg.clone();
    System::PmMmut.configure(&mut pm, 0.0, 2);
    let mut pmt = w.cfg.clone();
    System::Pmt.configure(&mut pmt, 0.5, 2);
    let a = train(&pm, &w.train, "pm-mmut").unwrap();
    let b = train(&pmt, &w.train, "pmt").unwrap();
    let identical = a.report.steps.len() == b.report.steps.len()
        && a.report
            .steps
            .iter()
            .zip(&b.report.steps)
            .all(|(x, y)| x.loss == y.loss && x.grad_norm.to_bits() == y.grad_norm.to_bits());
    verdict(
        worst < 1e-9 && identical && steps > 0,
        format!(
            "{steps} steps over {} runs, max |recombined - total| {worst:.2e} (< 1e-9); alpha=0 vs pmt over {} steps: {}",
            runs.len(),
            a.report.steps.len(),
            if identical { "identical" } else { "DIFFERENT" }
        ),
    )
}

fn scaled_tiny(seed: u64) -> (ModelParams, Tensor, Tensor) {
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::init(&cfg, seed).unwrap();
    for t in params.tensors.values_mut() {
        t.scale_in_place(2.5);
    }
    let ex = random_example(&cfg, TINY_FRAMES, seed);
    let enc = encoder_forward(&params, &ex.feats, false, 0).unwrap();
    (params, (*enc.h_wplr).clone(), enc.wp_logp)
}

fn decoding_collapses() -> Verdict {
    let mut compared = 0;
    let mut mismatches = 0;
    for seed in 0..20 {
        let (p, mem, lat) = scaled_tiny(seed);
        for beam in [1, 3, 10] {
            let cfg = |lambda| SearchConfig {
                lambda,
                beam,
                ..SearchConfig::default()
            };
            let tokens = |h: Vec<pmmut::decode::Hypothesis>| h.into_iter().map(|h| h.tokens).collect::<Vec<_>>();
            let j1 = tokens(joint_beam_search(&p, &mem, &lat, &cfg(1.0)).unwrap());
            let att = tokens(attention_beam_search(&p, &mem, &cfg(1.0)).unwrap());
            let j0 = tokens(joint_beam_search(&p, &mem, &lat, &cfg(0.0)).unwrap());
            let pre = tokens(ctc_prefix_search(&lat, &cfg(0.0)).unwrap());
            mismatches += (j1 != att) as usize + (j0 != pre) as usize;
            compared += 2;
        }
    }
    let lambda = SearchConfig::default().lambda;
    let train_lambda = TrainConfig::default().decode.lambda;
    verdict(
        mismatches == 0 && lambda == 0.6 && train_lambda == 0.6,
        format!(
            "{compared} n-best lists compared (20 models, beams 1/3/10), {mismatches} mismatches; default lambda {lambda} (training default {train_lambda})"
        ),
    )
}

fn masking_contract() -> Verdict {
    let cfg = TrainConfig::default();
    let p = cfg.augment.mask_p;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut phones, mut masked) = (0usize, 0usize);
    let (mut unmasked_ok, mut worst_mean) = (true, 0.0f64);
    let mut data_seed = 0;
    while phones < 10_000 {
        let data = generate_datasets(&cfg.data, cfg.model.feat_dim, data_seed).unwrap();
        data_seed += 1;
        for u in &data.train {
            let (y, sel) = phone_mask_with_selection(&u.feats, &u.align, p, &mut rng).unwrap();
            phones += sel.len();
            masked += sel.iter().filter(|&&s| s).count();
            for (k, s) in u.align.iter().enumerate() {
                let word: Vec<&Span> = u.align.iter().filter(|o| o.word == s.word).collect();
                let (from, to) = (word[0].start, word[word.len() - 1].end);
                for t in s.start..s.end {
                    if sel[k] {
                        for d in 0..u.feats.cols() {
                            let mean = (from..to).map(|r| u.feats.row(r)[d]).sum::<f64>() / (to - from) as f64;
                            worst_mean = worst_mean.max((y.row(t)[d] - mean).abs());
                        }
                    } else {
                        unmasked_ok &= y.row(t).iter().zip(u.feats.row(t)).all(|(a, b)| a.to_bits() == b.to_bits());
                    }
                }
            }
        }
    }
    let frac = masked as f64 / phones as f64;
    let half = 2.5758293035489 * (p * (1.0 - p) / phones as f64).sqrt();
    let inside = (frac - p).abs() <= half;
    verdict(
        inside && unmasked_ok && worst_mean < 1e-12,
        format!(
            "{masked}/{phones} phones masked = {frac:.4}, 99% interval {:.4}..{:.4} around p={p}; unmasked frames bit-identical: {unmasked_ok}; max |masked - word mean| {worst_mean:.1e}",
            p - half,
            p + half
        ),
    )
}

fn directional_ordering() -> Verdict {
    let t0 = Instant::now();
    let cfg = TrainConfig::default();
    let data = generate_datasets(&cfg.data, cfg.model.feat_dim, 0).unwrap();
    let tok = train_tokenizer(&data.train, cfg.data.vocab).unwrap();
    let items = label(&data.train, &data.lexicon, &tok).unwrap();
    let clean = label(&data.test_clean, &data.lexicon, &tok).unwrap();
    let reduced = label(&data.test_reduced, &data.lexicon, &tok).unwrap();
    let grid = Grid {
        systems: vec![System::Baseline, System::Pmt, System::PmMmut],
        alphas: vec![0.5],
        n_a2p: vec![5],
        seeds: (0..5).collect(),
    };
    let table = ablate(&cfg, &grid, &items, &clean, &reduced, &tok);
    let elapsed = t0.elapsed();
    let (base, pmt, pm) = ("baseline", "pmt", "pm-mmut(a=0.5,n=5)");
    for l in [base, pmt, pm] {
        let by_seed: BTreeMap<u64, f64> = table.wer_by_seed(l, "reduced");
        let row: Vec<String> = by_seed.values().map(|w| format!("{w:.4}")).collect();
        println!("    {l:<20} reduced WER by seed {}", row.join(" "));
    }
    let failures = table.results.iter().filter(|r| r.outcome.is_err()).count();
    let m = |l| table.median_wer(l, "reduced").unwrap_or(f64::NAN);
    let (mb, mp, mm) = (m(base), m(pmt), m(pm));
    let (w_base, n_base) = table.wins(pm, base, "reduced");
    let (w_pmt, n_pmt) = table.wins(pm, pmt, "reduced");
    let pass = failures == 0
        && mb > mp
        && mp > mm
        && n_base == 5
        && n_pmt == 5
        && w_base >= 4
        && w_pmt >= 3
        && elapsed < Duration::from_secs(4 * 3600);
    verdict(
        pass,
        format!(
            "median reduced WER baseline {mb:.4} > pmt {mp:.4} > pm-mmut {mm:.4}: {}; pm-mmut beats baseline {w_base}/{n_base} (need 4), pmt {w_pmt}/{n_pmt} (need 3); {failures} failed cells; {:.0} min (< 240)",
            mb > mp && mp > mm,
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn ablation_structure() -> Verdict {
    let w = small_world();
    // a split at the last block hands both heads the same tensor
    let mut shared = w.cfg.model.clone();
    shared.n_a2p = shared.n_total;
    shared.alpha = 0.5;
    let params = ModelParams::init(&shared, 0).unwrap();
    let out = encoder_forward(&params, &w.train[0].utt.feats, false, 0).unwrap();
    let one_rep = Arc::ptr_eq(&out.h_plr, &out.h_wplr);
    let cell = |system, alpha, n_a2p| Cell {
        system,
        alpha,
        n_a2p,
        seed: 0,
    };
    let shared_run = run_cell(&w.cfg, &cell(System::PmMmut, 0.5, w.cfg.model.n_total), &w.train, &w.clean, &w.reduced, &w.tok).is_ok();

    let mut wp = w.cfg.clone();
    System::PmMmutWp.configure(&mut wp, 0.5, 2);
    let wp_targets = wp.model.inter_unit == InterUnit::WordPiece && wp.model.inter_vocab() == wp.model.v_wp;
    let wp_run = run_cell(&w.cfg, &cell(System::PmMmutWp, 0.5, 2), &w.train, &w.clean, &w.reduced, &w.tok);
    let wp_ok = wp_run.as_ref().is_ok_and(|(o, _, _)| {
        o.report.steps.iter().all(|s| s.loss.pctc.is_some()) && o.report.tests.iter().all(|(_, m)| m.per().is_none())
    });

    let alphas = vec![0.3, 0.5, 0.7, 1.0];
    let table = ablate(
        &w.cfg,
        &Grid {
            systems: vec![System::PmMmut],
            alphas: alphas.clone(),
            n_a2p: vec![2],
            seeds: vec![0],
        },
        &w.train,
        &w.clean,
        &w.reduced,
        &w.tok,
    );
    let swept: Vec<f64> = table.results.iter().filter(|r| r.outcome.is_ok()).map(|r| r.cell.alpha).collect();
    let rows = table.summary().lines().take_while(|l| !l.is_empty()).count() - 1;
    let sweep_ok = swept == alphas && rows == alphas.len();
    verdict(
        one_rep && shared_run && wp_targets && wp_ok && sweep_ok,
        format!(
            "n_a2p = n_total shares one tensor: {one_rep}, trains: {shared_run}; word-piece intermediate targets: {wp_targets}, run ok: {wp_ok}; alpha sweep ran {swept:?} with {rows} summary rows"
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root);
    let c = cfg.to_str().unwrap().to_string();
    let p = |x: &str| root.join(x).to_str().unwrap().to_string();
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<String>>();

    // shared inputs, produced once
    for args in [
        s(&["gen-data", "--config", &c, "--out", &p("data")]),
        s(&["train-tokenizer", "--config", &c, "--data", &p("data"), "--out", &p("tok")]),
        s(&["train", "--config", &c, "--data", &p("data"), "--tokenizer", &p("tok/tokenizer.txt"), "--out", &p("run")]),
    ] {
        let o = pmmut(&args);
        if code(&o) != 0 {
            return verdict(false, format!("setup {} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
    }
    let tok = p("tok/tokenizer.txt");
    let ckpt = p("run/model.ckpt");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", s(&["gen-data", "--config", &c, "--seed", "3"])),
        ("train-tokenizer", s(&["train-tokenizer", "--config", &c, "--data", &p("data")])),
        ("train", s(&["train", "--config", &c, "--data", &p("data"), "--tokenizer", &tok, "--seed", "2"])),
        ("evaluate", s(&["evaluate", "--config", &c, "--model", &ckpt, "--data", &p("data"), "--tokenizer", &tok])),
        ("decode", s(&["decode", "--config", &c, "--model", &ckpt, "--corpus", &p("data/test_reduced"), "--tokenizer", &tok])),
        (
            "ablate",
            s(&[
                "ablate", "--config", &c, "--data", &p("data"), "--tokenizer", &tok, "--systems", "baseline,pm-mmut", "--alphas",
                "0.5", "--seeds", "0,1",
            ]),
        ),
        ("mask-stats", s(&["mask-stats", "--config", &c, "--n", "2000"])),
        ("grad-check", s(&["grad-check"])),
    ];
    let mut same = Vec::new();
    let mut differ = Vec::new();
    for (name, args) in commands {
        let run = |tag: &str| {
            let out = root.join(format!("{name}-{tag}"));
            let mut a = args.clone();
            a.extend(["--out".to_string(), out.to_str().unwrap().to_string()]);
            let o = pmmut(&a);
            (code(&o), snapshot_or_empty(&out))
        };
        let first = run("a");
        let second = run("b");
        if first == second && !first.1.is_empty() {
            same.push(name);
        } else {
            differ.push(name);
        }
    }
    verdict(
        differ.is_empty(),
        format!("identical exit codes and artifacts: {same:?}; differing or empty: {differ:?}"),
    )
}

fn snapshot_or_empty(dir: &Path) -> BTreeMap<std::path::PathBuf, Vec<u8>> {
    if dir.exists() {
        snapshot(dir)
    } else {
        BTreeMap::new()
    }
}

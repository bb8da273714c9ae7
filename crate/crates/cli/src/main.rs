use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use pmmut::augment::phone_mask_with_selection;
use pmmut::corpus::{generate_corpus, read_corpus};
use pmmut::decode::{decode_tsv, DecodeRow, Metrics};
use pmmut::kernel::rng::{derive_seed, label_hash};
use pmmut::kernel::suite::primitive_checks;
use pmmut::model::{load_params, model_grad_check, save_params, ModelConfig, ModelParams, TINY_FRAMES};
use pmmut::tokenizer::TokenizerModel;
use pmmut::trainer::{
    ablate, evaluate, generate_datasets, label, train, train_tokenizer, write_text, Datasets, Grid, Labeled,
    System, TrainConfig, TrainError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const Z99: f64 = 2.5758293035489;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "pmmut", version, about = "Phone-masked multi-modeling-unit CTC/attention training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of key=value lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for all randomness (overrides train.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Config override, repeatable; `--section.key value` is accepted too
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training, clean test and reduced test corpora
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the word-piece tokenizer on a training corpus
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by gen-data
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model and evaluate it on both test sets
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Evaluate a checkpoint on both test sets
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Decode one corpus directory to a TSV file
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Train and evaluate a grid of systems, intermediate weights, splits and seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Comma-separated: baseline, pmt, mmut, pm-mmut, pm-mmut-wp, inter-ctc
        #[arg(long, default_value = "baseline,pmt,pm-mmut")]
        systems: String,
        #[arg(long, default_value = "0.5")]
        alphas: String,
        /// Split points; defaults to model.n_a2p
        #[arg(long = "n-a2p")]
        n_a2p: Option<String>,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Empirical phone-mask rate against its binomial confidence interval
    MaskStats {
        #[command(flatten)]
        common: Common,
        /// Mask probability; defaults to augment.mask_p
        #[arg(long = "p")]
        p: Option<f64>,
        /// Minimum number of phones to draw
        #[arg(long = "n", default_value_t = 10_000)]
        n: usize,
    },
    /// Finite-difference check of every kernel primitive and the tiny model
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Rewrites `--section.key=value` and `--section.key value` into `--set`.
fn expand_overrides(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(rest) if rest.split('=').next().is_some_and(|k| k.contains('.')) => {
                out.push("--set".into());
                if rest.contains('=') {
                    out.push(rest.to_string());
                } else {
                    let v = it.next().unwrap_or_default();
                    out.push(format!("{rest}={v}"));
                }
            }
            _ => out.push(a),
        }
    }
    out
}

fn load_config(c: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf, Failure> {
    let d = c.out.clone().ok_or_else(|| Failure::Usage("--out is required".into()))?;
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

fn list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("bad {what} {x:?}")))
        })
        .collect()
}

fn load_tokenizer(path: &Path, cfg: &TrainConfig) -> Result<TokenizerModel, Failure> {
    let tok = TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))?;
    if tok.vocab_size() != cfg.model.v_wp {
        return Err(Failure::Usage(format!(
            "tokenizer has {} pieces but model.v_wp is {}",
            tok.vocab_size(),
            cfg.model.v_wp
        )));
    }
    Ok(tok)
}

struct Labeled3 {
    train: Vec<Labeled>,
    clean: Vec<Labeled>,
    reduced: Vec<Labeled>,
}

fn load_data(dir: &Path, tok: &TokenizerModel) -> Result<Labeled3, Failure> {
    let ds = Datasets::read(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok(Labeled3 {
        train: label(&ds.train, &ds.lexicon, tok)?,
        clean: label(&ds.test_clean, &ds.lexicon, tok)?,
        reduced: label(&ds.test_reduced, &ds.lexicon, tok)?,
    })
}

fn print_metrics(name: &str, m: &Metrics) {
    println!(
        "{name}: WER {:.4} TER {:.4} PER {}",
        m.wer(),
        m.ter(),
        m.per().map_or_else(|| "-".into(), |p| format!("{p:.4}"))
    );
}

fn gen_data(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let ds = generate_datasets(&cfg.data, cfg.model.feat_dim, cfg.seed)?;
    ds.write(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    println!(
        "wrote {} training, {} clean and {} reduced test utterances to {}",
        ds.train.len(),
        ds.test_clean.len(),
        ds.test_reduced.len(),
        out.display()
    );
    Ok(())
}

fn train_tok(common: &Common, data: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let corpus = read_corpus(&data.join(pmmut::trainer::TRAIN_DIR))
        .with_context(|| format!("reading {}", data.display()))?;
    let tok = train_tokenizer(&corpus.utterances, cfg.data.vocab)?;
    let path = out.join("tokenizer.txt");
    tok.save(&path).context("writing tokenizer")?;
    println!("{} pieces, {} merges -> {}", tok.vocab_size(), tok.merges().len(), path.display());
    Ok(())
}

fn train_cmd(common: &Common, data: &Path, tokenizer: &Path) -> Outcome {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = out_dir(common)?;
    let tok = load_tokenizer(tokenizer, &cfg)?;
    let d = load_data(data, &tok)?;
    let started = Instant::now();
    let mut o = train(&cfg, &d.train, "train")?;
    let (mc, rows_c) = evaluate(&o.params, &d.clean, &tok, &cfg.decode)?;
    let (mr, rows_r) = evaluate(&o.params, &d.reduced, &tok, &cfg.decode)?;
    o.report.tests = vec![("clean".into(), mc), ("reduced".into(), mr)];
    save_params(&o.params, &out.join("model.ckpt")).context("writing checkpoint")?;
    o.report.write(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    write_text(&out.join("decode_clean.tsv"), &decode_tsv(&rows_c))?;
    write_text(&out.join("decode_reduced.tsv"), &decode_tsv(&rows_r))?;
    log::info!("training and evaluation took {:.1?}", started.elapsed());
    println!("best epoch {} (validation TER {:.4})", o.report.best_epoch, o.report.best_valid_ter);
    print_metrics("clean", &mc);
    print_metrics("reduced", &mr);
    Ok(())
}

fn load_model(path: &Path) -> Result<ModelParams, Failure> {
    Ok(load_params(path, None).with_context(|| format!("loading {}", path.display()))?)
}

fn evaluate_cmd(common: &Common, model: &Path, data: &Path, tokenizer: &Path) -> Outcome {
    let mut cfg = load_config(common)?;
    let out = out_dir(common)?;
    let params = load_model(model)?;
    cfg.model = params.config.clone();
    let tok = load_tokenizer(tokenizer, &cfg)?;
    let d = load_data(data, &tok)?;
    let mut tsv = String::from("set\twer\tter\tper\n");
    for (name, items) in [("clean", &d.clean), ("reduced", &d.reduced)] {
        let (m, rows) = evaluate(&params, items, &tok, &cfg.decode)?;
        print_metrics(name, &m);
        tsv.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            m.wer(),
            m.ter(),
            m.per().map_or_else(|| "-".into(), |p| p.to_string())
        ));
        write_text(&out.join(format!("decode_{name}.tsv")), &decode_tsv(&rows))?;
    }
    write_text(&out.join("metrics.tsv"), &tsv)?;
    Ok(())
}

fn decode_cmd(common: &Common, model: &Path, corpus: &Path, tokenizer: &Path) -> Outcome {
    let mut cfg = load_config(common)?;
    let out = out_dir(common)?;
    let params = load_model(model)?;
    cfg.model = params.config.clone();
    let tok = load_tokenizer(tokenizer, &cfg)?;
    let c = read_corpus(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let items = label(&c.utterances, &c.lexicon, &tok)?;
    let (m, rows): (Metrics, Vec<DecodeRow>) = evaluate(&params, &items, &tok, &cfg.decode)?;
    write_text(&out.join("decode.tsv"), &decode_tsv(&rows))?;
    print_metrics("decoded", &m);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    common: &Common,
    data: &Path,
    tokenizer: &Path,
    systems: &str,
    alphas: &str,
    n_a2p: Option<&str>,
    seeds: &str,
) -> Outcome {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = out_dir(common)?;
    let tok = load_tokenizer(tokenizer, &cfg)?;
    let d = load_data(data, &tok)?;
    let grid = Grid {
        systems: systems
            .split(',')
            .map(|s| s.trim().parse::<System>().map_err(Failure::Usage))
            .collect::<Result<_, _>>()?,
        alphas: list("alpha", alphas)?,
        n_a2p: match n_a2p {
            Some(s) => list("split", s)?,
            None => vec![cfg.model.n_a2p],
        },
        seeds: list("seed", seeds)?,
    };
    let table = ablate(&cfg, &grid, &d.train, &d.clean, &d.reduced, &tok);
    for r in &table.results {
        if let Ok(rep) = &r.outcome {
            let c = r.cell;
            let dir = out
                .join("cells")
                .join(format!("{}_a{}_n{}_seed{}", c.system, c.alpha, c.n_a2p, c.seed));
            rep.write(&dir)?;
        }
    }
    write_text(&out.join("cells.tsv"), &table.cells_tsv())?;
    let summary = table.summary();
    write_text(&out.join("summary.tsv"), &summary)?;
    print!("{summary}");
    let failed = table.results.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} grid cells failed")));
    }
    Ok(())
}

fn mask_stats(common: &Common, p: Option<f64>, n: usize) -> Outcome {
    let cfg = load_config(common)?;
    let p = p.unwrap_or(cfg.augment.mask_p);
    if !(0.0..=1.0).contains(&p) {
        return Err(Failure::Usage(format!("--p {p} is outside [0, 1]")));
    }
    let ds_cfg = &cfg.data;
    let seed = cfg.seed;
    let base = generate_datasets(
        &pmmut::trainer::DataConfig {
            n_train: 0,
            n_test: 0,
            ..ds_cfg.clone()
        },
        cfg.model.feat_dim,
        seed,
    )?;
    let (mut phones, mut masked, mut chunk) = (0usize, 0usize, 0u64);
    while phones < n {
        let utts = generate_corpus(
            &base.inventory,
            &base.lexicon,
            1000,
            (ds_cfg.utt_min, ds_cfg.utt_max),
            ds_cfg.noise,
            derive_seed(seed, &[label_hash("mask-stats"), chunk]),
        )
        .map_err(TrainError::from)?;
        for (i, u) in utts.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label_hash("mask"), chunk, i as u64]));
            let (_, sel) = phone_mask_with_selection(&u.feats, &u.align, p, &mut rng).map_err(TrainError::from)?;
            phones += sel.len();
            masked += sel.iter().filter(|&&s| s).count();
            if phones >= n {
                break;
            }
        }
        chunk += 1;
    }
    let frac = masked as f64 / phones as f64;
    let half = Z99 * (p * (1.0 - p) / phones as f64).sqrt();
    let (lo, hi) = (p - half, p + half);
    let inside = (lo..=hi).contains(&frac);
    let line = format!("{p}\t{phones}\t{masked}\t{frac}\t{lo}\t{hi}\t{inside}\n");
    println!("p {p} phones {phones} masked {masked} fraction {frac:.5} 99% interval [{lo:.5}, {hi:.5}] inside {inside}");
    if let Some(dir) = &common.out {
        write_text(&dir.join("mask_stats.tsv"), &format!("p\tphones\tmasked\tfraction\tlow\thigh\tinside\n{line}"))?;
    }
    Ok(())
}

fn grad_check_cmd(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let mut lines = String::from("check\tentries\tmax_rel_error\tworst\n");
    let mut worst = 0.0f64;
    let reports = primitive_checks(cfg.seed, FD_STEP).map_err(|e| anyhow!(e))?;
    for (name, rep) in &reports {
        println!("{name:<24} max relative error {:.3e}", rep.max_rel_error);
        lines.push_str(&format!(
            "{name}\t{}\t{}\t{}[{}]\n",
            rep.entries(),
            rep.max_rel_error,
            rep.worst_param,
            rep.worst_index
        ));
        worst = worst.max(rep.max_rel_error);
    }
    let (rep, _) = model_grad_check(&ModelConfig::tiny(), TINY_FRAMES, cfg.seed, FD_STEP).map_err(|e| anyhow!(e))?;
    println!(
        "{:<24} max relative error {:.3e} ({} entries, worst {}[{}])",
        "tiny model",
        rep.max_rel_error,
        rep.entries(),
        rep.worst_param,
        rep.worst_index
    );
    lines.push_str(&format!(
        "tiny-model\t{}\t{}\t{}[{}]\n",
        rep.entries(),
        rep.max_rel_error,
        rep.worst_param,
        rep.worst_index
    ));
    worst = worst.max(rep.max_rel_error);
    if let Some(dir) = &common.out {
        write_text(&dir.join("grad_check.tsv"), &lines)?;
    }
    println!("max relative error {worst:.3e}");
    if worst >= GRAD_TOL {
        return Err(Failure::Runtime(anyhow!("max relative error {worst:.3e} is not below {GRAD_TOL:e}")));
    }
    Ok(())
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::GenData { common }
        | Command::TrainTokenizer { common, .. }
        | Command::Train { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Decode { common, .. }
        | Command::Ablate { common, .. }
        | Command::MaskStats { common, .. }
        | Command::GradCheck { common } => common,
    }
}

fn run(cli: Cli) -> Outcome {
    let c = common(&cli.command).clone();
    if let Some(j) = c.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    }
    match &cli.command {
        Command::GenData { .. } => gen_data(&c),
        Command::TrainTokenizer { data, .. } => train_tok(&c, data),
        Command::Train { data, tokenizer, .. } => train_cmd(&c, data, tokenizer),
        Command::Evaluate {
            model, data, tokenizer, ..
        } => evaluate_cmd(&c, model, data, tokenizer),
        Command::Decode {
            model,
            corpus,
            tokenizer,
            ..
        } => decode_cmd(&c, model, corpus, tokenizer),
        Command::Ablate {
            data,
            tokenizer,
            systems,
            alphas,
            n_a2p,
            seeds,
            ..
        } => ablate_cmd(&c, data, tokenizer, systems, alphas, n_a2p.as_deref(), seeds),
        Command::MaskStats { p, n, .. } => mask_stats(&c, *p, *n),
        Command::GradCheck { .. } => grad_check_cmd(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = TrainConfig::keys().join("\n  --");
    let help = format!("Config keys (usable as --set KEY=VALUE or --KEY VALUE):\n  --{keys}");
    let cmd = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let matches = match cmd.try_get_matches_from(expand_overrides(std::env::args().collect())) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

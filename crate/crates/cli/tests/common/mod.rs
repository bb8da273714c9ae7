#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small world for end-to-end runs: seconds rather than minutes.
pub const SMALL_CONFIG: &str = "\
data.phones = 6
data.words = 10
data.word_min = 2
data.word_max = 3
data.n_train = 48
data.n_test = 8
data.utt_min = 1
data.utt_max = 3
data.vocab = 24
model.feat_dim = 8
model.n_total = 3
model.n_a2p = 2
model.d_model = 16
model.heads = 2
model.ffn = 32
model.conv_kernel = 3
model.dec_layers = 1
model.v_phone = 7
model.v_wp = 24
optim.warmup = 20
train.batch_size = 8
train.epochs = 2
train.valid_fraction = 0.1
decode.beam = 3
";

pub fn pmmut<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_pmmut"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `dir`, keyed by its relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(d).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL_CONFIG).unwrap();
    p
}

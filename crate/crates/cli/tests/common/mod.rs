#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tnnsim_core::data::{encode_idx, IdxTensor, MNIST_FILES};

pub const BIN: &str = env!("CARGO_BIN_EXE_tnnsim");

pub fn tnnsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("TNNSIM_OUT_DIR")
        .env_remove("TNNSIM_MNIST_DIR")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tnnsim(dir, args);
    assert!(
        out.status.success(),
        "tnnsim {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small learnable 8x8 ten-class problem in MNIST file layout: class `k`
/// lights up row `k % 8` (and column `k / 8` for `k >= 8`), plus noise.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    let make = |n: usize, salt: usize| {
        let mut pixels = vec![0u8; n * 64];
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let k = (i * 7 + salt) % 10;
            labels[i] = k as u8;
            let img = &mut pixels[i * 64..(i + 1) * 64];
            for (j, p) in img.iter_mut().enumerate() {
                let (r, c) = (j / 8, j % 8);
                let on = r == k % 8 || (k >= 8 && c == k - 8);
                let noise = ((i * 31 + j * 17 + salt) % 23) as u8;
                *p = if on { 200 + noise } else { noise * 3 };
            }
        }
        (pixels, labels)
    };
    let (trp, trl) = make(train, 0);
    let (tep, tel) = make(test, 3);
    let files = [
        IdxTensor { dims: vec![train, 8, 8], data: trp },
        IdxTensor { dims: vec![train], data: trl },
        IdxTensor { dims: vec![test, 8, 8], data: tep },
        IdxTensor { dims: vec![test], data: tel },
    ];
    for (name, t) in MNIST_FILES.iter().zip(&files) {
        fs::write(dir.join(name), encode_idx(t)).unwrap();
    }
}

/// Quick configuration over the synthetic dataset in `data_dir`.
pub fn write_small_config(path: &Path, data_dir: &Path) {
    let text = format!(
        r#"[data]
dir = "{}"

[train]
arch = "d16"
epochs = 2
batch_size = 32

[array]
map_points = 12
sweep_points = 9
sweep_trials = 40
runs = 2

[faults]
ber_points = 3
runs = 2
"#,
        data_dir.display()
    );
    fs::write(path, text).unwrap();
}

/// Temporary directory holding a synthetic dataset and `small.toml`.
pub fn small_workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    write_synthetic_mnist(&data, 300, 60);
    let cfg = tmp.path().join("small.toml");
    write_small_config(&cfg, &data);
    (tmp, cfg)
}

/// CSV body with the provenance line removed.
pub fn payload(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let (first, rest) = text.split_once('\n').expect("provenance line");
    assert!(first.starts_with("# tnnsim "), "missing provenance in {}", path.display());
    rest.to_string()
}

/// Rows of a CSV body (header excluded), split on commas.
pub fn rows(path: &Path) -> Vec<Vec<String>> {
    payload(path)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saep::npy::tensor_to_npy;
use saep::{rand_uniform, Rng, SaepConfig, Tensor};

pub fn saep_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_saep"))
}

pub fn run(args: &[&str]) -> Output {
    saep_bin().args(args).output().expect("binary runs")
}

pub fn run_with_threads(args: &[&str], threads: usize) -> Output {
    saep_bin()
        .env("SAEP_THREADS", threads.to_string())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A config file, an initialized checkpoint and a `[K, N+1, C]` feature
/// file (with a leading CLS row) inside `dir`.
pub struct Fixture {
    pub config: PathBuf,
    pub params: PathBuf,
    pub features: PathBuf,
}

pub fn fixture(dir: &Path, config: &SaepConfig, seed: u64) -> Fixture {
    let config_path = dir.join("config.json");
    config.save(&config_path).unwrap();
    let params = dir.join("ckpt");
    let out = run(&[
        "init",
        "--config",
        path_str(&config_path),
        "--out",
        path_str(&params),
    ]);
    stdout_json(&out);
    let n = config.h * config.w + 1;
    let features = rand_uniform(&mut Rng::new(seed), &[config.k, n, config.c], -1.0, 1.0).unwrap();
    let features_path = dir.join("features.npy");
    tensor_to_npy(&features, &features_path).unwrap();
    Fixture {
        config: config_path,
        params,
        features: features_path,
    }
}

pub fn project(fx: &Fixture, out: &Path) -> Output {
    run(&[
        "project",
        "--features",
        path_str(&fx.features),
        "--params",
        path_str(&fx.params),
        "--config",
        path_str(&fx.config),
        "--out",
        path_str(out),
    ])
}

/// `images` sub-directories of `layers` random `[rows, dim]` dumps.
pub fn write_dumps(dir: &Path, images: usize, layers: usize, rows: usize, dim: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    for i in 0..images {
        let sub = dir.join(format!("image_{i:03}"));
        std::fs::create_dir_all(&sub).unwrap();
        for l in 1..=layers {
            let t: Tensor = rand_uniform(&mut rng, &[rows, dim], -1.0, 1.0).unwrap();
            tensor_to_npy(&t, sub.join(format!("layer_{l:02}.npy"))).unwrap();
        }
    }
}

#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lorashift_core::Matrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Product of Gaussian factors: exact rank `rank` with probability one.
pub fn low_rank(rows: usize, cols: usize, rank: usize, rng: &mut impl Rng) -> Matrix {
    gaussian(rows, rank, rng) * gaussian(rank, cols, rng)
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.amax()
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lorashift")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lorashift")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Writes `text` to `dir/name` and returns the path.
pub fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// One `[[modules]]` entry of a synth spec.
pub fn module_toml(name: &str, shape: (usize, usize), rank: usize, angle: f64) -> String {
    format!(
        "[[modules]]\nname = \"{name}\"\nshape = [{}, {}]\nrank_s = {rank}\nrank_t = {rank}\nangle = {angle:?}\n\n",
        shape.0, shape.1
    )
}

pub fn synth_toml(seed: u64, modules: &[String], adapter: Option<(usize, usize, usize, usize)>) -> String {
    let mut s = format!("seed = {seed}\n\n");
    if let Some((rank, par, perp, cross)) = adapter {
        s += &format!("[adapter]\nrank = {rank}\npar_rank = {par}\nperp_rank = {perp}\ncross_rank = {cross}\n\n");
    }
    for m in modules {
        s += m;
    }
    s
}

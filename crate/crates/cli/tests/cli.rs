mod support;

use std::path::{Path, PathBuf};

use lorashift_core::diagnostics::{PairingReport, TransferReport};
use lorashift_core::{AdapterSet, Matrix, TransferMode};
use support::{code, module_toml, path_str, run, synth_toml, write_file};

struct Bundle {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Bundle {
    fn new(modules: &[String], adapter: Option<(usize, usize, usize, usize)>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let spec = write_file(&root, "spec.toml", &synth_toml(5, modules, adapter));
        let out = run(&["synth", path_str(&spec), "--out", path_str(&root.join("data"))]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { _dir: dir, root }
    }

    fn data(&self, name: &str) -> String {
        path_str(&self.root.join("data").join(name)).to_string()
    }

    fn path(&self, name: &str) -> String {
        path_str(&self.root.join(name)).to_string()
    }

    fn job(&self, cmd: &str, extra: &[&str]) -> std::process::Output {
        let (s, t, a) = (self.data("source.safetensors"), self.data("target.safetensors"), self.data("adapter.safetensors"));
        let mut args = vec![cmd, "--source", &s, "--target", &t, "--adapter", &a];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn modules(angle: f64) -> Vec<String> {
    vec![
        module_toml("blocks.0.attn", (24, 20), 8, angle),
        module_toml("blocks.1.mlp", (20, 20), 6, angle),
        module_toml("blocks.2.out", (16, 24), 5, angle),
    ]
}

fn dense(path: &str) -> Vec<(String, Matrix)> {
    AdapterSet::load(path)
        .unwrap()
        .modules
        .iter()
        .map(|(k, m)| (k.clone(), m.delta()))
        .collect()
}

fn csv_column(path: &str, column: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn pair_identical_checkpoints_matches_every_module_to_itself() {
    let b = Bundle::new(&modules(0.0), None);
    let s = b.data("source.safetensors");
    let out_path = b.path("pairs.json");
    let out = run(&["pair", "--source", &s, "--target", &s, "--out", &out_path]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
    let report: PairingReport = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(report.pairs.len(), 3);
    for p in &report.pairs {
        assert_eq!(p.source, p.target);
        assert!((p.score.combined - 1.0).abs() < 1e-8);
    }
}

#[test]
fn synth_with_zero_angles_pairs_at_similarity_one() {
    let b = Bundle::new(&modules(0.0), None);
    let out_path = b.path("pairs.json");
    let (s, t) = (b.data("source.safetensors"), b.data("target.safetensors"));
    assert_eq!(code(&run(&["pair", "--source", &s, "--target", &t, "--out", &out_path])), 0);
    let report: PairingReport = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert!(report.pairs.iter().all(|p| (p.score.combined - 1.0).abs() < 1e-8));
}

#[test]
fn pair_below_threshold_exits_3() {
    let b = Bundle::new(&modules(1.5), Some((4, 2, 2, 0)));
    let out = b.job("pair", &["--out", &b.path("pairs.json")]);
    assert_eq!(code(&out), 3);
    let report: PairingReport = serde_json::from_slice(&std::fs::read(b.path("pairs.json")).unwrap()).unwrap();
    assert!(report.pairs.is_empty());
    assert_eq!(report.unmatched_sources.len(), 3);
}

#[test]
fn missing_file_exits_2() {
    let out = run(&["pair", "--source", "/nonexistent/a.safetensors", "--target", "/nonexistent/b", "--out", "/tmp/x.json"]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn identity_transfer_reproduces_adapter() {
    let b = Bundle::new(&modules(0.0), Some((8, 4, 4, 0)));
    let out_path = b.path("out.safetensors");
    let out = b.job("transfer", &["--out", &out_path, "--dtype", "f64", "--report", &b.path("r.json")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let input = dense(&b.data("adapter.safetensors"));
    let output = dense(&out_path);
    assert_eq!(input.len(), output.len());
    for ((name, a), (_, b)) in input.iter().zip(&output) {
        assert!((a - b).amax() < 1e-6, "{name}");
    }
    let set = AdapterSet::load(&out_path).unwrap();
    assert_eq!(set.metadata["prolora.mode"], "full");
    assert_eq!(set.metadata["prolora.rank"], "8");
}

#[test]
fn partial_modes_sum_to_full() {
    let b = Bundle::new(&modules(0.3), Some((8, 4, 4, 0)));
    let mut outputs = Vec::new();
    for mode in ["full", "subspace_only", "nullspace_only"] {
        let p = b.path(&format!("{mode}.safetensors"));
        let out = b.job("transfer", &["--out", &p, "--mode", mode, "--dtype", "f64", "--threshold", "0.5"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(dense(&p));
    }
    for ((name, full), ((_, sub), (_, null))) in outputs[0].iter().zip(outputs[1].iter().zip(&outputs[2])) {
        let diff = sub + null - full;
        assert!(diff.amax() < 1e-8, "{name}: {}", diff.amax());
    }
}

#[test]
fn threshold_one_on_noisy_pair_exits_3() {
    let b = Bundle::new(&modules(0.05), Some((4, 2, 2, 0)));
    let out_path = b.path("out.safetensors");
    let out = b.job("transfer", &["--out", &out_path, "--threshold", "1.0"]);
    assert_eq!(code(&out), 3);
    assert!(!Path::new(&out_path).exists());
}

#[test]
fn unmatched_modules_warn_and_are_omitted() {
    let mods = vec![
        module_toml("a", (24, 20), 8, 0.0),
        module_toml("b", (24, 20), 8, 1.5),
    ];
    let b = Bundle::new(&mods, Some((4, 2, 2, 0)));
    let out_path = b.path("out.safetensors");
    let report = b.path("report.json");
    let out = b.job("transfer", &["--out", &out_path, "--report", &report]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`b`"));
    let set = AdapterSet::load(&out_path).unwrap();
    assert_eq!(set.modules.keys().collect::<Vec<_>>(), ["a"]);
    let r: TransferReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.unmatched_sources, ["b"]);
}

#[test]
fn overrides_and_config_file() {
    let b = Bundle::new(&modules(0.0), Some((8, 4, 4, 0)));
    let config = write_file(
        &b.root,
        "job.toml",
        "mode = \"nullspace_only\"\nthreshold = 0.99\noverrides = [\"blocks.0.*=copy\"]\n",
    );
    let report = b.path("report.csv");
    let out = b.job(
        "transfer",
        &[
            "--config",
            path_str(&config),
            "--mode",
            "subspace_only",
            "--override",
            "blocks.2.*=factorwise",
            "--out",
            &b.path("o.safetensors"),
            "--report",
            &report,
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let modes: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(modes, ["copy", "subspace_only", "factorwise"]);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0.99")));
    let bad = write_file(&b.root, "bad.toml", "treshold = 0.5\n");
    assert_eq!(code(&b.job("transfer", &["--config", path_str(&bad), "--out", &b.path("x")])), 2);
    assert_eq!(code(&b.job("transfer", &["--mode", "sideways", "--out", &b.path("x")])), 2);
}

#[test]
fn analyze_residual_free_pure_cross_and_full_rank() {
    let b = Bundle::new(&modules(0.0), Some((8, 4, 4, 0)));
    let csv = b.path("a.csv");
    assert_eq!(code(&b.job("analyze", &["--report", &csv])), 0);
    assert!(csv_column(&csv, "residual_norm").iter().all(|v| *v < 1e-10));

    let cross = Bundle::new(&modules(0.0), Some((4, 0, 0, 2)));
    let csv = cross.path("a.csv");
    assert_eq!(code(&cross.job("analyze", &["--report", &csv])), 0);
    for col in ["par_norm", "perp_norm"] {
        assert!(csv_column(&csv, col).iter().all(|v| *v < 1e-10), "{col}");
    }
    assert!(csv_column(&csv, "residual_norm").iter().all(|v| *v > 1e-3));

    let full = Bundle::new(&[module_toml("sq", (16, 16), 16, 0.0)], Some((8, 8, 0, 0)));
    let csv = full.path("a.csv");
    assert_eq!(code(&full.job("analyze", &["--report", &csv])), 0);
    assert_eq!(csv_column(&csv, "perp_norm"), [0.0]);
}

#[test]
fn synth_is_deterministic_and_rejects_infeasible_specs() {
    let a = Bundle::new(&modules(0.4), Some((8, 4, 4, 0)));
    let b = Bundle::new(&modules(0.4), Some((8, 4, 4, 0)));
    for f in ["source.safetensors", "target.safetensors", "adapter.safetensors", "truth.json"] {
        assert_eq!(std::fs::read(a.data(f)).unwrap(), std::fs::read(b.data(f)).unwrap(), "{f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let spec = write_file(dir.path(), "s.toml", &synth_toml(1, &[module_toml("m", (12, 10), 10, 0.5)], None));
    let out = run(&["synth", path_str(&spec), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn transfer_mode_names_round_trip() {
    for m in TransferMode::ALL {
        assert_eq!(m.to_string().parse::<TransferMode>().unwrap(), m);
    }
}

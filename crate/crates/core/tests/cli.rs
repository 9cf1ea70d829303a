//! End-to-end runs of the `mct` binary on a small configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mct::cli::RunConfig;
use mct::distill::SyntheticDataset;
use mct::store;

const SMALL: &str = r#"
[dataset]
classes = 3
dim = 4
train_per_class = 40
val_per_class = 20

[model]
hidden_widths = [8]

[expert]
epochs = 4
num_experts = 2
batch_size = 16
lr = 0.1

[distill]
max_start_epoch = 2.0
outer_iters = 20
eval_every = 10
eval_repeats = 2
eval_train_iters = 50
"#;

fn mct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mct")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mct(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        Fixture { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn experts(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["gen-experts", "--config", s(&self.config), "--out", s(&out)]);
        out
    }
}

#[test]
fn gen_experts_writes_buffers_and_manifest_deterministically() {
    let f = Fixture::new();
    let a = f.experts("a");
    let b = f.experts("b");
    let manifest = mct::cli::Manifest::read(&a).unwrap();
    assert_eq!(manifest.experts.len(), 2);
    for e in &manifest.experts {
        let bytes = std::fs::read(a.join(&e.file)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(&e.file)).unwrap());
        assert_eq!(bytes.len() as u64, e.bytes);
        assert_eq!(store::read_buffer(a.join(&e.file)).unwrap().epochs(), 4);
    }
    let echoed = RunConfig::from_toml(&std::fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.expert.epochs, 4);
    assert_eq!(echoed.model.hidden_widths, vec![8]);
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let f = Fixture::new();
    let code = |args: &[&str]| mct(args).status.code();
    assert_eq!(code(&["gen-experts", "--epochs", "0", "--out", s(&f.path("z"))]), Some(2));
    assert_eq!(code(&["gen-experts", "--bogus"]), Some(2));
    assert_eq!(code(&["distill", "--experts", s(&f.path("missing")), "--out", s(&f.path("o"))]), Some(1));
    let bad = f.path("bad.toml");
    std::fs::write(&bad, "[distill]\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&["gen-experts", "--config", s(&bad), "--out", s(&f.path("o"))]), Some(2));
    let exp = f.experts("e");
    assert_eq!(code(&["convexify", "--in", s(&exp), "--anchors", "0,9,K", "--out", s(&f.path("c"))]), Some(2));
    assert_eq!(code(&["convexify", "--in", s(&exp), "--anchors", "zero,K", "--out", s(&f.path("c"))]), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_mct"))
        .env(mct::cli::THREADS_ENV, "0")
        .args(["storage", "--mtt", "a", "--conv", "b"])
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn convexify_prints_ratios_and_honours_anchor_strings() {
    let f = Fixture::new();
    let exp = f.experts("e");
    let out = ok(&["convexify", "--in", s(&exp), "--out", s(&f.path("c2"))]);
    assert_eq!(out.lines().filter(|l| l.contains("ratio")).count(), 2);
    let t = store::read_convex(f.path("c2").join("expert_000.mctb")).unwrap();
    assert_eq!(t.anchors(), &[0, 4]);
    ok(&["convexify", "--in", s(&exp), "--anchors", "0,2,K", "--out", s(&f.path("c3"))]);
    let t = store::read_convex(f.path("c3").join("expert_000.mctb")).unwrap();
    assert_eq!(t.anchors(), &[0, 2, 4]);
    let storage = ok(&["storage", "--mtt", s(&exp.join("expert_000.mttb")), "--conv", s(&f.path("c3").join("expert_000.mctb"))]);
    assert!(storage.contains("\"ratio\""));
}

#[test]
fn zero_iterations_leave_the_initialization() {
    let f = Fixture::new();
    let exp = f.experts("e");
    let out = f.path("d0");
    ok(&["distill", "--experts", s(&exp), "--mode", "mtt", "--iters", "0", "--seed", "5", "--out", s(&out)]);
    let got = store::read_synthetic(out.join("synthetic.synd")).unwrap();
    let (train, _) = RunConfig::from_toml(SMALL).unwrap().dataset.load().unwrap();
    assert_eq!(got, SyntheticDataset::from_real(&train, 1, 0.1, 5).unwrap());
}

#[test]
fn flags_override_the_config_file_and_runs_merge_into_a_table() {
    let f = Fixture::new();
    let exp = f.experts("e");
    let conv = f.path("c");
    ok(&["convexify", "--in", s(&exp), "--out", s(&conv)]);
    let cfg2 = f.path("ipc2.toml");
    std::fs::write(&cfg2, format!("{SMALL}ipc = 2\n")).unwrap();
    let runs = [
        ("mct", vec!["--experts", s(&conv)]),
        ("mtt", vec!["--experts", s(&exp), "--mode", "mtt", "--config", s(&cfg2), "--ipc", "1"]),
        ("disc", vec!["--experts", s(&conv), "--no-continuous"]),
    ];
    let mut dirs = Vec::new();
    for (name, extra) in &runs {
        let out = f.path(name);
        let mut args = vec!["distill", "--out", s(&out)];
        args.extend(extra.iter().copied());
        ok(&args);
        let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
        assert!(report.starts_with("iteration,loss,alpha_S,eval_accuracy\n"));
        assert_eq!(report.lines().count(), 1 + 20 + 1);
        dirs.push(out);
    }
    let echoed = RunConfig::from_toml(&std::fs::read_to_string(dirs[1].join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.distill.ipc, 1);
    assert!(!RunConfig::from_toml(&std::fs::read_to_string(dirs[2].join("config.toml")).unwrap()).unwrap().distill.continuous_sampling);

    let table = f.path("table.csv");
    let mut args = vec!["report", "--out", s(&table), "--inputs"];
    args.extend(dirs.iter().map(|d| s(d)));
    ok(&args);
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], mct::cli::TABLE_HEADER);
    assert!(rows[1].starts_with("mct,1,") && rows[2].starts_with("mtt,1,") && rows[3].starts_with("mct-discrete,1,"));
    for r in &rows[1..] {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert!(cols[4].parse::<usize>().is_ok() || cols[4] == mct::cli::NOT_CONVERGED, "convergence column in {r}");
    }
}

#[test]
fn sweeping_m_emits_one_report_each() {
    let f = Fixture::new();
    let exp = f.experts("e");
    for m in ["1", "2", "3"] {
        let out = f.path(&format!("m{m}"));
        ok(&["distill", "--experts", s(&exp), "--M", m, "--iters", "5", "--max-start", "1", "--out", s(&out)]);
        assert!(out.join("report.csv").exists());
        let cfg = RunConfig::from_toml(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
        assert_eq!(cfg.distill.expert_steps.to_string(), m);
    }
}

#[test]
fn eval_reports_zero_std_for_one_repeat_and_is_deterministic() {
    let f = Fixture::new();
    let exp = f.experts("e");
    let out = f.path("d");
    ok(&["distill", "--experts", s(&exp), "--iters", "3", "--out", s(&out)]);
    let synd = out.join("synthetic.synd");
    let args = ["eval", "--config", s(&f.config), "--synthetic", s(&synd), "--repeats", "1", "--train-iters", "20", "--baseline"];
    let first = ok(&args);
    assert!(first.contains("± 0.0000 over 1 repeats"), "{first}");
    assert_eq!(first, ok(&args));
    let pca = f.path("pca.csv");
    ok(&["pca", "--experts", s(&exp), "--out", s(&pca)]);
    let text = std::fs::read_to_string(&pca).unwrap();
    assert!(text.starts_with("index,pc1,pc2,one_minus_val_acc\n"));
    assert_eq!(text.lines().count(), 1 + 5);
}

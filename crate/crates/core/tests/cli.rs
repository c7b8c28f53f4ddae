use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = "
[run]
seed = 4
[dataset]
n_ue = 20
snapshots_per_ue = 4
val_ue = 3
test_ue = 3
[eval]
densities = 8/8, 2/8
snr_db = 10
[model]
d_model = 16
d_ff = 16
n_h = 2
n_sa = 1
n_ta = 1
[train]
batch_size = 8
iterations = 10
val_interval = 5
[transfer]
enabled = true
";

fn dacen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacen")).args(args).env("DACEN_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dacen(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_baseline_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(&["generate", "--n-ue", "20", "--snapshots", "4", "--val-ue", "3", "--test-ue", "3", "--seed", "1", "--out", p(&ds)]);
    assert!(ds.join("manifest.txt").exists());

    let ls = ok(&["baseline", "--method", "ls", "--density", "2/8", p(&ds)]);
    assert!(ls.contains("NMSE"), "{ls}");
    let bad = dacen(&["baseline", "--method", "omp", "--density", "2/8", p(&ds)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("omp"));

    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMOKE).unwrap();
    let model = dir.path().join("m");
    ok(&["train", "--config", p(&cfg), "--dataset", p(&ds), "--density", "4/8", "--out", p(&model)]);
    assert!(model.join("model.dack").exists() && model.join("trainlog.csv").exists());

    let ev = dir.path().join("ev");
    let arg = format!("net={}", p(&model.join("model.dack")));
    let csv = ok(&["--deterministic", "eval", "--dataset", p(&ds), "--model", &arg, "--snr-db", "5,15", "--out", p(&ev)]);
    assert!(csv.starts_with("method,density,snr_db,nmse_db,n_samples,seed\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(ev.join("nmse-4of8.svg").exists());
}

#[test]
fn transfer_writes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(&["generate", "--n-ue", "20", "--snapshots", "4", "--val-ue", "3", "--test-ue", "3", "--out", p(&ds)]);
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMOKE).unwrap();
    let out = dir.path().join("tf");
    let c = p(&cfg);
    ok(&["transfer", "--source-dataset", p(&ds), "--r0", "1", "--spacing", "4", "--n-low", "2", "--sth", "0.5"]
        .into_iter()
        .chain(["--source-config", c, "--target-config", c, "--out", p(&out)])
        .collect::<Vec<_>>());
    let w = std::fs::read_to_string(out.join("weights.csv")).unwrap();
    assert!(w.starts_with("sample,origin,score,included\n"));
    assert!(out.join("target.dack").exists());
}

#[test]
fn complexity_table() {
    let text = ok(&["complexity", "--variant", "full"]);
    assert!(text.contains("17014016"), "{text}");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    ok(&["complexity", "--convention", "paper", "--csv", p(&csv)]);
    assert!(std::fs::read_to_string(csv).unwrap().starts_with("section,label,flops"));
}

#[test]
fn run_is_reproducible_and_guards_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.cfg");
    std::fs::write(&cfg, SMOKE).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--deterministic", "run", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["run", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());

    std::fs::write(&cfg, SMOKE.replace("seed = 4", "seed = 5")).unwrap();
    let clash = dacen(&["run", "--config", p(&cfg), "--out", p(&a)]);
    assert!(!clash.status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = dacen::harness::ConfigText::load(&path).unwrap();
        let cfg = dacen::harness::ExperimentConfig::from_text(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.transfer.is_some(), "{}", path.display());
        n += 1;
    }
    assert!(n >= 3);
}

use std::path::{Path, PathBuf};
use std::process::Command;

use csnn_cli::config::ExperimentConfig;
use csnn_cli::data::prepare;
use csnn_cli::export::decode_pnm;
use csnn_cli::report::read_report;
use csnn_cli::run::{cmd_train, read_probe_csv};
use csnn_cli::trace::RunTrace;
use csnn_core::network::encode;
use csnn_core::probes::{train_probe, ProbeSpec};
use csnn_core::rng::{Component, SeedSplitter};
use csnn_core::{snapshot, Ablation, Csnn};
use rand::seq::SliceRandom;

const CONFIG: &str = r#"
version = 1
seed = 11
output = "run"

[dataset]
kind = "synthetic"
side = 12
channels = 3
classes = 4
pretext_samples = 120
probe_samples = 160
eval_samples = 40
test_samples = 40

[network]
preset = "custom"

[[network.layers]]
heads = 2
grid = [3, 3]
mask = "input"
delta = 1.0
steps = 60

[[network.layers]]
heads = 2
grid = [3, 3]
mask = "channel"
delta = 1.5
steps = 60

[checkpoints]
steps = [0, 30, 60, 90, 120]

[[probe]]
preset = "fc"
epochs = 6

[[probe]]
preset = "fc"
kfold = 3
epochs = 4
"#;

fn csnn(dir: &Path, args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csnn"));
    cmd.current_dir(dir).args(args);
    match threads {
        Some(t) => cmd.env("CSNN_THREADS", t),
        None => cmd.env_remove("CSNN_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn ok(out: std::process::Output) -> String {
    assert!(
        out.status.success(),
        "csnn failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
    dir
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn train_probe_report_and_export() {
    let dir = setup(CONFIG);
    let d = dir.path();
    ok(csnn(d, &["train", "-c", "cfg.toml"], None));
    let listing = ok(csnn(d, &["probe", "-r", "run"], None));
    assert_eq!(listing.lines().count(), 10);

    let trace = RunTrace::load(&d.join("run")).unwrap();
    assert_eq!(trace.checkpoints.len(), 5);
    for c in &trace.checkpoints {
        assert_eq!(c.probes["fc-k3-e4"].folds.len(), 3);
        assert!(c.probes["fc-e6"].test_accuracy.is_some());
        assert!(c.utilization.iter().all(|&u| u > 0.0 && u <= 1.0));
        for f in &c.probes["fc-e6"].folds {
            let t = read_probe_csv(&d.join("run").join(&f.trace)).unwrap();
            assert_eq!(t.summary(), f.summary);
        }
    }

    // a run with several probes needs an explicit choice
    assert_eq!(csnn(d, &["metrics", "-r", "run"], None).status.code(), Some(2));
    ok(csnn(d, &["metrics", "-r", "run", "--probe", "fc-k3-e4"], None));
    let curves = d.join("run/reports/fc-k3-e4/curves");
    let external: Vec<String> = ["pretext.csv", "target-fold-0.csv", "target-fold-1.csv", "target-fold-2.csv"]
        .iter()
        .map(|f| curves.join(f).display().to_string())
        .collect();
    let mut args = vec!["metrics", "--curves"];
    args.extend(external.iter().map(String::as_str));
    args.extend(["-o", "ext"]);
    ok(csnn(d, &args, None));
    let internal = read_report(&d.join("run/reports/fc-k3-e4")).unwrap();
    assert_eq!(read_report(&d.join("ext")).unwrap(), internal);
    assert_eq!(internal.folds, 3);
    assert_eq!(
        std::fs::read(d.join("ext/report.tsv")).unwrap(),
        std::fs::read(d.join("run/reports/fc-k3-e4/report.tsv")).unwrap()
    );

    for layer in ["0", "1"] {
        ok(csnn(d, &["export", "bmu", "-r", "run", "--layer", layer, "-o", "img"], None));
    }
    let (w, h, c, _) = decode_pnm(&std::fs::read(d.join("img/bmu-layer0.ppm")).unwrap(), Path::new("x")).unwrap();
    assert_eq!((w, h, c), (12, 12, 3));
    let (w, h, c, _) = decode_pnm(&std::fs::read(d.join("img/bmu-layer1.ppm")).unwrap(), Path::new("x")).unwrap();
    assert_eq!((w, h, c), (6, 6, 3));
    assert_eq!(csnn(d, &["export", "bmu", "-r", "run", "--layer", "2"], None).status.code(), Some(2));

    let written = ok(csnn(d, &["export", "stats", "-r", "run", "-o", "stats"], None));
    assert!(written.contains("class_l1.tsv"));
    let util = std::fs::read_to_string(d.join("stats/utilization.tsv")).unwrap();
    for line in util.lines().skip(1) {
        let u: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(u > 0.0 && u <= 1.0, "{line}");
    }
    for k in 0..4 {
        let (w, h, c, _) = decode_pnm(&std::fs::read(d.join(format!("stats/class-{k}.pgm"))).unwrap(), Path::new("x")).unwrap();
        assert_eq!((w, h, c), (3, 6, 1));
    }
}

#[test]
fn runs_are_identical_across_thread_counts() {
    let dir = setup(CONFIG);
    let d = dir.path();
    for (out, threads) in [("a", "1"), ("b", "3")] {
        ok(csnn(d, &["train", "-c", "cfg.toml", "-o", out], Some(threads)));
        ok(csnn(d, &["probe", "-r", out], Some(threads)));
    }
    let (a, b) = (d.join("a"), d.join("b"));
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in files.iter().filter(|f| f.as_path() != Path::new("config.toml")) {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = setup(&CONFIG.replace("seed = 11\n", ""));
    let d = dir.path();
    let out = csnn(d, &["train", "-c", "cfg.toml"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    assert_eq!(csnn(d, &["probe", "-r", "missing"], None).status.code(), Some(3));
    std::fs::write(d.join("p.csv"), "step,value\n0,1\n").unwrap();
    std::fs::write(d.join("t.csv"), "step,value\n0,1\nx,y\n").unwrap();
    assert_eq!(csnn(d, &["metrics", "--curves", "p.csv", "t.csv"], None).status.code(), Some(3));
    assert_eq!(csnn(d, &["oracle"], Some("zero")).status.code(), Some(2));
}

#[test]
fn zero_step_intervals_leave_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("steps = 60", "steps = 0").replace("steps = [0, 30, 60, 90, 120]", "steps = [0]");
    let mut cfg = ExperimentConfig::parse(&text, Path::new("cfg.toml")).unwrap();
    cfg.resolve_paths(dir.path());
    let trace = cmd_train(&cfg).unwrap();
    let shape = trace.input_shape;
    let init = Csnn::init(&cfg.network_spec().unwrap(), shape, Ablation::None, 11).unwrap();
    let stored = std::fs::read(cfg.output.join(&trace.checkpoints[0].snapshot)).unwrap();
    assert_eq!(stored, snapshot::to_bytes(&init));
}

#[test]
fn shuffled_labels_give_chance_accuracy_on_learned_representations() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG
        .replace("probe_samples = 160", "probe_samples = 400")
        .replace("eval_samples = 40", "eval_samples = 400");
    let mut cfg = ExperimentConfig::parse(&text, Path::new("cfg.toml")).unwrap();
    cfg.resolve_paths(dir.path());
    let trace = cmd_train(&cfg).unwrap();
    let model = snapshot::load(&cfg.output.join(&trace.checkpoints.last().unwrap().snapshot)).unwrap();
    let data = prepare(&cfg.dataset, 11).unwrap();
    let train = encode(&data.probe.images, &model, Ablation::None, 11).unwrap();
    let eval = encode(&data.eval.images, &model, Ablation::None, 11).unwrap();
    let mut labels = data.probe.labels.clone();
    labels.shuffle(&mut SeedSplitter::new(2).rng(Component::DataSplit, 0));
    let spec = ProbeSpec {
        epochs: 20,
        batch_size: 32,
        ..ProbeSpec::fc()
    };
    let r = train_probe(&train, &labels, &eval, &data.eval.labels, &spec, 4, 3).unwrap();
    // chance 25% on 400 samples: σ ≈ 2.17 points
    let acc = *r.trace.eval_accuracy.last().unwrap();
    let sigma = 100.0 * (0.25f64 * 0.75 / 400.0).sqrt();
    assert!((acc - 25.0).abs() <= 3.0 * sigma, "accuracy {acc}");
}

#[test]
fn zero_learning_rates_only_estimate_batch_norm() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG.replace("steps = 60\n", "steps = 60\nsom_lr = 0.0\nmask_lr = 0.0\n");
    let mut cfg = ExperimentConfig::parse(&text, Path::new("cfg.toml")).unwrap();
    cfg.resolve_paths(dir.path());
    let trace = cmd_train(&cfg).unwrap();
    let init = Csnn::init(&cfg.network_spec().unwrap(), trace.input_shape, Ablation::None, 11).unwrap();
    let last = snapshot::load(&cfg.output.join(&trace.checkpoints.last().unwrap().snapshot)).unwrap();
    for (a, b) in init.layers.iter().zip(&last.layers) {
        assert_eq!(a.heads, b.heads);
        assert_ne!(a.bn, b.bn);
    }
    assert!(trace.checkpoints.iter().skip(1).all(|c| c.weight_change == Some(0.0)));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(!cfg.checkpoint_steps().unwrap().is_empty());
            n += 1;
        }
    }
    assert!(n >= 3);
}

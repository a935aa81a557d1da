//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria that need CIFAR-10 read it from `CSNN_CIFAR10_DIR` (default
//! `data/cifar-10-batches-bin` under the workspace root). Without the data
//! they report FAIL with the reason; such blocked criteria do not fail the
//! process unless `CSNN_ACCEPTANCE_STRICT=1`. The multi-hour full
//! reproduction additionally needs `CSNN_ACCEPTANCE_FULL=1`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use csnn_cli::config::{ExperimentConfig, ProbeConfig};
use csnn_cli::data::cifar10_available;
use csnn_cli::run::{cmd_probe, cmd_train, CheckpointSelector};
use csnn_cli::trace::RunTrace;
use csnn_core::datasets::{normalize_inplace, synthetic, write_cifar_binary, CifarVariant, Split};
use csnn_core::masks::{mask_batch_update, BaseRule, InputModification, MaskAveraging, MaskGate, MaskRuleConfig};
use csnn_core::metrics::{csm3, fold_aggregate, mm3, msm3, msm3_max, ofm_series, Extended, MetricCurve, Orientation};
use csnn_core::network::NetworkSpec;
use csnn_core::oracle::{probe_gradient_check, sconv_equivalence};
use csnn_core::rng::{Component, SeedSplitter};
use csnn_core::sconv::{forward, BmuMap};
use csnn_core::tensor::extract_patches;
use csnn_core::{Ablation, ConvGeometry, Csnn, MaskKind, NeuronMasks, Padding, Result, SomMap, Tensor};
use rand::Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SHOTS: [usize; 6] = [1, 2, 5, 10, 20, 50];

enum Status {
    Pass,
    Fail,
    /// Could not be evaluated; the string says why.
    Blocked(String),
}

struct Outcome {
    id: u32,
    title: &'static str,
    status: Status,
    detail: String,
    gating: bool,
}

impl Outcome {
    fn judged(id: u32, title: &'static str, passed: bool, detail: String) -> Self {
        Outcome {
            id,
            title,
            status: if passed { Status::Pass } else { Status::Fail },
            detail,
            gating: true,
        }
    }

    fn blocked(id: u32, title: &'static str, reason: String) -> Self {
        Outcome {
            id,
            title,
            status: Status::Blocked(reason),
            detail: String::new(),
            gating: true,
        }
    }

    fn from_result(id: u32, title: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Outcome::judged(id, title, passed, detail),
            Err(e) => Outcome::judged(id, title, false, format!("error: {e}")),
        }
    }

    fn print(&self) {
        let (word, detail) = match &self.status {
            Status::Pass => ("PASS", self.detail.clone()),
            Status::Fail => ("FAIL", self.detail.clone()),
            Status::Blocked(why) => ("FAIL", format!("not evaluated: {why}")),
        };
        let stretch = if self.gating { "" } else { " (stretch, not gating)" };
        println!("{word} [{:>2}] {}{stretch}: {detail}", self.id, self.title);
    }
}

fn rng(seed: u64, index: u64) -> impl Rng {
    SeedSplitter::new(seed).rng(Component::DataOrder, index)
}

// --- 1 ---------------------------------------------------------------------

fn oracle_equivalence() -> Result<(bool, String)> {
    let t = Instant::now();
    let check = sconv_equivalence(50, 2024)?;
    let secs = t.elapsed().as_secs_f64();
    Ok((
        check.passed && check.max_error <= 1e-5 && secs < 10.0,
        format!("{} cases, max relative error {:.2e}, {secs:.2} s", check.cases, check.max_error),
    ))
}

// --- 2 ---------------------------------------------------------------------

fn unit_norm_invariant() -> Result<(bool, String)> {
    let steps = 1000u64;
    let mut data = synthetic(200, 32, 3, 10, 7, Split::Train)?;
    normalize_inplace(&mut data, None)?;
    let spec = NetworkSpec::d_csnn(steps.div_ceil(3));
    let mut model = Csnn::init(&spec, (32, 32, 3), Ablation::None, 7)?;
    let sample = 32 * 32 * 3;
    let mut worst = 0.0f64;
    let mut layers_trained = std::collections::BTreeSet::new();
    for s in 0..steps as usize {
        let i = s % data.len();
        if let Some(r) = model.train_step(&data.images.data()[i * sample..(i + 1) * sample], 1)? {
            layers_trained.insert(r.layer);
        }
        for layer in &model.layers {
            for head in &layer.heads {
                for n in 0..head.map.len() {
                    let norm = head.map.weight(n).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                    worst = worst.max((norm - 1.0).abs());
                }
            }
        }
    }
    Ok((
        worst <= 1e-5 && layers_trained.len() == spec.layers.len(),
        format!("{steps} steps over {} layers, max |norm - 1| = {worst:.2e}", layers_trained.len()),
    ))
}

// --- 3 ---------------------------------------------------------------------

/// Batches of 3×3 patches from a fixed stream of random unit-variance images.
fn patch_stream(step: u64) -> Result<csnn_core::PatchGrid> {
    let mut r = rng(303, step);
    let data = (0..8 * 8 * 3).map(|_| r.random_range(-1.7f32..1.7)).collect();
    let image = Tensor::new(vec![8, 8, 3], data)?;
    extract_patches(&image, ConvGeometry::new((3, 3), (1, 1), Padding::Same))
}

fn bmu_gate(map: &SomMap, masks: &NeuronMasks, patches: &csnn_core::PatchGrid) -> Result<Vec<Option<usize>>> {
    let act = forward(patches, map, Some(masks))?;
    Ok(BmuMap::from_activations(&act)?.indices.into_iter().map(Some).collect())
}

fn frobenius(m: &NeuronMasks) -> f64 {
    m.values().iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

fn mask_rule_stability() -> Result<(bool, String)> {
    let steps = 1000u64;
    let lr = 0.005;
    let oja = MaskRuleConfig::oja_prefix_masks();
    let hebb = MaskRuleConfig {
        base_rule: BaseRule::Hebb,
        input_mod: InputModification::AllMasks,
        gamma: 0.0,
        averaging: MaskAveraging::AllPatches,
    };
    let mut init = rng(304, 0);
    let map = SomMap::random(4, 4, 27, &mut init);
    let mut oja_extreme = 0.0f64;
    let mut hebb_monotone = true;
    let mut hebb_growth = Vec::new();
    for kind in [MaskKind::Input, MaskKind::Channel] {
        let dim = if kind == MaskKind::Input { 27 } else { 3 };
        let start = NeuronMasks::random(kind, 16, dim, &mut init);
        let (mut dense, mut gated, mut plain) = (start.clone(), start.clone(), start.clone());
        let mut last = frobenius(&plain);
        let first = last;
        for step in 0..steps {
            let patches = patch_stream(step)?;
            mask_batch_update(&mut dense, &patches, MaskGate::Dense, &oja, lr)?;
            let gate = bmu_gate(&map, &gated, &patches)?;
            mask_batch_update(&mut gated, &patches, MaskGate::PerPatch(&gate), &oja, lr)?;
            mask_batch_update(&mut plain, &patches, MaskGate::Dense, &hebb, lr)?;
            for m in [&dense, &gated] {
                oja_extreme = m.values().iter().fold(oja_extreme, |a, &v| a.max((v as f64).abs()));
            }
            let norm = frobenius(&plain);
            hebb_monotone &= norm > last;
            last = norm;
        }
        hebb_growth.push(last / first);
    }
    Ok((
        oja_extreme <= 2.0 && hebb_monotone,
        format!(
            "Oja max |m| = {oja_extreme:.3} over {steps} steps; plain Hebb norm strictly increasing: {hebb_monotone} \
             (growth x{:.3e} input, x{:.3e} channel)",
            hebb_growth[0], hebb_growth[1]
        ),
    ))
}

// --- 4 ---------------------------------------------------------------------

fn probe_gradients() -> Result<(bool, String)> {
    let t = Instant::now();
    let checks = probe_gradient_check(404)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_error).fold(0.0, f64::max);
    let all = checks.iter().all(|c| c.passed && c.max_error <= 1e-4);
    Ok((
        all && secs < 30.0,
        format!("{} probe families, max relative error {worst:.2e}, {secs:.2} s", checks.len()),
    ))
}

// --- 5 ---------------------------------------------------------------------

fn random_curve(r: &mut impl Rng, len: usize, orientation: Orientation) -> Result<MetricCurve> {
    let values = (0..len).map(|_| r.random_range(0.0..10.0)).collect();
    MetricCurve::new((0..len as u64).map(|s| s * 10).collect(), values, orientation)
}

fn fold_properties() -> Result<(bool, String)> {
    let mut r = rng(505, 0);
    let (mut worst_linear, mut violations, mut strict) = (0.0f64, 0usize, 0usize);
    for _ in 0..200 {
        let len = r.random_range(2..30);
        let k = r.random_range(2..8);
        let orientation = if r.random_bool(0.5) {
            Orientation::LowerBetter
        } else {
            Orientation::HigherBetter
        };
        let pretext = random_curve(&mut r, len, orientation)?;
        let folds = (0..k)
            .map(|_| random_curve(&mut r, len, orientation))
            .collect::<Result<Vec<_>>>()?;
        let mean = fold_aggregate(&folds)?;
        let mut per_fold = 0.0;
        let mut soft = 0.0;
        for f in &folds {
            per_fold += mm3(f, &pretext)? / k as f64;
            soft += msm3(f) / k as f64;
        }
        worst_linear = worst_linear.max((mm3(&mean, &pretext)? - per_fold).abs());
        let of_mean = msm3(&mean);
        if of_mean > soft + 1e-12 {
            violations += 1;
        }
        if of_mean < soft - 1e-9 {
            strict += 1;
        }
    }
    Ok((
        worst_linear <= 1e-9 && violations == 0 && strict > 0,
        format!(
            "200 fold sets: max |MM3(mean) - mean(MM3)| = {worst_linear:.1e}, \
             MSM3(mean) > mean(MSM3) in {violations}, strict in {strict}"
        ),
    ))
}

// --- 6 ---------------------------------------------------------------------

fn metric_hand_values() -> Result<(bool, String)> {
    let lower = |v: &[f64]| MetricCurve::from_values(v.to_vec(), Orientation::LowerBetter);
    let a = ofm_series(&lower(&[10.0, 6.0, 5.0, 7.0])?)?;
    let series: Vec<Option<f64>> = a.series.iter().map(|v| v.finite()).collect();
    let close = |x: Option<f64>, y: f64| x.is_some_and(|x| (x - y).abs() < 1e-9);
    let hand = series.len() == 4
        && [0.0, 0.0, 0.0, 40.0].iter().zip(&series).all(|(&want, &got)| close(got, want))
        && close(a.mean_ofm.finite(), 10.0)
        && close(a.c_ofm.finite(), 40.0);
    let b = ofm_series(&lower(&[5.0, 5.0, 6.0])?)?;
    let infinite = b.mean_ofm == Extended::Infinite;

    let mut r = rng(606, 0);
    let mut bad = 0;
    for _ in 0..1000 {
        let len = r.random_range(1..40);
        let orientation = if r.random_bool(0.5) {
            Orientation::LowerBetter
        } else {
            Orientation::HigherBetter
        };
        let c = random_curve(&mut r, len, orientation)?;
        if !(msm3_max(&c) >= csm3(&c) && csm3(&c) >= 0.0) {
            bad += 1;
        }
    }
    Ok((
        hand && infinite && bad == 0,
        format!(
            "[10,6,5,7] -> OFM {series:?}, MOFM {}, cOFM {}; [5,5,6] -> MOFM {}; \
             mSM3 >= cSM3 >= 0 violated on {bad}/1000 random curves",
            a.mean_ofm, a.c_ofm, b.mean_ofm
        ),
    ))
}

// --- 7, 8, 9, 11: the desk-scale CIFAR-10 experiment -------------------------

struct DeskScale {
    pretext: usize,
    steps_per_layer: u64,
    probe: usize,
    eval: usize,
    test: usize,
    epochs: Option<usize>,
    shots: &'static [usize],
}

const DESK: DeskScale = DeskScale {
    pretext: 2000,
    steps_per_layer: 2000,
    probe: 5000,
    eval: 1000,
    test: 1000,
    epochs: None,
    shots: &SHOTS,
};

/// Reduced variant of the desk experiment used for the determinism check
/// when CIFAR-10 is not available.
const SMALL: DeskScale = DeskScale {
    pretext: 150,
    steps_per_layer: 150,
    probe: 300,
    eval: 100,
    test: 100,
    epochs: Some(5),
    shots: &[2],
};

/// Arms of the mask ablation comparison.
#[derive(Clone, Copy)]
enum Arm {
    TrainedMasks,
    NoMasks,
    /// Trained SOM, masks frozen at their random initialization.
    RandomMasks,
    /// Nothing learned: random SOM and random masks; only the batch-norm
    /// statistics are estimated during the training pass.
    Untrained,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::TrainedMasks => "trained",
            Arm::NoMasks => "no-masks",
            Arm::RandomMasks => "random-masks",
            Arm::Untrained => "untrained",
        }
    }

    fn ablation(self) -> &'static str {
        match self {
            Arm::TrainedMasks | Arm::Untrained => "none",
            Arm::NoMasks => "no_masks",
            Arm::RandomMasks => "random_masks",
        }
    }

    fn rates(self) -> &'static str {
        match self {
            Arm::Untrained => "som_lr = 0.0\nmask_lr = 0.0\n",
            _ => "",
        }
    }
}

fn desk_config(data: &Path, output: &Path, seed: u64, arm: Arm, scale: &DeskScale) -> String {
    let epochs = scale.epochs.map(|e| format!("epochs = {e}\n")).unwrap_or_default();
    let mut probes = format!("[[probe]]\npreset = \"fc\"\n{epochs}");
    for s in scale.shots {
        probes.push_str(&format!("\n[[probe]]\npreset = \"fc\"\nshots = {s}\n{epochs}"));
    }
    let total = 2 * scale.steps_per_layer;
    format!(
        r#"version = 1
seed = {seed}
output = {output:?}
ablation = "{ablation}"
utilization_samples = {util}

[dataset]
kind = "cifar10"
path = {data:?}
pretext_samples = {pretext}
probe_samples = {probe}
eval_samples = {eval}
test_samples = {test}

[network]
preset = "custom"

[[network.layers]]
grid = [8, 8]
heads = 2
mask = "input"
delta = 1.0
steps = {steps}
{rates}
[[network.layers]]
grid = [8, 8]
heads = 2
mask = "channel"
delta = 1.5
steps = {steps}
{rates}
[checkpoints]
steps = [0, {total}]

{probes}"#,
        util = scale.test,
        pretext = scale.pretext,
        probe = scale.probe,
        eval = scale.eval,
        test = scale.test,
        steps = scale.steps_per_layer,
        ablation = arm.ablation(),
        rates = arm.rates(),
    )
}

struct DeskRun {
    test_accuracy: f64,
    shots: Vec<f64>,
    utilization: Vec<f64>,
}

fn desk_run(data: &Path, work: &Path, seed: u64, arm: Arm, with_shots: bool) -> Result<DeskRun> {
    let out = work.join(format!("{}-{seed}", arm.name()));
    let scale = DeskScale {
        shots: if with_shots { &SHOTS } else { &[] },
        ..DESK
    };
    let text = desk_config(data, &out, seed, arm, &scale);
    let cfg = ExperimentConfig::parse(&text, Path::new("desk.toml"))?;
    cmd_train(&cfg)?;
    let trace = cmd_probe(&out, &CheckpointSelector::Last, &[], None)?;
    let last = trace.checkpoints.last().expect("two checkpoints");
    let accuracy = |p: &ProbeConfig| {
        last.probes[&p.label()]
            .test_accuracy
            .expect("single-split probes report test accuracy")
    };
    Ok(DeskRun {
        test_accuracy: accuracy(&ProbeConfig::from_preset("fc")),
        shots: scale
            .shots
            .iter()
            .map(|&s| {
                accuracy(&ProbeConfig {
                    shots: Some(s),
                    ..ProbeConfig::from_preset("fc")
                })
            })
            .collect(),
        utilization: last.utilization.clone(),
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_criteria(data: Option<&Path>, out: &mut Vec<Outcome>) {
    const T7: &str = "scaled mask ablation ordering";
    const T8: &str = "few-shot sanity";
    const T9: &str = "neuron utilization trend";
    let Some(data) = data else {
        let why = format!("CIFAR-10 binaries not found at {}", cifar_dir().display());
        for (id, title) in [(7, T7), (8, T8), (9, T9)] {
            out.push(Outcome::blocked(id, title, why.clone()));
        }
        return;
    };
    let work = tempfile::tempdir().expect("temp dir");
    let started = Instant::now();
    let runs = || -> Result<[Vec<DeskRun>; 4]> {
        let mut arms: [Vec<DeskRun>; 4] = Default::default();
        for &seed in &SEEDS {
            for (i, arm) in [Arm::TrainedMasks, Arm::NoMasks, Arm::RandomMasks, Arm::Untrained].into_iter().enumerate() {
                arms[i].push(desk_run(data, work.path(), seed, arm, i == 0)?);
            }
        }
        Ok(arms)
    };
    let [full, none, random, untrained] = match runs() {
        Ok(r) => r,
        Err(e) => {
            for (id, title) in [(7, T7), (8, T8), (9, T9)] {
                out.push(Outcome::judged(id, title, false, format!("error: {e}")));
            }
            return;
        }
    };
    let minutes = started.elapsed().as_secs_f64() / 60.0;

    let with_m = mean(full.iter().map(|r| r.test_accuracy));
    let without = mean(none.iter().map(|r| r.test_accuracy));
    let rand_m = mean(random.iter().map(|r| r.test_accuracy));
    let rand_all = mean(untrained.iter().map(|r| r.test_accuracy));
    out.push(Outcome::judged(
        7,
        T7,
        with_m - without >= 10.0 && with_m >= rand_m - 1.0 && with_m >= rand_all - 1.0,
        format!(
            "mean test accuracy over {} seeds: trained masks {with_m:.2}%, no masks {without:.2}%, \
             frozen random masks {rand_m:.2}%, untrained SOM and masks {rand_all:.2}% ({minutes:.1} min)",
            SEEDS.len()
        ),
    ));

    let curve: Vec<f64> = (0..SHOTS.len()).map(|i| mean(full.iter().map(|r| r.shots[i]))).collect();
    let inversions = curve.windows(2).filter(|w| w[1] < w[0]).count();
    let fifty = *curve.last().expect("shots");
    out.push(Outcome::judged(
        8,
        T8,
        fifty >= 20.0 && inversions <= 1,
        format!(
            "mean accuracy by shots {:?}: {}; {inversions} inversion(s)",
            SHOTS,
            curve.iter().map(|a| format!("{a:.2}%")).collect::<Vec<_>>().join(", ")
        ),
    ));

    let first = mean(full.iter().map(|r| r.utilization[0]));
    let last = mean(full.iter().map(|r| *r.utilization.last().expect("layers")));
    let in_range = full.iter().flat_map(|r| &r.utilization).all(|&u| u > 0.0 && u <= 1.0);
    out.push(Outcome::judged(
        9,
        T9,
        last < first && in_range,
        format!("mean utilization first layer {first:.4}, final layer {last:.4}; all in (0,1]: {in_range}"),
    ));
}

fn full_reproduction(data: Option<&Path>) -> Outcome {
    const T10: &str = "full-scale D-CSNN linear probe";
    let blocked = |why: String| Outcome {
        gating: false,
        ..Outcome::blocked(10, T10, why)
    };
    let Some(data) = data else {
        return blocked(format!("CIFAR-10 binaries not found at {}", cifar_dir().display()));
    };
    if std::env::var("CSNN_ACCEPTANCE_FULL").as_deref() != Ok("1") {
        return blocked("multi-hour run; set CSNN_ACCEPTANCE_FULL=1 to enable".into());
    }
    let work = tempfile::tempdir().expect("temp dir");
    let out = work.path().join("full");
    let text = format!(
        r#"version = 1
seed = 1
output = {out:?}

[dataset]
kind = "cifar10"
path = {data:?}
pretext_samples = 50000
probe_samples = 50000
eval_samples = 5000
test_samples = 5000

[network]
preset = "d-csnn"
steps_per_layer = 2000

[checkpoints]
steps = [0, 6000]

[[probe]]
preset = "fc"
"#
    );
    let r = (|| -> Result<f64> {
        let cfg = ExperimentConfig::parse(&text, Path::new("full.toml"))?;
        cmd_train(&cfg)?;
        let trace = cmd_probe(&out, &CheckpointSelector::Last, &[], None)?;
        let last = trace.checkpoints.last().expect("checkpoints");
        Ok(last.probes["fc"].test_accuracy.expect("test accuracy"))
    })();
    let mut o = match r {
        Ok(acc) => Outcome::judged(
            10,
            T10,
            (acc - 73.73).abs() <= 5.0,
            format!("test accuracy {acc:.2}% (reference 73.73% +/- 5)"),
        ),
        Err(e) => Outcome::judged(10, T10, false, format!("error: {e}")),
    };
    o.gating = false;
    o
}

// --- 11 --------------------------------------------------------------------

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable run dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn csnn(args: &[&str], threads: &str) -> std::result::Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_csnn"))
        .args(args)
        .env("CSNN_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("csnn {args:?} failed: {}", String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn determinism(data: Option<&Path>) -> std::result::Result<(bool, String), String> {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = work.path();
    let (dir, scale, what) = match data {
        Some(d) => (d.to_path_buf(), DESK, "desk-scale CIFAR-10 run"),
        None => {
            // Same pipeline on synthetic images stored in the CIFAR-10 format.
            let dir = w.join("cifar");
            let train = synthetic(SMALL.pretext.max(SMALL.probe), 32, 3, 10, 99, Split::Train).map_err(|e| e.to_string())?;
            let test = synthetic(SMALL.eval + SMALL.test, 32, 3, 10, 99, Split::Test).map_err(|e| e.to_string())?;
            write_cifar_binary(&train, CifarVariant::Cifar10, &dir.join("data_batch_1.bin")).map_err(|e| e.to_string())?;
            write_cifar_binary(&test, CifarVariant::Cifar10, &dir.join("test_batch.bin")).map_err(|e| e.to_string())?;
            (dir, SMALL, "reduced run on synthetic CIFAR-format data")
        }
    };
    let scale = DeskScale {
        shots: &scale.shots[..scale.shots.len().min(1)],
        ..scale
    };
    let run = w.join("run");
    let cfg = w.join("cfg.toml");
    std::fs::write(&cfg, desk_config(&dir, &run, 1, Arm::TrainedMasks, &scale)).map_err(|e| e.to_string())?;
    let threads = ["1", "4"];
    for (i, t) in threads.iter().enumerate() {
        csnn(&["train", "-c", cfg.to_str().unwrap()], t)?;
        csnn(&["probe", "-r", run.to_str().unwrap()], t)?;
        std::fs::rename(&run, w.join(format!("run-{i}"))).map_err(|e| e.to_string())?;
    }
    let (a, b) = (w.join("run-0"), w.join("run-1"));
    let files = files_under(&a);
    if files != files_under(&b) {
        return Ok((false, "the two runs wrote different file sets".into()));
    }
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let snapshots = files.iter().filter(|f| f.starts_with("snapshots")).count();
    let traces = files.iter().filter(|f| f.starts_with("probes")).count();
    let detail = format!(
        "{what}, CSNN_THREADS=1 vs 4: {} files ({snapshots} snapshots, {traces} probe traces), {} differ{}",
        files.len(),
        differing.len(),
        if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
    );
    let complete = snapshots > 0 && traces > 0 && RunTrace::load(&a).is_ok();
    Ok((complete && differing.is_empty(), detail))
}

// ---------------------------------------------------------------------------

fn cifar_dir() -> PathBuf {
    match std::env::var_os("CSNN_CIFAR10_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin"),
    }
}

fn main() {
    let dir = cifar_dir();
    let data = cifar10_available(&dir).then_some(dir.as_path());
    let mut outcomes = vec![
        Outcome::from_result(1, "sconv oracle equivalence", oracle_equivalence()),
        Outcome::from_result(2, "unit-norm SOM weights", unit_norm_invariant()),
        Outcome::from_result(3, "mask rule stability", mask_rule_stability()),
        Outcome::from_result(4, "probe gradient check", probe_gradients()),
        Outcome::from_result(5, "fold aggregation properties", fold_properties()),
        Outcome::from_result(6, "metric hand values and invariants", metric_hand_values()),
    ];
    for o in &outcomes {
        o.print();
    }
    let mut desk = Vec::new();
    desk_criteria(data, &mut desk);
    desk.push(full_reproduction(data));
    let det = match determinism(data) {
        Ok((passed, detail)) => Outcome::judged(11, "determinism across thread counts", passed, detail),
        Err(e) => Outcome::judged(11, "determinism across thread counts", false, format!("error: {e}")),
    };
    desk.push(det);
    for o in &desk {
        o.print();
    }
    outcomes.extend(desk);

    let strict = std::env::var("CSNN_ACCEPTANCE_STRICT").as_deref() == Ok("1");
    let passed = outcomes.iter().filter(|o| matches!(o.status, Status::Pass)).count();
    let blocked = outcomes.iter().filter(|o| matches!(o.status, Status::Blocked(_))).count();
    let fatal = outcomes
        .iter()
        .filter(|o| match o.status {
            Status::Pass => false,
            Status::Fail => o.gating || strict,
            Status::Blocked(_) => strict,
        })
        .count();
    println!(
        "acceptance: {passed}/{} passed, {blocked} not evaluated, {} failed",
        outcomes.len(),
        outcomes.len() - passed - blocked
    );
    if fatal > 0 {
        std::process::exit(1);
    }
}

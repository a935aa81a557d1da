//! `csnn train` and `csnn probe`.

use std::path::{Path, PathBuf};

use csnn_core::network::{encode, layer_utilization, train_layerwise};
use csnn_core::probes::{evaluate, few_shot_eval, kfold_cv, train_probe, ProbeTrace};
use csnn_core::{snapshot, Ablation, Csnn, CsnnError, Result, Tensor};
use log::info;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, ProbeConfig};
use crate::data::{prepare, Prepared};
use crate::trace::{
    mean_summary, records_csv, snapshot_name, window_changes, CheckpointEntry, FoldEntry, ProbeEntry, RunTrace,
    CONFIG_FILE, PRETEXT_FILE, TRACE_FILE, TRACE_VERSION,
};

/// Trains the configured network, writing a snapshot per checkpoint, the
/// per-step pretext records and the run trace into `cfg.output`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunTrace> {
    let run = cfg.output.as_path();
    if run.join(TRACE_FILE).exists() {
        return Err(CsnnError::Config(format!("output: {} already holds a run", run.display())));
    }
    std::fs::create_dir_all(run).map_err(|e| CsnnError::io(run, e))?;
    let seed = cfg.seed();
    let spec = cfg.network_spec()?;
    let steps = cfg.checkpoint_steps()?;
    let data = prepare(&cfg.dataset, seed)?;
    let probe_images = data.test.take(cfg.utilization_samples)?.images;
    info!(
        "training {} layers for {} steps on {} samples",
        spec.layers.len(),
        spec.total_steps(),
        data.pretext.len()
    );

    let mut checkpoints = Vec::with_capacity(steps.len());
    let outcome = train_layerwise(&data.pretext.images, &spec, cfg.ablation, seed, &steps, |model| {
        let rel = snapshot_name(model.step);
        snapshot::save(model, &run.join(&rel))?;
        let utilization = layer_utilization(model, &probe_images, spec.batch_size)?;
        info!("checkpoint {} written", model.step);
        checkpoints.push(CheckpointEntry {
            step: model.step,
            snapshot: rel,
            utilization,
            weight_change: None,
            probes: Default::default(),
        });
        Ok(())
    })?;
    for (c, w) in checkpoints.iter_mut().zip(window_changes(&outcome.records, &steps)) {
        c.weight_change = w;
    }

    csnn_core::io::write_atomic_str(&run.join(PRETEXT_FILE), &records_csv(&outcome.records))?;
    csnn_core::io::write_atomic_str(&run.join(CONFIG_FILE), &cfg.to_toml())?;
    let trace = RunTrace {
        version: TRACE_VERSION,
        seed,
        ablation: cfg.ablation,
        orientation: cfg.orientation,
        network: spec,
        input_shape: data.pretext.sample_shape(),
        pretext_digest: data.pretext.digest(),
        total_steps: outcome.model.step,
        checkpoints,
    };
    trace.save(run)?;
    Ok(trace)
}

/// Which checkpoints a command applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointSelector {
    All,
    Last,
    Steps(Vec<u64>),
}

impl std::str::FromStr for CheckpointSelector {
    type Err = CsnnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckpointSelector::All),
            "last" => Ok(CheckpointSelector::Last),
            list => list
                .split(',')
                .map(|t| t.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(CheckpointSelector::Steps)
                .map_err(|_| CsnnError::Config(format!("checkpoint: expected all, last or steps like 0,100; got {s:?}"))),
        }
    }
}

impl CheckpointSelector {
    pub fn select(&self, trace: &RunTrace) -> Result<Vec<u64>> {
        match self {
            CheckpointSelector::All => Ok(trace.checkpoints.iter().map(|c| c.step).collect()),
            CheckpointSelector::Last => Ok(trace.checkpoints.last().map(|c| c.step).into_iter().collect()),
            CheckpointSelector::Steps(s) => {
                for &step in s {
                    trace.checkpoint(step)?;
                }
                Ok(s.clone())
            }
        }
    }
}

/// Reads the run configuration stored next to the trace.
pub fn load_run(run: &Path) -> Result<(ExperimentConfig, RunTrace)> {
    let trace = RunTrace::load(run)?;
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
    Ok((cfg, trace))
}

/// Ablation used to encode a run's snapshots unless overridden: noise masks
/// stay noisy, every other model is encoded with its stored parameters.
pub fn default_encode_ablation(model: &Csnn) -> Ablation {
    match model.ablation {
        Ablation::NoiseMasks => Ablation::NoiseMasks,
        _ => Ablation::None,
    }
}

/// Representations of the probe, eval and test samples.
pub struct Encoded {
    pub probe: Tensor,
    pub eval: Tensor,
    pub test: Tensor,
}

pub fn encode_splits(model: &Csnn, data: &Prepared, ablation: Ablation, seed: u64) -> Result<Encoded> {
    Ok(Encoded {
        probe: encode(&data.probe.images, model, ablation, seed)?,
        eval: encode(&data.eval.images, model, ablation, seed)?,
        test: encode(&data.test.images, model, ablation, seed)?,
    })
}

fn probe_dir(label: &str, step: u64) -> PathBuf {
    PathBuf::from("probes").join(label).join(format!("step-{step:08}"))
}

fn write_fold(run: &Path, dir: &Path, fold: usize, trace: &ProbeTrace) -> Result<FoldEntry> {
    let rel = dir.join(format!("fold-{fold}.csv"));
    csnn_core::io::write_atomic_str(&run.join(&rel), &trace.to_csv())?;
    Ok(FoldEntry {
        trace: rel,
        summary: trace.summary(),
    })
}

/// Trains one probe on the encoded splits of one checkpoint.
pub fn run_probe(
    run: &Path,
    step: u64,
    probe: &ProbeConfig,
    encode_ablation: Ablation,
    enc: &Encoded,
    data: &Prepared,
    seed: u64,
) -> Result<ProbeEntry> {
    let spec = probe.spec()?;
    let classes = data.classes();
    let dir = probe_dir(&probe.label(), step);
    let (folds, test_accuracy) = if let Some(k) = probe.kfold {
        let cv = kfold_cv(&enc.probe, &data.probe.labels, k, &spec, classes, seed)?;
        let folds = cv
            .folds
            .iter()
            .enumerate()
            .map(|(i, t)| write_fold(run, &dir, i, t))
            .collect::<Result<Vec<_>>>()?;
        (folds, None)
    } else {
        let result = match probe.shots {
            Some(shots) => few_shot_eval(
                &enc.probe,
                &data.probe.labels,
                &enc.eval,
                &data.eval.labels,
                shots,
                &spec,
                classes,
                seed,
            )?,
            None => train_probe(&enc.probe, &data.probe.labels, &enc.eval, &data.eval.labels, &spec, classes, seed)?,
        };
        let (_, test_acc) = evaluate(&spec, &result.pocket, &enc.test, &data.test.labels)?;
        (vec![write_fold(run, &dir, 0, &result.trace)?], Some(test_acc))
    };
    let summaries: Vec<_> = folds.iter().map(|f| f.summary.clone()).collect();
    Ok(ProbeEntry {
        spec,
        encode_ablation,
        kfold: probe.kfold,
        shots: probe.shots,
        folds,
        mean: mean_summary(&summaries),
        test_accuracy,
    })
}

/// Encodes the selected checkpoints and trains every probe on them.
/// Checkpoints are processed in parallel; results are merged in step order
/// and replace earlier entries of the same probe.
pub fn cmd_probe(
    run: &Path,
    selector: &CheckpointSelector,
    probes: &[ProbeConfig],
    encode_override: Option<Ablation>,
) -> Result<RunTrace> {
    let (cfg, mut trace) = load_run(run)?;
    let probes: Vec<ProbeConfig> = if probes.is_empty() { cfg.probes.clone() } else { probes.to_vec() };
    if probes.is_empty() {
        return Err(CsnnError::Config("no probe given and the run config declares none".into()));
    }
    for (i, p) in probes.iter().enumerate() {
        p.validate(&format!("probe[{i}]"))?;
    }
    let seed = cfg.seed();
    let data = prepare(&cfg.dataset, seed)?;
    let steps = selector.select(&trace)?;
    let results: Vec<(u64, Vec<(String, ProbeEntry)>)> = steps
        .par_iter()
        .map(|&step| -> Result<(u64, Vec<(String, ProbeEntry)>)> {
            let entry = trace.checkpoint(step)?;
            let model = snapshot::load(&run.join(&entry.snapshot))?;
            let ablation = encode_override.unwrap_or_else(|| default_encode_ablation(&model));
            let enc = encode_splits(&model, &data, ablation, seed)?;
            let mut out = Vec::with_capacity(probes.len());
            for p in &probes {
                let e = run_probe(run, step, p, ablation, &enc, &data, seed)?;
                info!("step {step}: {} pocket accuracy {:.2}%", p.label(), e.mean.pocket_accuracy);
                out.push((p.label(), e));
            }
            Ok((step, out))
        })
        .collect::<Result<_>>()?;
    for (step, entries) in results {
        let c = trace
            .checkpoints
            .iter_mut()
            .find(|c| c.step == step)
            .expect("selected from trace");
        c.probes.extend(entries);
    }
    trace.save(run)?;
    Ok(trace)
}

/// Parses a probe trace written by [`ProbeTrace::to_csv`].
pub fn read_probe_csv(path: &Path) -> Result<ProbeTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| CsnnError::io(path, e))?;
    let mut t = ProbeTrace {
        train_loss: vec![],
        train_accuracy: vec![],
        eval_loss: vec![],
        eval_accuracy: vec![],
        pocket_epoch: 0,
        pocket_accuracy: f64::NEG_INFINITY,
    };
    for (ln, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.is_empty()) {
        let bad = || CsnnError::format(path, format!("line {}: expected epoch,split,loss,accuracy", ln + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let loss: f64 = f[2].parse().map_err(|_| bad())?;
        let acc: f64 = f[3].parse().map_err(|_| bad())?;
        match f[1] {
            "train" => {
                t.train_loss.push(loss);
                t.train_accuracy.push(acc);
            }
            "eval" => {
                t.eval_loss.push(loss);
                t.eval_accuracy.push(acc);
                if acc > t.pocket_accuracy {
                    t.pocket_accuracy = acc;
                    t.pocket_epoch = t.eval_accuracy.len();
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok(t)
}

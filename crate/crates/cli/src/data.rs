//! Dataset preparation shared by every command.

use std::path::{Path, PathBuf};

use csnn_core::datasets::{
    load_cifar_binary, load_mnist_idx, normalize_inplace, split_eval, synthetic, ChannelStats, CifarVariant, Dataset,
    Split,
};
use csnn_core::rng::{Component, SeedSplitter};
use csnn_core::{CsnnError, Result};

use crate::config::{DatasetConfig, DatasetKind};

const CIFAR_BATCH: usize = 10_000;

/// Normalized splits of one experiment. `pretext` and `probe` are prefixes of
/// the same train samples; `eval` and `test` partition a prefix of the test split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pretext: Dataset,
    pub probe: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
    pub stats: ChannelStats,
}

impl Prepared {
    pub fn classes(&self) -> usize {
        self.probe.class_count
    }
}

fn enough(ds: &Dataset, n: usize, what: &str) -> Result<()> {
    if ds.len() < n {
        return Err(CsnnError::Data(format!("{what} has {} samples, {n} requested", ds.len())));
    }
    Ok(())
}

fn raw_splits(cfg: &DatasetConfig, train_n: usize, test_n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg.kind {
        DatasetKind::Cifar10 => {
            let dir = cfg.path.as_deref().expect("validated");
            let batches = train_n.div_ceil(CIFAR_BATCH);
            if batches > 5 {
                return Err(CsnnError::Data(format!("CIFAR-10 has 50000 train samples, {train_n} requested")));
            }
            let train: Vec<PathBuf> = (1..=batches).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            Ok((
                load_cifar_binary(&train, CifarVariant::Cifar10, Split::Train)?,
                load_cifar_binary(&[dir.join("test_batch.bin")], CifarVariant::Cifar10, Split::Test)?,
            ))
        }
        DatasetKind::Mnist => {
            let dir = cfg.path.as_deref().expect("validated");
            let file = |name: &str| -> PathBuf { dir.join(name) };
            Ok((
                load_mnist_idx(&file("train-images-idx3-ubyte"), &file("train-labels-idx1-ubyte"), Split::Train)?,
                load_mnist_idx(&file("t10k-images-idx3-ubyte"), &file("t10k-labels-idx1-ubyte"), Split::Test)?,
            ))
        }
        DatasetKind::Synthetic => {
            let (side, ch, classes) = (
                cfg.side.expect("validated"),
                cfg.channels.expect("validated"),
                cfg.classes.expect("validated"),
            );
            let s = SeedSplitter::new(seed).seed(Component::Synthetic, 0);
            Ok((
                synthetic(train_n, side, ch, classes, s, Split::Train)?,
                synthetic(test_n, side, ch, classes, s, Split::Test)?,
            ))
        }
    }
}

/// Loads, subsets and normalizes the data of an experiment. Channel
/// statistics come from the train samples in use.
pub fn prepare(cfg: &DatasetConfig, seed: u64) -> Result<Prepared> {
    let train_n = cfg.pretext_samples.max(cfg.probe_samples);
    let test_n = cfg.eval_samples + cfg.test_samples;
    let (train, test) = raw_splits(cfg, train_n, test_n, seed)?;
    enough(&train, train_n, "train split")?;
    enough(&test, test_n, "test split")?;
    let mut train = train.take(train_n)?;
    let stats = normalize_inplace(&mut train, None)?;
    let mut test = test.take(test_n)?;
    normalize_inplace(&mut test, Some(&stats))?;
    let (eval, test) = split_eval(&test, cfg.eval_samples, Split::Test, seed)?;
    Ok(Prepared {
        pretext: train.take(cfg.pretext_samples)?,
        probe: train.take(cfg.probe_samples)?,
        eval,
        test,
        stats,
    })
}

/// Whether the files a file-backed dataset needs are present.
pub fn cifar10_available(dir: &Path) -> bool {
    dir.join("data_batch_1.bin").is_file() && dir.join("test_batch.bin").is_file()
}

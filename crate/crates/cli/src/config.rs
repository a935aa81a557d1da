//! Experiment configuration (TOML, versioned).
//!
//! ```toml
//! version = 1
//! seed = 7
//! output = "runs/desk"
//! ablation = "none"
//! orientation = "lower"
//!
//! [dataset]
//! kind = "cifar10"
//! path = "data/cifar-10-batches-bin"
//! pretext_samples = 2000
//! probe_samples = 5000
//! eval_samples = 1000
//! test_samples = 1000
//!
//! [network]
//! preset = "d-csnn"
//! steps_per_layer = 2000
//!
//! [checkpoints]
//! steps = [0, 500, 1000, 2000, 4000, 6000]
//!
//! [[probe]]
//! preset = "fc"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use csnn_core::masks::MaskRuleConfig;
use csnn_core::metrics::Orientation;
use csnn_core::probes::ProbeSpec;
use csnn_core::{Ablation, ConvGeometry, CsnnError, LayerSpec, MaskKind, NetworkSpec, Padding, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Mandatory; kept optional here so a missing seed gets a clear message.
    pub seed: Option<u64>,
    pub output: PathBuf,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default, with = "orientation_name")]
    pub orientation: Orientation,
    /// Test samples used to measure neuron utilization at every checkpoint.
    #[serde(default = "default_utilization_samples")]
    pub utilization_samples: usize,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub checkpoints: CheckpointConfig,
    #[serde(default, rename = "probe")]
    pub probes: Vec<ProbeConfig>,
}

fn default_utilization_samples() -> usize {
    64
}

mod orientation_name {
    use csnn_core::metrics::Orientation;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(o: &Orientation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match o {
            Orientation::LowerBetter => "lower",
            Orientation::HigherBetter => "higher",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Orientation, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR-10 binary directory or MNIST IDX directory.
    pub path: Option<PathBuf>,
    /// Leading train samples the CSNN learns from.
    pub pretext_samples: usize,
    /// Leading train samples the probes learn from.
    pub probe_samples: usize,
    /// Taken from the test split for pocket selection.
    pub eval_samples: usize,
    pub test_samples: usize,
    /// Synthetic data only.
    pub side: Option<usize>,
    pub channels: Option<usize>,
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub preset: String,
    pub steps_per_layer: Option<u64>,
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RulePreset {
    HebbAllMasks,
    OjaPrefixMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(default = "one")]
    pub heads: usize,
    pub grid: [usize; 2],
    #[serde(default = "three")]
    pub kernel: [usize; 2],
    #[serde(default = "unit")]
    pub stride: [usize; 2],
    #[serde(default = "same")]
    pub padding: Padding,
    pub mask: MaskKind,
    #[serde(default = "hebb")]
    pub rule: RulePreset,
    pub delta: f64,
    #[serde(default = "som_lr")]
    pub som_lr: f64,
    #[serde(default = "mask_lr")]
    pub mask_lr: f64,
    /// Length of the training interval; intervals follow each other.
    pub steps: Option<u64>,
    /// Explicit `[start, end)` interval instead of `steps`.
    pub interval: Option<[u64; 2]>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub max_pool: bool,
}

fn one() -> usize {
    1
}
fn three() -> [usize; 2] {
    [3, 3]
}
fn unit() -> [usize; 2] {
    [1, 1]
}
fn same() -> Padding {
    Padding::Same
}
fn hebb() -> RulePreset {
    RulePreset::HebbAllMasks
}
fn som_lr() -> f64 {
    0.1
}
fn mask_lr() -> f64 {
    0.005
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Explicit steps; must start at 0 and increase strictly.
    pub steps: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// `fc`, `2fc`, `3fc` or `3fc-relu`.
    pub preset: String,
    /// Key in the run trace; derived from the other fields when absent.
    pub name: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    /// Stratified k-fold cross-validation on the probe samples.
    pub kfold: Option<usize>,
    /// Few-shot training with this many samples per class.
    pub shots: Option<usize>,
}

impl ProbeConfig {
    pub fn from_preset(preset: &str) -> Self {
        ProbeConfig {
            preset: preset.to_string(),
            name: None,
            epochs: None,
            batch_size: None,
            kfold: None,
            shots: None,
        }
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = self.preset.clone();
        if let Some(k) = self.kfold {
            s.push_str(&format!("-k{k}"));
        }
        if let Some(n) = self.shots {
            s.push_str(&format!("-{n}shot"));
        }
        if let Some(e) = self.epochs {
            s.push_str(&format!("-e{e}"));
        }
        s
    }

    pub fn spec(&self) -> Result<ProbeSpec> {
        let mut spec = ProbeSpec::preset(&self.preset)
            .ok_or_else(|| CsnnError::Config(format!("unknown probe preset {:?} (fc, 2fc, 3fc, 3fc-relu)", self.preset)))?;
        if let Some(e) = self.epochs {
            spec.epochs = e;
        }
        if let Some(b) = self.batch_size {
            spec.batch_size = b;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self, at: &str) -> Result<()> {
        self.spec().map_err(|e| CsnnError::Config(format!("{at}: {e}")))?;
        if self.kfold.is_some() && self.shots.is_some() {
            return Err(CsnnError::Config(format!("{at}: kfold and shots are exclusive")));
        }
        if let Some(k) = self.kfold {
            if k < 2 {
                return Err(CsnnError::Config(format!("{at}.kfold: must be at least 2, got {k}")));
            }
        }
        if self.shots == Some(0) {
            return Err(CsnnError::Config(format!("{at}.shots: must be positive")));
        }
        Ok(())
    }
}

impl LayerConfig {
    fn to_spec(&self, interval: (u64, u64)) -> LayerSpec {
        LayerSpec {
            heads: self.heads,
            grid: (self.grid[0], self.grid[1]),
            geometry: ConvGeometry::new(
                (self.kernel[0], self.kernel[1]),
                (self.stride[0], self.stride[1]),
                self.padding,
            ),
            mask_kind: self.mask,
            mask_rule: match self.rule {
                RulePreset::HebbAllMasks => MaskRuleConfig::hebb_all_masks(),
                RulePreset::OjaPrefixMasks => MaskRuleConfig::oja_prefix_masks(),
            },
            delta: self.delta,
            som_lr: self.som_lr,
            mask_lr: self.mask_lr,
            train_interval: interval,
            batch_norm: self.batch_norm,
            max_pool: self.max_pool,
        }
    }
}

fn cfg_err(at: &str, msg: impl std::fmt::Display) -> CsnnError {
    CsnnError::Config(format!("{at}: {msg}"))
}

impl NetworkConfig {
    pub fn build(&self) -> Result<NetworkSpec> {
        let mut spec = match self.preset.as_str() {
            "s-csnn" | "d-csnn" => {
                if !self.layers.is_empty() {
                    return Err(cfg_err("network.layers", "only allowed with preset = \"custom\""));
                }
                let steps = self
                    .steps_per_layer
                    .ok_or_else(|| cfg_err("network.steps_per_layer", "required for presets"))?;
                if self.preset == "s-csnn" {
                    NetworkSpec::s_csnn(steps)
                } else {
                    NetworkSpec::d_csnn(steps)
                }
            }
            "custom" => self.custom()?,
            other => {
                return Err(cfg_err(
                    "network.preset",
                    format!("unknown preset {other:?} (s-csnn, d-csnn, custom)"),
                ))
            }
        };
        if let Some(b) = self.batch_size {
            spec.batch_size = b;
        }
        spec.validate().map_err(|e| cfg_err("network", e))?;
        Ok(spec)
    }

    fn custom(&self) -> Result<NetworkSpec> {
        if self.layers.is_empty() {
            return Err(cfg_err("network.layers", "a custom network needs at least one layer"));
        }
        if self.steps_per_layer.is_some() {
            return Err(cfg_err("network.steps_per_layer", "use network.layers[i].steps for custom networks"));
        }
        let mut next = 0u64;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let at = format!("network.layers[{i}]");
            let interval = match (l.steps, l.interval) {
                (Some(s), None) => (next, next + s),
                (None, Some([a, b])) => (a, b),
                _ => return Err(cfg_err(&at, "set exactly one of steps and interval")),
            };
            next = interval.1;
            if l.heads == 0 || l.grid[0] == 0 || l.grid[1] == 0 {
                return Err(cfg_err(&at, "heads and grid must be positive"));
            }
            if !(l.delta > 0.0) {
                return Err(cfg_err(&format!("{at}.delta"), "must be positive"));
            }
            layers.push(l.to_spec(interval));
        }
        Ok(NetworkSpec {
            preset: csnn_core::network::Preset::Custom,
            batch_size: 1,
            layers,
        })
    }
}

/// Checkpoints thinned out over time: 0, 10, 50, 100, 500, 1000, 2000, then
/// every 2000 steps, always ending at `total`.
pub fn default_schedule(total: u64) -> Vec<u64> {
    let mut steps: Vec<u64> = [0, 10, 50, 100, 500, 1000].into_iter().filter(|&s| s < total).collect();
    let mut s = 2000;
    while s < total {
        steps.push(s);
        s += 2000;
    }
    steps.push(total);
    steps.dedup();
    steps
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CsnnError::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CsnnError::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output.is_relative() {
            self.output = base.join(&self.output);
        }
        if let Some(p) = &self.dataset.path {
            if p.is_relative() {
                self.dataset.path = Some(base.join(p));
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(cfg_err(
                "version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.version),
            ));
        }
        if self.seed.is_none() {
            return Err(cfg_err("seed", "is mandatory"));
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Cifar10 | DatasetKind::Mnist => {
                if d.path.is_none() {
                    return Err(cfg_err("dataset.path", "required for file-backed datasets"));
                }
                if d.side.is_some() || d.channels.is_some() || d.classes.is_some() {
                    return Err(cfg_err("dataset", "side/channels/classes apply to synthetic data only"));
                }
            }
            DatasetKind::Synthetic => {
                for (name, v) in [("side", d.side), ("channels", d.channels), ("classes", d.classes)] {
                    if v.unwrap_or(0) == 0 {
                        return Err(cfg_err(&format!("dataset.{name}"), "required and positive for synthetic data"));
                    }
                }
            }
        }
        if d.pretext_samples == 0 {
            return Err(cfg_err("dataset.pretext_samples", "must be positive"));
        }
        if d.probe_samples == 0 || d.eval_samples == 0 || d.test_samples == 0 {
            return Err(cfg_err("dataset", "probe, eval and test sample counts must be positive"));
        }
        let spec = self.network.build()?;
        if spec.batch_size > d.pretext_samples {
            return Err(cfg_err("network.batch_size", "exceeds dataset.pretext_samples"));
        }
        if let Some(steps) = &self.checkpoints.steps {
            if steps.first() != Some(&0) {
                return Err(cfg_err("checkpoints.steps", "must start at 0"));
            }
            if steps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(cfg_err("checkpoints.steps", "must increase strictly"));
            }
        }
        if self.utilization_samples == 0 {
            return Err(cfg_err("utilization_samples", "must be positive"));
        }
        let mut labels = std::collections::BTreeSet::new();
        for (i, p) in self.probes.iter().enumerate() {
            p.validate(&format!("probe[{i}]"))?;
            if !labels.insert(p.label()) {
                return Err(cfg_err(&format!("probe[{i}]"), format!("duplicate probe name {:?}", p.label())));
            }
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        self.network.build()
    }

    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        match &self.checkpoints.steps {
            Some(s) => Ok(s.clone()),
            None => Ok(default_schedule(self.network_spec()?.total_steps())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

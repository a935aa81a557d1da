//! Convolutional self-organizing neural networks with local Hebbian mask
//! learning, linear probes, and learning-curve mismatch metrics.

pub mod datasets;
pub mod error;
pub mod io;
pub mod linalg;
pub mod masks;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod probes;
pub mod rng;
pub mod sconv;
pub mod snapshot;
pub mod tensor;

pub use error::{CsnnError, Result};
pub use masks::{MaskKind, MaskRuleConfig, NeuronMasks};
pub use network::{Ablation, Csnn, LayerSpec, NetworkSpec};
pub use sconv::{BmuMap, LearningSchedule, SomMap};
pub use tensor::{ConvGeometry, Padding, PatchGrid, Tensor};

//! Few-shot multi-scale vision-language multiple instance learning over
//! precomputed patch features: text-guided filtering, a hierarchical
//! heterogeneous graph, relation-aware message passing and a hierarchical
//! text contrastive objective, plus the experiment harness around them.

pub mod autograd;
pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod hhgnn;
pub mod hhgraph;
pub mod objective;
pub mod synthgen;
pub mod tgdf;

pub use autograd::Mat;
pub use datamodel::{Dataset, EncodedTexts, EncoderStub, FeatureBag, TextHierarchy};
pub use error::{Error, Result};
pub use evalkit::{MetricsRow, RunMetrics, SeedMetrics};
pub use harness::{ModuleSwitches, RunConfig};
pub use hhgnn::{GnnParams, HierAggregator};
pub use hhgraph::{HHGraph, Relation};
pub use objective::HtclVariant;
pub use synthgen::SynthConfig;
pub use tgdf::{FilterMasks, TgdfSwitches};

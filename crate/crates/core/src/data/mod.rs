//! Datasets, protocol splits, batch sampling and view augmentation.

pub mod augment;
pub mod dataset;
pub mod protocol;
pub mod sampler;
pub mod synthetic;

pub use augment::{make_views, AugmentConfig, AugmentedPair};
pub use dataset::{DomainDataset, ImageStore, Sample};
pub use protocol::{
    build_protocol, few_shot_inject, DataRoot, Domain, DomainSource, ProtocolId, ProtocolSpec, ProtocolSplit,
    SplitTarget,
};
pub use sampler::BalancedSampler;
pub use synthetic::SyntheticConfig;

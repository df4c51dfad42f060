//! Privacy and utility metrics for anonymized datasets.

pub mod ablation;
pub mod attributes;
pub mod classifier;
pub mod fid;
pub mod focal;
pub mod metrics;
pub mod protocol;
pub mod report;

pub use attributes::{AttributeSpec, Region};
pub use classifier::{ClassifierConfig, Mlp};
pub use fid::{frechet_distance, gaussian_moments, GaussianMoments};
pub use focal::focal_loss;
pub use metrics::{detection_rate, reid_rate, reid_rate_embeddings};
pub use protocol::{attribute_protocol, pseudo_label, AttributeAccuracy, LabelMap};
pub use report::{evaluate_dataset, EvalInputs, EvalReport};

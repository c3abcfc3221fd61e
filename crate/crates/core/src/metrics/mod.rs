//! Distribution, feature-space and cross-modal evaluation metrics.

pub mod crossmodal;
pub mod distribution;
pub mod extractors;
pub mod frechet;
pub mod region;
pub mod report;

pub use crossmodal::{cm_dc, cm_sc, oracle_labels, Alignment, CrossModalConfig, DcResult, DepthLookup, ReferenceGrid, ScResult};
pub use distribution::{bev_histogram, jsd, mmd, BevHistogram, MmdResult};
pub use extractors::{extract_stats, FeatureExtractor, PointMlp, RangeCnn};
pub use frechet::{frechet, FeatureStats};
pub use region::{region_partition, Region};
pub use report::{MetricReport, MetricValue};

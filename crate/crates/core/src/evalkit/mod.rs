//! Slot-to-class mapping, detection post-processing and mAP.

pub mod boxes;
pub mod hungarian;
pub mod map;
pub mod mapping;
pub mod postprocess;

pub use boxes::{iou, nms};
pub use hungarian::{hungarian, Assignment};
pub use map::{evaluate_map, GroupMetrics, MapReport};
pub use mapping::{
    build_mapping, classify_gt_boxes, cluster_accuracy, ClassMapping, ClusterAccuracy, Cooccurrence, GtPrediction,
    GtPredictions,
};
pub use postprocess::{postprocess, PostprocessConfig};

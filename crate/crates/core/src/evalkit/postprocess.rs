use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::boxes::nms;
use super::mapping::ClassMapping;
use crate::data::{Detection, DetectionSet, ProposalRecord};
use crate::error::{NcdlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_threshold: 1e-4,
            nms_iou: 0.5,
            max_detections: 300,
        }
    }
}

/// Turns per-proposal class distributions into detections: one candidate
/// per mapped class, confidence cutoff, class-wise NMS, then the top
/// `max_detections` per image.
pub fn postprocess(
    probabilities: ArrayView2<'_, f64>,
    proposals: &[ProposalRecord],
    mapping: &ClassMapping,
    cfg: &PostprocessConfig,
) -> Result<DetectionSet> {
    if probabilities.nrows() != proposals.len() {
        return Err(NcdlError::Shape(format!(
            "{} probability rows for {} proposals",
            probabilities.nrows(),
            proposals.len()
        )));
    }
    if probabilities.ncols() != mapping.num_slots() {
        return Err(NcdlError::Shape(format!(
            "{} classes in probabilities, mapping covers {}",
            probabilities.ncols(),
            mapping.num_slots()
        )));
    }

    // image -> class -> (proposal row, confidence)
    let mut candidates: BTreeMap<u64, BTreeMap<usize, Vec<(usize, f64)>>> = BTreeMap::new();
    for (row, p) in proposals.iter().enumerate() {
        let per_class = candidates.entry(p.image_id).or_default();
        for (slot, &conf) in probabilities.row(row).iter().enumerate() {
            if mapping.name_of(slot).is_some() && conf >= cfg.score_threshold {
                per_class.entry(slot).or_default().push((row, conf));
            }
        }
    }

    let mut out = DetectionSet::new();
    for (image_id, per_class) in candidates {
        let mut dets: Vec<(usize, Detection)> = Vec::new();
        for (slot, cands) in per_class {
            let boxes: Vec<_> = cands.iter().map(|&(r, _)| proposals[r].bbox).collect();
            let scores: Vec<f64> = cands.iter().map(|&(_, c)| c).collect();
            for k in nms(&boxes, &scores, cfg.nms_iou) {
                let (row, confidence) = cands[k];
                dets.push((
                    row,
                    Detection {
                        bbox: proposals[row].bbox,
                        class_index: slot,
                        class_name: mapping.name_of(slot).expect("filtered above").to_string(),
                        confidence,
                    },
                ));
            }
        }
        dets.sort_by(|(ra, a), (rb, b)| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(ra.cmp(rb))
                .then(a.class_index.cmp(&b.class_index))
        });
        dets.truncate(cfg.max_detections);
        out.insert(image_id, dets.into_iter().map(|(_, d)| d).collect());
    }
    Ok(out)
}

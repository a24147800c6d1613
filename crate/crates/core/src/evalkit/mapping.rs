//! Cluster-slot to ground-truth-class mapping.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::boxes::iou;
use super::hungarian::hungarian;
use crate::data::{FeatureDataset, GroundTruthSet, ImageId};
use crate::error::{NcdlError, Result};
use crate::heads::HeadParameters;
use crate::inference::{argmax_rows, class_probabilities};

/// Minimum IoU between a ground-truth box and the proposal whose feature
/// stands in for it.
pub const GT_PROPOSAL_MIN_IOU: f64 = 0.5;

/// Predicted class slot of one ground-truth annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPrediction {
    pub image_id: ImageId,
    pub annotation_id: u64,
    pub class_name: String,
    pub proposal_row: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPredictions {
    pub predictions: Vec<GtPrediction>,
    /// Annotations without a proposal at IoU >= 0.5.
    pub skipped: usize,
}

/// Classifies every ground-truth annotation through the best-IoU proposal
/// of its image (view-1 features).
pub fn classify_gt_boxes(params: &HeadParameters, dataset: &FeatureDataset, gt: &GroundTruthSet) -> Result<GtPredictions> {
    let images = dataset.images();
    let mut matched = Vec::new();
    let mut skipped = 0;
    for (&image_id, objects) in &gt.images {
        let rows = images.get(&image_id).map(Vec::as_slice).unwrap_or(&[]);
        for obj in objects {
            let best = rows
                .iter()
                .map(|&r| (r, iou(&obj.bbox, &dataset.proposals[r].bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (r, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((r, v)),
                });
            match best {
                Some((row, v)) if v >= GT_PROPOSAL_MIN_IOU => matched.push((image_id, obj, row)),
                _ => skipped += 1,
            }
        }
    }
    let rows: Vec<usize> = matched.iter().map(|m| m.2).collect();
    let (features, _) = dataset.gather(&rows);
    let slots = argmax_rows(&class_probabilities(params, features.view())?);
    let predictions = matched
        .into_iter()
        .zip(slots)
        .map(|((image_id, obj, row), slot)| GtPrediction {
            image_id,
            annotation_id: obj.annotation_id,
            class_name: obj.class_name.clone(),
            proposal_row: row,
            slot,
        })
        .collect();
    Ok(GtPredictions { predictions, skipped })
}

/// Slot × ground-truth-class co-occurrence table.
#[derive(Debug, Clone, PartialEq)]
pub struct Cooccurrence {
    pub class_names: Vec<String>,
    /// `num_slots × class_names.len()`
    pub counts: Array2<u64>,
}

impl Cooccurrence {
    pub fn from_predictions(preds: &[GtPrediction], num_slots: usize, class_names: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut counts = Array2::zeros((num_slots, class_names.len()));
        for p in preds {
            let c = *index
                .get(p.class_name.as_str())
                .ok_or_else(|| NcdlError::UnknownClass(p.class_name.clone()))?;
            if p.slot >= num_slots {
                return Err(NcdlError::Shape(format!("slot {} outside {num_slots} slots", p.slot)));
            }
            counts[[p.slot, c]] += 1;
        }
        Ok(Cooccurrence {
            class_names: class_names.to_vec(),
            counts,
        })
    }
}

/// Predicted slot → ground-truth class name; `None` means ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub num_known: usize,
    pub slots: Vec<Option<String>>,
}

impl ClassMapping {
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn name_of(&self, slot: usize) -> Option<&str> {
        self.slots.get(slot).and_then(|s| s.as_deref())
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = HashSet::new();
        self.slots.iter().flatten().all(|n| seen.insert(n))
    }
}

/// Known slots keep their own names; novel slots are matched one-to-one to
/// non-known ground-truth classes by maximizing total co-occurrence. Pairs
/// with zero co-occurrence stay unmapped.
pub fn build_mapping(counts: &Cooccurrence, known_names: &[String]) -> ClassMapping {
    let num_slots = counts.counts.nrows();
    let k = known_names.len().min(num_slots);
    let mut slots: Vec<Option<String>> = vec![None; num_slots];
    for (slot, name) in slots.iter_mut().zip(known_names) {
        *slot = Some(name.clone());
    }
    let known: HashSet<&str> = known_names.iter().map(String::as_str).collect();
    let novel_classes: Vec<usize> = (0..counts.class_names.len())
        .filter(|&c| !known.contains(counts.class_names[c].as_str()))
        .collect();
    let novel_slots: Vec<usize> = (k..num_slots).collect();
    if novel_classes.is_empty() || novel_slots.is_empty() {
        return ClassMapping { num_known: k, slots };
    }
    let cost = Array2::from_shape_fn((novel_slots.len(), novel_classes.len()), |(i, j)| {
        -(counts.counts[[novel_slots[i], novel_classes[j]]] as f64)
    });
    let assignment = hungarian(cost.view()).expect("counts are finite");
    for (i, j) in assignment.pairs {
        let (slot, class) = (novel_slots[i], novel_classes[j]);
        if counts.counts[[slot, class]] > 0 {
            slots[slot] = Some(counts.class_names[class].clone());
        }
    }
    ClassMapping { num_known: k, slots }
}

/// Fraction of correctly named annotations among known-class and
/// novel-class ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterAccuracy {
    pub known: f64,
    pub novel: f64,
    pub all: f64,
    pub known_count: usize,
    pub novel_count: usize,
}

pub fn cluster_accuracy(preds: &[GtPrediction], mapping: &ClassMapping, known_names: &[String]) -> ClusterAccuracy {
    let known: HashSet<&str> = known_names.iter().map(String::as_str).collect();
    let (mut kc, mut kn, mut nc, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for p in preds {
        let hit = mapping.name_of(p.slot) == Some(p.class_name.as_str());
        if known.contains(p.class_name.as_str()) {
            kn += 1;
            kc += usize::from(hit);
        } else {
            nn += 1;
            nc += usize::from(hit);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ClusterAccuracy {
        known: ratio(kc, kn),
        novel: ratio(nc, nn),
        all: ratio(kc + nc, kn + nn),
        known_count: kn,
        novel_count: nn,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, GtObject, ProposalRecord};
    use crate::heads::NovelHead;
    use ndarray::array;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn distinct_slots_recover_bijection() {
        // slots: 0 known "a", 1..4 novel; classes a, x, y, z
        let counts = Cooccurrence {
            class_names: names(&["a", "x", "y", "z"]),
            counts: array![[9, 0, 0, 0], [0, 0, 5, 0], [0, 0, 0, 7], [0, 3, 0, 0]],
        };
        let m = build_mapping(&counts, &names(&["a"]));
        assert_eq!(
            m.slots,
            vec![Some("a".into()), Some("y".into()), Some("z".into()), Some("x".into())]
        );
        assert!(m.is_injective());
    }

    #[test]
    fn unpredicted_slot_stays_unmapped() {
        let counts = Cooccurrence {
            class_names: names(&["a", "x"]),
            counts: array![[4, 0], [0, 3], [0, 0]],
        };
        let m = build_mapping(&counts, &names(&["a"]));
        assert_eq!(m.slots, vec![Some("a".into()), Some("x".into()), None]);
    }

    #[test]
    fn three_slots_two_classes_match_best_bijection() {
        // novel slots 1..=3 vs classes x, y
        let counts = Cooccurrence {
            class_names: names(&["a", "x", "y"]),
            counts: array![[1, 0, 0], [0, 6, 5], [0, 4, 0], [0, 2, 2]],
        };
        // enumerate injective maps {x, y} -> distinct slots
        let mut best = (0u64, (0, 0));
        for sx in 1..4 {
            for sy in 1..4 {
                if sx != sy {
                    let total = counts.counts[[sx, 1]] + counts.counts[[sy, 2]];
                    if total > best.0 {
                        best = (total, (sx, sy));
                    }
                }
            }
        }
        let m = build_mapping(&counts, &names(&["a"]));
        assert_eq!(best.0, 9);
        assert_eq!(m.name_of(best.1 .0), Some("x"));
        assert_eq!(m.name_of(best.1 .1), Some("y"));
        assert!(m.is_injective());
    }

    #[test]
    fn accuracy_counts_known_and_novel_separately() {
        let m = ClassMapping {
            num_known: 1,
            slots: vec![Some("a".into()), Some("x".into()), None],
        };
        let p = |name: &str, slot| GtPrediction {
            image_id: 1,
            annotation_id: 0,
            class_name: name.into(),
            proposal_row: 0,
            slot,
        };
        let acc = cluster_accuracy(&[p("a", 0), p("a", 1), p("x", 1), p("x", 2)], &m, &names(&["a"]));
        assert_eq!((acc.known, acc.novel, acc.all), (0.5, 0.5, 0.5));
    }

    fn one_image_setup() -> (HeadParameters, FeatureDataset, GroundTruthSet) {
        // known slot 0 responds to e0, novel prototype 0 to e1
        let params = HeadParameters {
            known_weights: array![[10.0, 0.0]],
            novel_heads: vec![NovelHead {
                projector: Vec::new(),
                prototypes: array![[0.0, 1.0]],
                temperature: 0.1,
            }],
        };
        let rec = |b: BBox| ProposalRecord {
            image_id: 1,
            bbox: b,
            objectness: 0.9,
            gt_class: None,
            labeled_image: false,
        };
        let ds = FeatureDataset {
            known_class_names: names(&["a"]),
            proposals: vec![rec(BBox::new(0.0, 0.0, 10.0, 10.0)), rec(BBox::new(50.0, 50.0, 60.0, 60.0))],
            view1: array![[1.0, 0.0], [0.0, 1.0]],
            view2: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let obj = |id, b: BBox, n: &str| GtObject {
            annotation_id: id,
            bbox: b,
            class_name: n.into(),
            area_group: crate::data::AreaGroup::of_box(&b),
        };
        let mut gt = GroundTruthSet {
            class_names: names(&["a", "x"]),
            ..Default::default()
        };
        gt.images.insert(
            1,
            vec![
                obj(1, BBox::new(0.0, 0.0, 10.0, 9.0), "a"),
                obj(2, BBox::new(50.0, 50.0, 60.0, 61.0), "x"),
                obj(3, BBox::new(200.0, 200.0, 220.0, 220.0), "x"),
            ],
        );
        (params, ds, gt)
    }

    #[test]
    fn gt_boxes_classified_through_best_proposal() {
        let (params, ds, gt) = one_image_setup();
        let out = classify_gt_boxes(&params, &ds, &gt).unwrap();
        assert_eq!(out.skipped, 1);
        let slots: Vec<(u64, usize)> = out.predictions.iter().map(|p| (p.annotation_id, p.slot)).collect();
        assert_eq!(slots, vec![(1, 0), (2, 1)]);
        assert_eq!(out, classify_gt_boxes(&params, &ds, &gt).unwrap());
    }
}

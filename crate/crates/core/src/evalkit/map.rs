//! COCO-style mAP@[.5:.95] with 101-point interpolation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::boxes::iou;
use crate::data::{AreaGroup, BBox, Detection, DetectionSet, GroundTruthSet, GtObject, ImageId};
use crate::error::{NcdlError, Result};

pub const NUM_IOU_THRESHOLDS: usize = 10;
const RECALL_POINTS: usize = 101;

pub fn iou_thresholds() -> [f64; NUM_IOU_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Metrics of one class group. `None` when the group (or area bucket) has
/// no ground-truth class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupMetrics {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "mAP50")]
    pub map50: Option<f64>,
    #[serde(rename = "mAP75")]
    pub map75: Option<f64>,
    #[serde(rename = "mAP_s")]
    pub map_s: Option<f64>,
    #[serde(rename = "mAP_m")]
    pub map_m: Option<f64>,
    #[serde(rename = "mAP_l")]
    pub map_l: Option<f64>,
    /// AP@[.5:.95] per class name.
    pub per_class: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapReport {
    pub known: GroupMetrics,
    pub novel: GroupMetrics,
    pub all: GroupMetrics,
}

/// AP of one class at every IoU threshold, for the whole image and per area
/// bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub all: [f64; NUM_IOU_THRESHOLDS],
    /// Indexed like [`AreaGroup::ALL`]; `None` when no GT of the class falls
    /// in that bucket.
    pub by_area: [Option<[f64; NUM_IOU_THRESHOLDS]>; 3],
}

/// Evaluates mapped detections against ground truth. Classes are grouped as
/// known (names in `known_names`) and novel (everything else in the GT
/// vocabulary); classes with no GT annotation are left out of every mean.
pub fn evaluate_map(detections: &DetectionSet, gt: &GroundTruthSet, known_names: &[String]) -> Result<MapReport> {
    let per_class = per_class_ap(detections, gt)?;
    let known: HashSet<&str> = known_names.iter().map(String::as_str).collect();
    let group = |pick: &dyn Fn(&str) -> bool| {
        summarize(per_class.iter().filter(|(n, _)| pick(n)).map(|(n, ap)| (n.as_str(), ap)))
    };
    Ok(MapReport {
        known: group(&|n| known.contains(n)),
        novel: group(&|n| !known.contains(n)),
        all: group(&|_| true),
    })
}

/// AP table for every GT class that has at least one annotation.
pub fn per_class_ap(detections: &DetectionSet, gt: &GroundTruthSet) -> Result<BTreeMap<String, ClassAp>> {
    let vocab: HashSet<&str> = gt.class_names.iter().map(String::as_str).collect();
    let mut dets_by_class: HashMap<&str, Vec<(ImageId, &Detection)>> = HashMap::new();
    for (&image_id, dets) in detections {
        for d in dets {
            if !vocab.contains(d.class_name.as_str()) {
                return Err(NcdlError::UnknownClass(d.class_name.clone()));
            }
            dets_by_class.entry(d.class_name.as_str()).or_default().push((image_id, d));
        }
    }
    let mut gts_by_class: HashMap<&str, BTreeMap<ImageId, Vec<&GtObject>>> = HashMap::new();
    for (&image_id, objs) in &gt.images {
        for o in objs {
            gts_by_class
                .entry(o.class_name.as_str())
                .or_default()
                .entry(image_id)
                .or_default()
                .push(o);
        }
    }

    let thresholds = iou_thresholds();
    let mut out = BTreeMap::new();
    for (name, gts) in gts_by_class {
        let mut dets = dets_by_class.remove(name).unwrap_or_default();
        dets.sort_by(|a, b| {
            b.1.confidence
                .total_cmp(&a.1.confidence)
                .then(a.0.cmp(&b.0))
                .then_with(|| box_key(&a.1.bbox).cmp(&box_key(&b.1.bbox)))
        });
        let all = thresholds.map(|t| average_precision(&dets, &gts, t, None).expect("class has GT"));
        let by_area = AreaGroup::ALL.map(|g| {
            let any = gts.values().flatten().any(|o| o.area_group == g);
            any.then(|| thresholds.map(|t| average_precision(&dets, &gts, t, Some(g)).unwrap_or(0.0)))
        });
        out.insert(name.to_string(), ClassAp { all, by_area });
    }
    Ok(out)
}

fn box_key(b: &BBox) -> [u64; 4] {
    [b.x1, b.y1, b.x2, b.y2].map(f64::to_bits)
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize<'a>(classes: impl Iterator<Item = (&'a str, &'a ClassAp)>) -> GroupMetrics {
    let classes: Vec<_> = classes.collect();
    let avg = |ap: &[f64; NUM_IOU_THRESHOLDS]| mean(ap.iter().copied()).expect("non-empty");
    let area = |i: usize| mean(classes.iter().filter_map(|(_, c)| c.by_area[i].as_ref().map(avg)));
    GroupMetrics {
        map: mean(classes.iter().map(|(_, c)| avg(&c.all))),
        map50: mean(classes.iter().map(|(_, c)| c.all[0])),
        map75: mean(classes.iter().map(|(_, c)| c.all[5])),
        map_s: area(0),
        map_m: area(1),
        map_l: area(2),
        per_class: classes.iter().map(|(n, c)| (n.to_string(), avg(&c.all))).collect(),
    }
}

/// AP for one class at one IoU threshold. With an area bucket, GT outside it
/// is ignored: detections matching it, and unmatched detections whose own
/// area is outside the bucket, count neither way. `None` when there is no
/// GT to recall.
fn average_precision(
    dets: &[(ImageId, &Detection)],
    gts: &BTreeMap<ImageId, Vec<&GtObject>>,
    threshold: f64,
    area: Option<AreaGroup>,
) -> Option<f64> {
    let in_range = |g: AreaGroup| area.is_none_or(|a| a == g);
    let num_gt = gts.values().flatten().filter(|o| in_range(o.area_group)).count();
    if num_gt == 0 {
        return None;
    }
    let mut taken: HashMap<ImageId, Vec<bool>> = gts.iter().map(|(&i, v)| (i, vec![false; v.len()])).collect();
    // true = TP, false = FP; ignored detections are dropped
    let mut outcomes = Vec::with_capacity(dets.len());
    for &(image_id, d) in dets {
        let objs = gts.get(&image_id).map(Vec::as_slice).unwrap_or(&[]);
        let used = taken.entry(image_id).or_default();
        let best = |want_in_range: bool| {
            objs.iter()
                .enumerate()
                .filter(|(j, o)| !used[*j] && in_range(o.area_group) == want_in_range)
                .map(|(j, o)| (j, iou(&d.bbox, &o.bbox)))
                .filter(|&(_, v)| v >= threshold)
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                })
        };
        if let Some((j, _)) = best(true) {
            used[j] = true;
            outcomes.push(true);
        } else if let Some((j, _)) = best(false) {
            used[j] = true;
        } else if in_range(AreaGroup::of_box(&d.bbox)) {
            outcomes.push(false);
        }
    }

    let mut precision = Vec::with_capacity(outcomes.len());
    let mut recall = Vec::with_capacity(outcomes.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for hit in outcomes {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&v| v < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obj(id: u64, b: BBox, name: &str) -> GtObject {
        GtObject {
            annotation_id: id,
            bbox: b,
            class_name: name.into(),
            area_group: AreaGroup::of_box(&b),
        }
    }

    fn det(b: BBox, name: &str, conf: f64) -> Detection {
        Detection {
            bbox: b,
            class_index: 0,
            class_name: name.into(),
            confidence: conf,
        }
    }

    fn gt_set(objs: Vec<(ImageId, GtObject)>, names: &[&str]) -> GroundTruthSet {
        let mut gt = GroundTruthSet {
            class_names: names.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        for (i, o) in objs {
            gt.images.entry(i).or_default().push(o);
        }
        gt
    }

    fn known() -> Vec<String> {
        vec!["a".into()]
    }

    fn sample_gt() -> GroundTruthSet {
        gt_set(
            vec![
                (1, obj(1, BBox::new(0.0, 0.0, 10.0, 10.0), "a")),
                (1, obj(2, BBox::new(50.0, 50.0, 150.0, 150.0), "x")),
                (2, obj(3, BBox::new(5.0, 5.0, 60.0, 45.0), "x")),
                (2, obj(4, BBox::new(100.0, 0.0, 130.0, 20.0), "a")),
            ],
            &["a", "x"],
        )
    }

    #[test]
    fn perfect_detections_score_one() {
        let gt = sample_gt();
        let dets: DetectionSet = gt
            .images
            .iter()
            .map(|(&i, objs)| (i, objs.iter().map(|o| det(o.bbox, &o.class_name, 1.0)).collect()))
            .collect();
        let r = evaluate_map(&dets, &gt, &known()).unwrap();
        for g in [&r.known, &r.novel, &r.all] {
            assert_eq!(g.map, Some(1.0));
            assert_eq!(g.map50, Some(1.0));
            assert_eq!(g.map75, Some(1.0));
        }
        assert_eq!(r.all.map_s, Some(1.0));
        assert_eq!(r.all.map_m, Some(1.0));
        assert_eq!(r.all.map_l, Some(1.0));
    }

    #[test]
    fn no_detections_score_zero() {
        let r = evaluate_map(&DetectionSet::new(), &sample_gt(), &known()).unwrap();
        assert_eq!(r.all.map, Some(0.0));
        assert_eq!(r.novel.map, Some(0.0));
    }

    #[test]
    fn hand_enumerated_pr_curve() {
        // g1=(0,0,10,10), g2=(20,20,30,30); d1 IoU .72 with g1 at .9, d2 = g1
        // at .8, d3 disjoint at .6. At t<=.70: TP,FP,FP -> precision 1 up to
        // recall .5 -> 51/101. At t>=.75: FP,TP,FP -> envelope .5 up to
        // recall .5 -> 25.5/101. Mean over 5+5 thresholds = 38.25/101.
        let gt = gt_set(
            vec![
                (1, obj(1, BBox::new(0.0, 0.0, 10.0, 10.0), "a")),
                (1, obj(2, BBox::new(20.0, 20.0, 30.0, 30.0), "a")),
            ],
            &["a"],
        );
        let mut dets = DetectionSet::new();
        dets.insert(
            1,
            vec![
                det(BBox::new(0.0, 0.0, 10.0, 7.2), "a", 0.9),
                det(BBox::new(0.0, 0.0, 10.0, 10.0), "a", 0.8),
                det(BBox::new(40.0, 40.0, 50.0, 50.0), "a", 0.6),
            ],
        );
        let r = evaluate_map(&dets, &gt, &known()).unwrap();
        assert!((r.all.map.unwrap() - 38.25 / 101.0).abs() < 1e-9);
        assert!((r.all.map50.unwrap() - 51.0 / 101.0).abs() < 1e-12);
        assert!((r.all.map75.unwrap() - 25.5 / 101.0).abs() < 1e-12);
        assert_eq!(r.novel.map, None);
    }

    #[test]
    fn unknown_class_is_an_error() {
        let mut dets = DetectionSet::new();
        dets.insert(1, vec![det(BBox::new(0.0, 0.0, 1.0, 1.0), "zebra", 0.5)]);
        assert!(matches!(
            evaluate_map(&dets, &sample_gt(), &known()),
            Err(NcdlError::UnknownClass(n)) if n == "zebra"
        ));
    }

    #[test]
    fn area_buckets_ignore_out_of_range_gt() {
        // small GT found, large GT missed: overall recall .5, small bucket perfect
        let gt = gt_set(
            vec![
                (1, obj(1, BBox::new(0.0, 0.0, 10.0, 10.0), "a")),
                (1, obj(2, BBox::new(100.0, 100.0, 300.0, 300.0), "a")),
            ],
            &["a"],
        );
        let mut dets = DetectionSet::new();
        dets.insert(1, vec![det(BBox::new(0.0, 0.0, 10.0, 10.0), "a", 0.9)]);
        let r = evaluate_map(&dets, &gt, &known()).unwrap();
        assert_eq!(r.all.map_s, Some(1.0));
        assert_eq!(r.all.map_m, None);
        assert_eq!(r.all.map_l, Some(0.0));
        assert!((r.all.map.unwrap() - 51.0 / 101.0).abs() < 1e-12);
    }

    fn arb_case() -> impl Strategy<Value = (GroundTruthSet, Vec<(ImageId, Detection)>)> {
        let gt_box = (0u64..3, 0u8..2, 0.0..80.0f64, 0.0..80.0f64, 4.0..40.0f64, 4.0..40.0f64);
        let det_box = (0u64..3, 0u8..2, 0.0..80.0f64, 0.0..80.0f64, 4.0..40.0f64, 4.0..40.0f64, 0.0..1.0f64);
        (
            prop::collection::vec(gt_box, 1..8),
            prop::collection::vec(det_box, 0..14),
        )
            .prop_map(|(g, d)| {
                let name = |c: u8| if c == 0 { "a" } else { "x" };
                let gt = gt_set(
                    g.into_iter()
                        .enumerate()
                        .map(|(k, (i, c, x, y, w, h))| (i, obj(k as u64, BBox::new(x, y, x + w, y + h), name(c))))
                        .collect(),
                    &["a", "x"],
                );
                let dets = d
                    .into_iter()
                    .map(|(i, c, x, y, w, h, s)| (i, det(BBox::new(x, y, x + w, y + h), name(c), s)))
                    .collect();
                (gt, dets)
            })
    }

    fn collect(dets: &[(ImageId, Detection)]) -> DetectionSet {
        let mut out = DetectionSet::new();
        for (i, d) in dets {
            out.entry(*i).or_default().push(d.clone());
        }
        out
    }

    proptest! {
        #[test]
        fn input_order_does_not_matter((gt, dets) in arb_case(), seed in any::<u64>()) {
            let base = evaluate_map(&collect(&dets), &gt, &known()).unwrap();
            let mut shuffled = dets.clone();
            let n = shuffled.len();
            if n > 1 {
                for k in 0..n {
                    let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(k as u64) % n as u64) as usize;
                    shuffled.swap(k, j);
                }
            }
            prop_assert_eq!(base, evaluate_map(&collect(&shuffled), &gt, &known()).unwrap());
        }

        #[test]
        fn duplicating_never_helps((gt, dets) in arb_case()) {
            let base = evaluate_map(&collect(&dets), &gt, &known()).unwrap();
            let doubled: Vec<_> = dets.iter().chain(dets.iter()).cloned().collect();
            let dup = evaluate_map(&collect(&doubled), &gt, &known()).unwrap();
            prop_assert!(dup.all.map.unwrap() <= base.all.map.unwrap() + 1e-12);
        }

        #[test]
        fn ap_non_increasing_in_threshold((gt, dets) in arb_case()) {
            for ap in per_class_ap(&collect(&dets), &gt).unwrap().values() {
                for w in ap.all.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
            }
        }
    }
}

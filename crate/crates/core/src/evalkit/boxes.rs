use crate::data::BBox;

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression over one class in one image. Returns the
/// kept indices ordered by confidence descending, then original index.
/// A box is suppressed when its IoU with a kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basic_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        // intersection 2, union 6
        assert!((iou(&a, &BBox::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_boxes_all_kept() {
        let boxes: Vec<BBox> = (0..4).map(|i| BBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 5.0, 5.0)).collect();
        assert_eq!(nms(&boxes, &[0.1, 0.4, 0.3, 0.2], 0.5), vec![1, 2, 3, 0]);
    }

    #[test]
    fn identical_boxes_keep_the_best() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn chain_follows_greedy_trace() {
        // A=(0,0,10,10) .9, B=(2,..) .8, C=(4,..) .7, D=(6,..) .6, all 10 tall.
        // IoU(A,B)=80/120 > .5 -> B dropped; IoU(A,C)=60/140 <= .5 -> C kept
        // (B is gone so cannot suppress it); IoU(A,D)=40/160, IoU(C,D)=80/120
        // -> D dropped.
        let boxes: Vec<BBox> = [0.0, 2.0, 4.0, 6.0]
            .iter()
            .map(|&x| BBox::new(x, 0.0, x + 10.0, 10.0))
            .collect();
        assert_eq!(nms(&boxes, &[0.9, 0.8, 0.7, 0.6], 0.5), vec![0, 2]);
    }
}

//! Records shared across the engine.
//!
//! Features for proposal `i` live in row `i` of the two view matrices of a
//! [`FeatureDataset`]; the per-proposal metadata lives in [`ProposalRecord`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{NcdlError, Result};

pub type ImageId = u64;

/// Axis-aligned box in corner format, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Converts an `[x, y, w, h]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Object size bucket with the usual 32² / 96² pixel thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaGroup {
    Small,
    Medium,
    Large,
}

impl AreaGroup {
    pub const SMALL_MAX: f64 = 32.0 * 32.0;
    pub const MEDIUM_MAX: f64 = 96.0 * 96.0;

    pub fn of_area(area: f64) -> Self {
        if area < Self::SMALL_MAX {
            AreaGroup::Small
        } else if area < Self::MEDIUM_MAX {
            AreaGroup::Medium
        } else {
            AreaGroup::Large
        }
    }

    pub fn of_box(b: &BBox) -> Self {
        Self::of_area(b.area())
    }

    pub const ALL: [AreaGroup; 3] = [AreaGroup::Small, AreaGroup::Medium, AreaGroup::Large];
}

/// Known class names plus the number of novel slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub known_names: Vec<String>,
    pub num_novel: usize,
}

impl ClassVocabulary {
    pub fn new(known_names: Vec<String>, num_novel: usize) -> Result<Self> {
        if known_names.is_empty() {
            return Err(NcdlError::Invalid("at least one known class is required".into()));
        }
        if num_novel == 0 {
            return Err(NcdlError::Invalid("at least one novel slot is required".into()));
        }
        let mut seen = HashSet::new();
        for name in &known_names {
            if !seen.insert(name) {
                return Err(NcdlError::Invalid(format!("duplicate class name {name:?}")));
            }
        }
        Ok(ClassVocabulary {
            known_names,
            num_novel,
        })
    }

    pub fn num_known(&self) -> usize {
        self.known_names.len()
    }

    /// C = K + N.
    pub fn num_classes(&self) -> usize {
        self.num_known() + self.num_novel
    }

    /// Slot index used for the background class during bootstrap.
    pub fn background_index(&self) -> usize {
        self.num_known()
    }
}

/// Metadata for one region proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    pub gt_class: Option<usize>,
    pub labeled_image: bool,
}

/// Proposals with two feature views each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub known_class_names: Vec<String>,
    pub proposals: Vec<ProposalRecord>,
    pub view1: Array2<f32>,
    pub view2: Array2<f32>,
}

impl FeatureDataset {
    pub fn empty(known_class_names: Vec<String>, feature_dim: usize) -> Self {
        FeatureDataset {
            known_class_names,
            proposals: Vec::new(),
            view1: Array2::zeros((0, feature_dim)),
            view2: Array2::zeros((0, feature_dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.view1.ncols()
    }

    pub fn num_known(&self) -> usize {
        self.known_class_names.len()
    }

    /// Proposal indices grouped by image, images in ascending id order,
    /// proposals in dataset order.
    pub fn images(&self) -> BTreeMap<ImageId, Vec<usize>> {
        let mut out: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.proposals.iter().enumerate() {
            out.entry(p.image_id).or_default().push(i);
        }
        out
    }

    /// Both views of the selected rows, upcast to f64.
    pub fn gather(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let f = self.feature_dim();
        let mut a = Array2::zeros((rows.len(), f));
        let mut b = Array2::zeros((rows.len(), f));
        for (r, &i) in rows.iter().enumerate() {
            a.row_mut(r)
                .iter_mut()
                .zip(self.view1.row(i))
                .for_each(|(d, &s)| *d = s as f64);
            b.row_mut(r)
                .iter_mut()
                .zip(self.view2.row(i))
                .for_each(|(d, &s)| *d = s as f64);
        }
        (a, b)
    }
}

/// One problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Offending proposal row, `None` for dataset-level problems.
    pub record: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(r) => write!(f, "record {r}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Checks every record invariant. An empty result means the dataset is valid.
pub fn validate_dataset(ds: &FeatureDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let dataset_level = |message: String| Violation {
        record: None,
        message,
    };

    if ds.view1.ncols() != ds.view2.ncols() {
        out.push(dataset_level(format!(
            "feature dimension mismatch: view1 has {} columns, view2 has {}",
            ds.view1.ncols(),
            ds.view2.ncols()
        )));
    }
    for (name, view) in [("view1", &ds.view1), ("view2", &ds.view2)] {
        if view.nrows() != ds.proposals.len() {
            out.push(dataset_level(format!(
                "{name} has {} rows but there are {} proposals",
                view.nrows(),
                ds.proposals.len()
            )));
        }
    }
    let mut names = HashSet::new();
    for name in &ds.known_class_names {
        if !names.insert(name) {
            out.push(dataset_level(format!("duplicate known class name {name:?}")));
        }
    }

    let k = ds.known_class_names.len();
    for (i, p) in ds.proposals.iter().enumerate() {
        let mut bad = |message: String| {
            out.push(Violation {
                record: Some(i),
                message,
            })
        };
        if !p.bbox.is_well_formed() {
            bad(format!("degenerate box {:?}", <[f64; 4]>::from(p.bbox)));
        }
        if !(0.0..=1.0).contains(&p.objectness) {
            bad(format!("objectness {} outside [0, 1]", p.objectness));
        }
        if let Some(c) = p.gt_class {
            if c >= k {
                bad(format!("gt_class {c} outside [0, {k})"));
            }
            if !p.labeled_image {
                bad("gt_class present on an unlabeled image".into());
            }
        }
        for (name, view) in [("view1", &ds.view1), ("view2", &ds.view2)] {
            if i < view.nrows() && view.row(i).iter().any(|v| !v.is_finite()) {
                bad(format!("non-finite value in {name}"));
            }
        }
    }
    out
}

/// One ground-truth object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub annotation_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_name: String,
    pub area_group: AreaGroup,
}

/// Ground-truth boxes per image, plus the evaluation vocabulary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub class_names: Vec<String>,
    pub images: BTreeMap<ImageId, Vec<GtObject>>,
}

impl GroundTruthSet {
    pub fn num_annotations(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }
}

/// One scored detection after class mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: usize,
    pub class_name: String,
    pub confidence: f64,
}

pub type DetectionSet = BTreeMap<ImageId, Vec<Detection>>;

/// Soft pseudo-labels, one distribution per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: Array2<f64>,
}

impl PseudoLabelBatch {
    pub fn new(labels: Array2<f64>) -> Result<Self> {
        for (i, row) in labels.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0)) {
                return Err(NcdlError::Invalid(format!("pseudo-label row {i} has a negative or NaN entry")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(NcdlError::Invalid(format!("pseudo-label row {i} sums to {s}")));
            }
        }
        Ok(PseudoLabelBatch { labels })
    }

    pub fn num_rows(&self) -> usize {
        self.labels.nrows()
    }
}

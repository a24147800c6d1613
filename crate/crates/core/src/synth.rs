//! Synthetic long-tailed feature datasets with Gaussian class clusters.
//!
//! Class `c` (known classes first, then novel) receives `⌈s0·ρ^c⌉` samples.
//! Samples are spread over images; known-class samples on labeled images
//! carry their class as annotation match. Every class-bearing sample gets a
//! ground-truth box that its proposal box overlaps with IoU well above 0.5;
//! distractors get boxes in otherwise empty grid cells.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{AreaGroup, BBox, FeatureDataset, GroundTruthSet, GtObject, ProposalRecord};
use crate::error::{NcdlError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub feature_dim: usize,
    pub num_known: usize,
    pub num_novel: usize,
    /// Size of class 0.
    pub samples_first_class: usize,
    /// Geometric decay ρ of class sizes, in (0, 1].
    pub decay: f64,
    pub cluster_center_scale: f64,
    pub within_cluster_stddev: f64,
    pub view_noise_stddev: f64,
    /// Distractor proposals per class-bearing proposal.
    pub distractor_fraction: f64,
    pub objects_per_image: usize,
    pub labeled_fraction: f64,
    pub image_size: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            feature_dim: 20,
            num_known: 5,
            num_novel: 15,
            samples_first_class: 200,
            decay: 0.8,
            cluster_center_scale: 10.0,
            within_cluster_stddev: 1.0,
            view_noise_stddev: 0.25,
            distractor_fraction: 0.1,
            objects_per_image: 10,
            labeled_fraction: 0.5,
            image_size: 640.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(NcdlError::config(key, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("synth.feature_dim", self.feature_dim)?;
        positive("synth.num_known", self.num_known)?;
        positive("synth.objects_per_image", self.objects_per_image)?;
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(NcdlError::config("synth.decay", format!("must lie in (0, 1], got {}", self.decay)));
        }
        for (key, v) in [
            ("synth.cluster_center_scale", self.cluster_center_scale),
            ("synth.within_cluster_stddev", self.within_cluster_stddev),
            ("synth.view_noise_stddev", self.view_noise_stddev),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NcdlError::config(key, format!("must be finite and non-negative, got {v}")));
            }
        }
        for (key, v) in [
            ("synth.distractor_fraction", self.distractor_fraction),
            ("synth.labeled_fraction", self.labeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NcdlError::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.image_size >= 16.0 && self.image_size.is_finite()) {
            return Err(NcdlError::config("synth.image_size", "must be at least 16 pixels"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_known + self.num_novel
    }

    /// `⌈s0·ρ^c⌉`, with a small tolerance so that products which are exact
    /// integers in real arithmetic are not bumped up by rounding noise.
    pub fn class_size(&self, class: usize) -> usize {
        let v = self.samples_first_class as f64 * self.decay.powi(class as i32);
        (v - 1e-9).ceil().max(0.0) as usize
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| {
                if c < self.num_known {
                    format!("known_{c:02}")
                } else {
                    format!("novel_{:02}", c - self.num_known)
                }
            })
            .collect()
    }
}

/// True class of every proposal, plus the generating centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLabels {
    pub class_names: Vec<String>,
    pub num_known: usize,
    /// Per proposal row; `None` for distractors.
    pub labels: Vec<Option<usize>>,
    pub centers: Vec<Vec<f64>>,
}

pub struct SynthOutput {
    pub dataset: FeatureDataset,
    pub ground_truth: GroundTruthSet,
    pub truth: TrueLabels,
}

struct Sample {
    class: Option<usize>,
    view1: Vec<f64>,
    view2: Vec<f64>,
}

/// Deterministic in `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;
    let names = spec.class_names();

    let centers: Vec<Vec<f64>> = (0..spec.num_classes())
        .map(|_| {
            let v: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / n * spec.cluster_center_scale).collect()
        })
        .collect();

    let within = Normal::new(0.0, spec.within_cluster_stddev).expect("validated");
    let view_noise = Normal::new(0.0, spec.view_noise_stddev).expect("validated");
    let mut samples = Vec::new();
    let make_views = |base: Vec<f64>, rng: &mut ChaCha8Rng| {
        let v2 = base.iter().map(|&x| x + view_noise.sample(rng)).collect();
        (base, v2)
    };
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.class_size(c) {
            let base: Vec<f64> = center.iter().map(|&m| m + within.sample(&mut rng)).collect();
            let (view1, view2) = make_views(base, &mut rng);
            samples.push(Sample {
                class: Some(c),
                view1,
                view2,
            });
        }
    }
    let num_objects = samples.len();
    let num_distractors = (spec.distractor_fraction * num_objects as f64).round() as usize;
    let s = spec.cluster_center_scale;
    for _ in 0..num_distractors {
        let base: Vec<f64> = (0..f)
            .map(|_| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 })
            .collect();
        let (view1, view2) = make_views(base, &mut rng);
        samples.push(Sample {
            class: None,
            view1,
            view2,
        });
    }
    samples.shuffle(&mut rng);

    let per_image = spec.objects_per_image;
    let num_images = samples.len().div_ceil(per_image);
    let num_labeled = (spec.labeled_fraction * num_images as f64).round() as usize;
    let grid = (per_image as f64).sqrt().ceil() as usize;
    let cell = spec.image_size / grid as f64;

    let present: Vec<bool> = (0..spec.num_classes()).map(|c| spec.class_size(c) > 0).collect();
    let mut ground_truth = GroundTruthSet {
        class_names: names
            .iter()
            .zip(&present)
            .filter(|(_, &p)| p)
            .map(|(n, _)| n.clone())
            .collect(),
        ..Default::default()
    };
    let mut proposals = Vec::with_capacity(samples.len());
    let mut view1 = Array2::<f32>::zeros((samples.len(), f));
    let mut view2 = Array2::<f32>::zeros((samples.len(), f));
    let mut labels = Vec::with_capacity(samples.len());
    let mut next_annotation = 1u64;

    for (row, sample) in samples.iter().enumerate() {
        let image_index = row / per_image;
        let image_id = image_index as u64 + 1;
        let labeled_image = image_index < num_labeled;
        let slot = row % per_image;
        let (cx, cy) = ((slot % grid) as f64 * cell, (slot / grid) as f64 * cell);

        let w = rng.random_range(0.1..0.9) * cell;
        let h = rng.random_range(0.1..0.9) * cell;
        let x = cx + rng.random_range(0.0..(cell - w));
        let y = cy + rng.random_range(0.0..(cell - h));
        let object_box = BBox::new(x, y, x + w, y + h);
        let mut jitter = |extent: f64| rng.random_range(-0.04..0.04) * extent;
        let proposal_box = BBox::new(
            object_box.x1 + jitter(w),
            object_box.y1 + jitter(h),
            object_box.x2 + jitter(w),
            object_box.y2 + jitter(h),
        );

        let objectness = match sample.class {
            Some(_) => rng.random_range(0.5..1.0),
            None => rng.random_range(0.0..0.5),
        };
        let gt_class = sample.class.filter(|&c| labeled_image && c < spec.num_known);
        proposals.push(ProposalRecord {
            image_id,
            bbox: proposal_box,
            objectness,
            gt_class,
            labeled_image,
        });
        let objects = ground_truth.images.entry(image_id).or_default();
        if let Some(c) = sample.class {
            objects.push(GtObject {
                annotation_id: next_annotation,
                bbox: object_box,
                class_name: names[c].clone(),
                area_group: AreaGroup::of_box(&object_box),
            });
            next_annotation += 1;
        }
        for (d, (&a, &b)) in sample.view1.iter().zip(&sample.view2).enumerate() {
            view1[[row, d]] = a as f32;
            view2[[row, d]] = b as f32;
        }
        labels.push(sample.class);
    }

    Ok(SynthOutput {
        dataset: FeatureDataset {
            known_class_names: names[..spec.num_known].to_vec(),
            proposals,
            view1,
            view2,
        },
        ground_truth,
        truth: TrueLabels {
            class_names: names,
            num_known: spec.num_known,
            labels,
            centers,
        },
    })
}

/// Fraction of class-bearing proposals whose view-1 feature is nearest to
/// its own class center.
pub fn nearest_center_accuracy(dataset: &FeatureDataset, truth: &TrueLabels) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, label) in truth.labels.iter().enumerate() {
        let Some(c) = *label else { continue };
        let x = dataset.view1.row(row);
        let nearest = truth
            .centers
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let d: f64 = x.iter().zip(m).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
                (j, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j);
        total += 1;
        correct += usize::from(nearest == Some(c));
    }
    if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    }
}

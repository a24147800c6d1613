//! End-to-end pipeline stages shared by the CLI and the benchmark.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::ExperimentConfig;
use crate::data::{DetectionSet, FeatureDataset, GroundTruthSet};
use crate::error::{NcdlError, Result};
use crate::evalkit::{
    build_mapping, classify_gt_boxes, cluster_accuracy, evaluate_map, postprocess, ClassMapping, ClusterAccuracy,
    Cooccurrence, MapReport, PostprocessConfig,
};
use crate::heads::HeadParameters;
use crate::inference::class_probabilities;
use crate::synth::{generate, nearest_center_accuracy};
use crate::trainer::{bootstrap_known_head, bootstrap_samples, run_discovery, start_discovery, StepReport, TrainerState};

/// Supervised bootstrap on the labeled images of `ds`.
pub fn bootstrap_stage(ds: &FeatureDataset, cfg: &ExperimentConfig) -> Result<(Checkpoint, f64)> {
    let (x, targets) = bootstrap_samples(ds);
    let out = bootstrap_known_head(x.view(), &targets, &ds.known_class_names, &cfg.bootstrap, cfg.seed)?;
    let ck = Checkpoint {
        kind: CheckpointKind::Bootstrap,
        known_class_names: ds.known_class_names.clone(),
        iteration: 0,
        params: HeadParameters {
            known_weights: out.known_weights,
            novel_heads: Vec::new(),
        },
    };
    Ok((ck, out.accuracy))
}

/// Discovery phase from a bootstrap checkpoint.
pub fn discovery_stage(
    ds: &FeatureDataset,
    boot: &Checkpoint,
    cfg: &ExperimentConfig,
    on_step: impl FnMut(&TrainerState, &StepReport) -> Result<()>,
) -> Result<(Checkpoint, Vec<StepReport>)> {
    if boot.kind != CheckpointKind::Bootstrap {
        return Err(NcdlError::Invalid("discovery starts from a bootstrap checkpoint".into()));
    }
    if boot.known_class_names != ds.known_class_names {
        return Err(NcdlError::Invalid(format!(
            "checkpoint known classes {:?} differ from the dataset's {:?}",
            boot.known_class_names, ds.known_class_names
        )));
    }
    let mut state = start_discovery(&boot.params.known_weights, &cfg.discovery, cfg.seed)?;
    let log = run_discovery(&mut state, ds, &cfg.discovery, on_step)?;
    Ok((discovery_checkpoint(&state, &ds.known_class_names), log))
}

pub fn discovery_checkpoint(state: &TrainerState, known_class_names: &[String]) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Discovery,
        known_class_names: known_class_names.to_vec(),
        iteration: state.iter,
        params: state.params.clone(),
    }
}

/// Mapping table as written by the `map` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingReport {
    pub mapping: ClassMapping,
    pub annotations: usize,
    /// Annotations with no proposal at IoU >= 0.5.
    pub skipped: usize,
    pub accuracy: ClusterAccuracy,
}

pub fn mapping_stage(params: &HeadParameters, ds: &FeatureDataset, gt: &GroundTruthSet) -> Result<MappingReport> {
    let preds = classify_gt_boxes(params, ds, gt)?;
    let num_slots = params.num_known() + params.primary().num_novel();
    let counts = Cooccurrence::from_predictions(&preds.predictions, num_slots, &gt.class_names)?;
    let mapping = build_mapping(&counts, &ds.known_class_names);
    let accuracy = cluster_accuracy(&preds.predictions, &mapping, &ds.known_class_names);
    Ok(MappingReport {
        mapping,
        annotations: gt.num_annotations(),
        skipped: preds.skipped,
        accuracy,
    })
}

pub fn infer_stage(
    params: &HeadParameters,
    ds: &FeatureDataset,
    mapping: &ClassMapping,
    cfg: &PostprocessConfig,
) -> Result<DetectionSet> {
    if ds.is_empty() {
        return Ok(DetectionSet::new());
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let (x, _) = ds.gather(&all);
    let probs = class_probabilities(params, x.view())?;
    postprocess(probs.view(), &ds.proposals, mapping, cfg)
}

/// mAP report as written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub map: MapReport,
    pub mapping: ClassMapping,
    pub skipped: usize,
}

pub fn evaluate_stage(
    params: &HeadParameters,
    ds: &FeatureDataset,
    gt: &GroundTruthSet,
    mapping: &MappingReport,
    cfg: &PostprocessConfig,
) -> Result<EvaluationReport> {
    let detections = infer_stage(params, ds, &mapping.mapping, cfg)?;
    Ok(EvaluationReport {
        map: evaluate_map(&detections, gt, &ds.known_class_names)?,
        mapping: mapping.mapping.clone(),
        skipped: mapping.skipped,
    })
}

/// Summary of one synthetic end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRun {
    pub seed: u64,
    pub nearest_center_accuracy: f64,
    pub bootstrap_accuracy: f64,
    pub mapping: MappingReport,
    pub evaluation: EvaluationReport,
    pub final_step: Option<StepReport>,
}

/// generate → bootstrap → discover → map → evaluate.
pub fn run_synthetic(cfg: &ExperimentConfig) -> Result<(SyntheticRun, Checkpoint)> {
    cfg.validate()?;
    let data = generate(&cfg.synth)?;
    let (boot, bootstrap_accuracy) = bootstrap_stage(&data.dataset, cfg)?;
    let (ck, log) = discovery_stage(&data.dataset, &boot, cfg, |_, _| Ok(()))?;
    let mapping = mapping_stage(&ck.params, &data.dataset, &data.ground_truth)?;
    let evaluation = evaluate_stage(&ck.params, &data.dataset, &data.ground_truth, &mapping, &cfg.postprocess)?;
    Ok((
        SyntheticRun {
            seed: cfg.seed,
            nearest_center_accuracy: nearest_center_accuracy(&data.dataset, &data.truth),
            bootstrap_accuracy,
            mapping,
            evaluation,
            final_step: log.last().cloned(),
        },
        ck,
    ))
}

//! Soft pseudo-labels under a class-marginal constraint.
//!
//! [`sinkhorn_labels`] solves the entropic transport problem between samples
//! (unit mass each) and classes (prior masses) with the score matrix
//! `lambda * logits`. [`kmeans_labels`] is the hard-assignment alternative.

mod kmeans;

pub use kmeans::{kmeans, kmeans_labels, KMeansResult};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PseudoLabelBatch;
use crate::error::{NcdlError, Result};
use crate::priors::PriorMarginals;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub num_iters: usize,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            lambda: 20.0,
            num_iters: 3,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(NcdlError::config("sinkhorn.lambda", "must be a positive finite number"));
        }
        if self.num_iters == 0 {
            return Err(NcdlError::config("sinkhorn.num_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Which labeler produces the self-supervision targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelerKind {
    #[default]
    Sinkhorn,
    Kmeans,
}

fn check_inputs(logits: ArrayView2<'_, f64>, prior: &PriorMarginals) -> Result<()> {
    if prior.len() != logits.ncols() {
        return Err(NcdlError::Shape(format!(
            "prior has {} classes but logits have {} columns",
            prior.len(),
            logits.ncols()
        )));
    }
    let rows = logits.nrows() as f64;
    if (prior.total_mass - rows).abs() > 1e-6 * rows.max(1.0) {
        return Err(NcdlError::Shape(format!(
            "prior total mass {} does not match {} rows",
            prior.total_mass, rows
        )));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(NcdlError::NonFinite(format!("logit {v} passed to Sinkhorn")));
    }
    if let Some(m) = prior.masses.iter().find(|m| !(**m > 0.0)) {
        return Err(NcdlError::Invalid(format!("prior mass {m} must be positive")));
    }
    Ok(())
}

/// Sinkhorn-Knopp pseudo-labels. Each output row is a probability
/// distribution; column sums approach the prior masses as `num_iters` grows.
pub fn sinkhorn_labels(logits: ArrayView2<'_, f64>, prior: &PriorMarginals, cfg: &SinkhornConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_inputs(logits, prior)?;
    if logits.nrows() == 0 {
        return Ok(Array2::zeros(logits.dim()));
    }
    Ok(if cfg.log_domain {
        sinkhorn_log(logits, prior, cfg)
    } else {
        sinkhorn_scaling(logits, prior, cfg)
    })
}

fn sinkhorn_log(logits: ArrayView2<'_, f64>, prior: &PriorMarginals, cfg: &SinkhornConfig) -> Array2<f64> {
    let (rows, cols) = logits.dim();
    let mut logq = logits.mapv(|v| cfg.lambda * v);
    let max = logq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logq.mapv_inplace(|v| v - max);
    let log_prior: Vec<f64> = prior.masses.iter().map(|m| m.ln()).collect();

    let mut col_max = vec![0.0; cols];
    let mut col_sum = vec![0.0; cols];
    for _ in 0..cfg.num_iters {
        // columns -> prior masses
        col_max.fill(f64::NEG_INFINITY);
        for row in logq.rows() {
            for (m, &v) in col_max.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        col_sum.fill(0.0);
        for row in logq.rows() {
            for ((s, &m), &v) in col_sum.iter_mut().zip(&col_max).zip(row) {
                *s += (v - m).exp();
            }
        }
        let shift: Vec<f64> = (0..cols).map(|j| log_prior[j] - (col_max[j] + col_sum[j].ln())).collect();
        for mut row in logq.rows_mut() {
            row.iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
        }

        // rows -> unit mass
        for mut row in logq.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
    }
    debug_assert_eq!(logq.nrows(), rows);
    logq.mapv_inplace(f64::exp);
    logq
}

/// Plain scaling iterations after subtracting the global maximum. Entries
/// that underflow stay zero, so this variant is only suitable when
/// `lambda * (max - min)` of the logits is well below ~700.
fn sinkhorn_scaling(logits: ArrayView2<'_, f64>, prior: &PriorMarginals, cfg: &SinkhornConfig) -> Array2<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q = logits.mapv(|v| (cfg.lambda * (v - max)).exp());
    for _ in 0..cfg.num_iters {
        let sums = q.sum_axis(Axis(0));
        let scale: Vec<f64> = sums
            .iter()
            .zip(&prior.masses)
            .map(|(&s, &p)| if s > 0.0 { p / s } else { 1.0 })
            .collect();
        for mut row in q.rows_mut() {
            row.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
        }
        for mut row in q.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
    }
    q
}

/// Labels the batch jointly with the memory rows and keeps only the batch rows.
/// `prior.total_mass` must equal `B + M_sz`.
pub fn batch_pseudolabels(
    batch_logits: ArrayView2<'_, f64>,
    memory_logits: ArrayView2<'_, f64>,
    prior: &PriorMarginals,
    cfg: &SinkhornConfig,
) -> Result<PseudoLabelBatch> {
    if batch_logits.ncols() != memory_logits.ncols() && memory_logits.nrows() > 0 {
        return Err(NcdlError::Shape(format!(
            "batch logits have {} columns, memory logits {}",
            batch_logits.ncols(),
            memory_logits.ncols()
        )));
    }
    let b = batch_logits.nrows();
    let labels = if memory_logits.nrows() == 0 {
        sinkhorn_labels(batch_logits, prior, cfg)?
    } else {
        let all = concatenate(Axis(0), &[batch_logits, memory_logits]).expect("column counts checked");
        sinkhorn_labels(all.view(), prior, cfg)?.slice(s![..b, ..]).to_owned()
    };
    Ok(PseudoLabelBatch { labels })
}

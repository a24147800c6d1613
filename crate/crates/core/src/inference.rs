//! Concatenated known + novel logits and their softmax.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::error::Result;
use crate::heads::{forward_known, forward_novel, HeadParameters};

/// `[known logits, primary novel head logits]`, `B × (K + N)`.
pub fn concat_logits(params: &HeadParameters, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let known = forward_known(features, &params.known_weights)?;
    let (novel, _) = forward_novel(features, params.primary())?;
    Ok(concatenate![Axis(1), known, novel])
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn class_probabilities(params: &HeadParameters, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(softmax_rows(&concat_logits(params, features)?))
}

/// Argmax slot per row; ties go to the lowest slot.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect()
}

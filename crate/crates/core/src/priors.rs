//! Target class marginals for constrained pseudo-labeling.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{NcdlError, Result};

/// Per-class target mass; masses sum to `total_mass`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMarginals {
    pub masses: Vec<f64>,
    pub total_mass: f64,
}

impl PriorMarginals {
    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

/// Which prior shape to build for each Sinkhorn solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorKind {
    Lognormal { mu: f64, sigma: f64 },
    Uniform,
}

impl Default for PriorKind {
    fn default() -> Self {
        PriorKind::Lognormal { mu: 1.0, sigma: 0.5 }
    }
}

impl PriorKind {
    pub fn build(&self, num_classes: usize, total_mass: f64) -> Result<PriorMarginals> {
        match *self {
            PriorKind::Lognormal { mu, sigma } => lognormal_prior(num_classes, total_mass, mu, sigma),
            PriorKind::Uniform => uniform_prior(num_classes, total_mass),
        }
    }
}

fn check_common(num_classes: usize, total_mass: f64) -> Result<()> {
    if num_classes == 0 {
        return Err(NcdlError::Invalid("prior needs at least one class".into()));
    }
    if !(total_mass > 0.0 && total_mass.is_finite()) {
        return Err(NcdlError::Invalid(format!("prior total mass must be positive, got {total_mass}")));
    }
    Ok(())
}

/// Long-tailed marginals: the log-normal quantile function evaluated at the
/// midpoints `(i + 0.5) / C`, sorted descending and rescaled to sum to
/// `total_mass`. Slot 0 receives the largest mass.
pub fn lognormal_prior(num_classes: usize, total_mass: f64, mu: f64, sigma: f64) -> Result<PriorMarginals> {
    check_common(num_classes, total_mass)?;
    if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return Err(NcdlError::Invalid(format!(
            "log-normal parameters must be finite with sigma > 0, got mu={mu} sigma={sigma}"
        )));
    }
    let normal = Normal::new(mu, sigma).expect("sigma checked positive");
    let c = num_classes as f64;
    let mut masses: Vec<f64> = (0..num_classes)
        .map(|i| normal.inverse_cdf((i as f64 + 0.5) / c).exp())
        .collect();
    masses.sort_by(|a, b| b.total_cmp(a));
    let scale = total_mass / masses.iter().sum::<f64>();
    masses.iter_mut().for_each(|m| *m *= scale);
    Ok(PriorMarginals { masses, total_mass })
}

pub fn uniform_prior(num_classes: usize, total_mass: f64) -> Result<PriorMarginals> {
    check_common(num_classes, total_mass)?;
    Ok(PriorMarginals {
        masses: vec![total_mass / num_classes as f64; num_classes],
        total_mass,
    })
}

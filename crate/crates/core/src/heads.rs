//! Known-class linear head and novel-class head (MLP projector followed by a
//! cosine classifier), with exact backward passes and momentum SGD.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NcdlError, Result};

/// Lower bound on vector norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..=bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Projector layers (ReLU between them, none after the last) and the cosine
/// prototype matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelHead {
    pub projector: Vec<Linear>,
    /// `N × D`
    pub prototypes: Array2<f64>,
    pub temperature: f64,
}

impl NovelHead {
    /// `hidden` widths then output width `out_dim`; no layers at all when
    /// `use_projector` is false, in which case `D` equals the input dimension.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        use_projector: bool,
        num_novel: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Self {
        let mut projector = Vec::new();
        let mut width = input_dim;
        if use_projector {
            for &h in hidden.iter().chain(std::iter::once(&out_dim)) {
                projector.push(Linear::he_uniform(width, h, rng));
                width = h;
            }
        }
        let mut prototypes: Array2<f64> = Array2::from_shape_fn((num_novel, width), |_| StandardNormal.sample(rng));
        for mut row in prototypes.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        NovelHead {
            projector,
            prototypes,
            temperature,
        }
    }

    pub fn num_novel(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.projector.first().map_or(self.prototypes.ncols(), Linear::input_dim)
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NcdlError::Invalid(format!("cosine temperature must be positive, got {}", self.temperature)));
        }
        let mut width = self.input_dim();
        for (l, layer) in self.projector.iter().enumerate() {
            if layer.input_dim() != width || layer.bias.len() != layer.output_dim() {
                return Err(NcdlError::Shape(format!("projector layer {l} does not chain from width {width}")));
            }
            width = layer.output_dim();
        }
        if self.prototypes.ncols() != width {
            return Err(NcdlError::Shape(format!(
                "prototypes have dimension {} but the projector outputs {width}",
                self.prototypes.ncols()
            )));
        }
        Ok(())
    }
}

/// All trainable head parameters. `novel_heads[0]` is the head used for
/// inference; further heads only exist in the multi-head variant.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    /// `K × F̂` (or `(K+1) × F̂` while the background row is present)
    pub known_weights: Array2<f64>,
    pub novel_heads: Vec<NovelHead>,
}

pub const KNOWN_TENSOR: &str = "known";

impl HeadParameters {
    pub fn feature_dim(&self) -> usize {
        self.known_weights.ncols()
    }

    pub fn num_known(&self) -> usize {
        self.known_weights.nrows()
    }

    pub fn primary(&self) -> &NovelHead {
        &self.novel_heads[0]
    }

    pub fn validate(&self) -> Result<()> {
        for (h, head) in self.novel_heads.iter().enumerate() {
            head.validate()?;
            if head.input_dim() != self.feature_dim() {
                return Err(NcdlError::Shape(format!(
                    "novel head {h} takes {} features, known head {}",
                    head.input_dim(),
                    self.feature_dim()
                )));
            }
        }
        if self.tensors().iter().any(|(_, _, data)| data.iter().any(|v| !v.is_finite())) {
            return Err(NcdlError::NonFinite("head parameters".into()));
        }
        Ok(())
    }

    /// Same structure, all tensors zero.
    pub fn zeros_like(&self) -> Self {
        HeadParameters {
            known_weights: Array2::zeros(self.known_weights.dim()),
            novel_heads: self
                .novel_heads
                .iter()
                .map(|h| NovelHead {
                    projector: h
                        .projector
                        .iter()
                        .map(|l| Linear {
                            weight: Array2::zeros(l.weight.dim()),
                            bias: Array1::zeros(l.bias.len()),
                        })
                        .collect(),
                    prototypes: Array2::zeros(h.prototypes.dim()),
                    temperature: h.temperature,
                })
                .collect(),
        }
    }

    /// Named views of every tensor in a fixed order: `(name, shape, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![(
            KNOWN_TENSOR.to_string(),
            self.known_weights.shape().to_vec(),
            self.known_weights.as_slice().expect("standard layout"),
        )];
        for (h, head) in self.novel_heads.iter().enumerate() {
            for (l, layer) in head.projector.iter().enumerate() {
                out.push((
                    format!("novel{h}.layer{l}.weight"),
                    layer.weight.shape().to_vec(),
                    layer.weight.as_slice().expect("standard layout"),
                ));
                out.push((
                    format!("novel{h}.layer{l}.bias"),
                    layer.bias.shape().to_vec(),
                    layer.bias.as_slice().expect("standard layout"),
                ));
            }
            out.push((
                format!("novel{h}.prototypes"),
                head.prototypes.shape().to_vec(),
                head.prototypes.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![(
            KNOWN_TENSOR.to_string(),
            self.known_weights.as_slice_mut().expect("standard layout"),
        )];
        for (h, head) in self.novel_heads.iter_mut().enumerate() {
            for (l, layer) in head.projector.iter_mut().enumerate() {
                out.push((
                    format!("novel{h}.layer{l}.weight"),
                    layer.weight.as_slice_mut().expect("standard layout"),
                ));
                out.push((
                    format!("novel{h}.layer{l}.bias"),
                    layer.bias.as_slice_mut().expect("standard layout"),
                ));
            }
            out.push((
                format!("novel{h}.prototypes"),
                head.prototypes.as_slice_mut().expect("standard layout"),
            ));
        }
        out
    }
}

fn check_features(features: ArrayView2<'_, f64>, dim: usize) -> Result<()> {
    if features.ncols() != dim {
        return Err(NcdlError::Shape(format!(
            "features have {} columns, head expects {dim}",
            features.ncols()
        )));
    }
    Ok(())
}

/// `features · Wᵀ`, no bias.
pub fn forward_known(features: ArrayView2<'_, f64>, known_weights: &Array2<f64>) -> Result<Array2<f64>> {
    check_features(features, known_weights.ncols())?;
    Ok(features.dot(&known_weights.t()))
}

/// Intermediate values kept for [`backward`].
#[derive(Debug, Clone)]
pub struct NovelCache {
    /// Input to each projector layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each projector layer.
    pre: Vec<Array2<f64>>,
    /// Projector output, `B × D`.
    projected: Array2<f64>,
    projected_norms: Array1<f64>,
    normalized: Array2<f64>,
    prototype_norms: Array1<f64>,
    normalized_prototypes: Array2<f64>,
}

fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn divide_rows(m: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms) {
        let d = n.max(NORM_EPS);
        row.mapv_inplace(|v| v / d);
    }
    out
}

/// Novel logits `cos(prototype_j, g(f_i)) / τ` and the cache for backward.
pub fn forward_novel(features: ArrayView2<'_, f64>, head: &NovelHead) -> Result<(Array2<f64>, NovelCache)> {
    head.validate()?;
    check_features(features, head.input_dim())?;
    let mut inputs = Vec::with_capacity(head.projector.len());
    let mut pre = Vec::with_capacity(head.projector.len());
    let mut h = features.to_owned();
    let last = head.projector.len().saturating_sub(1);
    for (l, layer) in head.projector.iter().enumerate() {
        let mut z = h.dot(&layer.weight.t());
        z += &layer.bias;
        inputs.push(h);
        h = if l < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
        pre.push(z);
    }
    let projected = h;
    let projected_norms = row_norms(&projected);
    let normalized = divide_rows(&projected, &projected_norms);
    let prototype_norms = row_norms(&head.prototypes);
    let normalized_prototypes = divide_rows(&head.prototypes, &prototype_norms);
    let logits = normalized.dot(&normalized_prototypes.t()) / head.temperature;
    Ok((
        logits,
        NovelCache {
            inputs,
            pre,
            projected,
            projected_norms,
            normalized,
            prototype_norms,
            normalized_prototypes,
        },
    ))
}

/// Gradient through `v / max(‖v‖, ε)` for each row.
fn normalize_backward(v: &Array2<f64>, norms: &Array1<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(v.dim());
    Zip::from(out.rows_mut())
        .and(v.rows())
        .and(upstream.rows())
        .and(norms)
        .for_each(|mut o, vr, g, &n| {
            let d = n.max(NORM_EPS);
            let radial = if n > NORM_EPS { vr.dot(&g) / (n * n * n) } else { 0.0 };
            Zip::from(&mut o).and(&vr).and(&g).for_each(|o, &vi, &gi| {
                *o = gi / d - vi * radial;
            });
        });
    out
}

/// Exact parameter gradients given upstream gradients at the known logits
/// and at each novel head's logits.
pub fn backward(
    features: ArrayView2<'_, f64>,
    grad_known: ArrayView2<'_, f64>,
    grad_novel: &[Array2<f64>],
    caches: &[NovelCache],
    params: &HeadParameters,
) -> Result<HeadParameters> {
    if grad_novel.len() != params.novel_heads.len() || caches.len() != params.novel_heads.len() {
        return Err(NcdlError::Shape(format!(
            "{} novel heads but {} gradients and {} caches",
            params.novel_heads.len(),
            grad_novel.len(),
            caches.len()
        )));
    }
    if grad_known.dim() != (features.nrows(), params.num_known()) {
        return Err(NcdlError::Shape(format!(
            "known gradient has shape {:?}, expected {:?}",
            grad_known.dim(),
            (features.nrows(), params.num_known())
        )));
    }
    let mut grads = params.zeros_like();
    grads.known_weights = grad_known.t().dot(&features);

    for (((head, cache), g), out) in params
        .novel_heads
        .iter()
        .zip(caches)
        .zip(grad_novel)
        .zip(grads.novel_heads.iter_mut())
    {
        if g.dim() != (cache.projected.nrows(), head.num_novel()) {
            return Err(NcdlError::Shape(format!(
                "novel gradient has shape {:?}, expected {:?}",
                g.dim(),
                (cache.projected.nrows(), head.num_novel())
            )));
        }
        let inv_tau = 1.0 / head.temperature;
        let d_normalized = g.dot(&cache.normalized_prototypes) * inv_tau;
        let d_normalized_protos = g.t().dot(&cache.normalized) * inv_tau;
        out.prototypes = normalize_backward(&head.prototypes, &cache.prototype_norms, &d_normalized_protos);

        let mut upstream = normalize_backward(&cache.projected, &cache.projected_norms, &d_normalized);
        for l in (0..head.projector.len()).rev() {
            if l + 1 < head.projector.len() {
                Zip::from(&mut upstream).and(&cache.pre[l]).for_each(|u, &p| {
                    if p <= 0.0 {
                        *u = 0.0;
                    }
                });
            }
            out.projector[l].weight = upstream.t().dot(&cache.inputs[l]);
            out.projector[l].bias = upstream.sum_axis(Axis(0));
            if l > 0 {
                upstream = upstream.dot(&head.projector[l].weight);
            }
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Momentum buffers mirroring the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: HeadParameters,
    pub config: SgdConfig,
    /// Tensor names (see [`HeadParameters::tensors`]) that are never updated.
    pub frozen: HashSet<String>,
}

impl OptimizerState {
    pub fn new(params: &HeadParameters, config: SgdConfig) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            config,
            frozen: HashSet::new(),
        }
    }
}

/// `v ← μ·v + g + λ·p; p ← p − lr·v` for every non-frozen tensor.
pub fn sgd_step(params: &mut HeadParameters, grads: &HeadParameters, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut vel = state.velocity.tensors_mut();
    let mut ps = params.tensors_mut();
    if grad_tensors.len() != ps.len() || vel.len() != ps.len() {
        return Err(NcdlError::Shape("gradient structure does not match parameters".into()));
    }
    let SgdConfig { momentum, weight_decay } = state.config;
    for (((name, p), (_, v)), (_, _, g)) in ps.iter_mut().zip(vel.iter_mut()).zip(&grad_tensors) {
        if state.frozen.contains(name.as_str()) {
            continue;
        }
        if p.len() != g.len() || v.len() != g.len() {
            return Err(NcdlError::Shape(format!("tensor {name} changed size")));
        }
        for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

//! Supervised bootstrap of the known head, then the discovery phase:
//! swapped-view pseudo-labeling against a class-marginal prior plus a
//! down-weighted supervised term.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{NcdlError, Result};
use crate::evalkit::hungarian;
use crate::heads::{backward, forward_known, forward_novel, sgd_step, HeadParameters, NovelCache, NovelHead, OptimizerState, SgdConfig, KNOWN_TENSOR};
use crate::inference::softmax_rows;
use crate::memory::FeatureMemory;
use crate::priors::PriorKind;
use crate::pseudolabel::{batch_pseudolabels, kmeans, LabelerKind, SinkhornConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            epochs: 30,
            lr: 0.01,
            batch_size: 64,
            momentum: 0.9,
            init_std: 0.01,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(NcdlError::config("bootstrap.lr", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(NcdlError::config("bootstrap.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NcdlError::config("bootstrap.momentum", "must lie in [0, 1)"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(NcdlError::config("bootstrap.init_std", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutput {
    /// `(K+1) × F̂`, background last.
    pub known_weights: Array2<f64>,
    pub accuracy: f64,
}

/// View-1 features of every proposal on a labeled image, with target
/// `gt_class` or the background index `K`.
pub fn bootstrap_samples(ds: &FeatureDataset) -> (Array2<f64>, Vec<usize>) {
    let k = ds.num_known();
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.proposals[i].labeled_image).collect();
    let targets = rows.iter().map(|&i| ds.proposals[i].gt_class.unwrap_or(k)).collect();
    (ds.gather(&rows).0, targets)
}

/// `(K+1)`-way softmax regression trained with mini-batch momentum SGD.
pub fn bootstrap_known_head(
    features: ArrayView2<'_, f64>,
    targets: &[usize],
    known_names: &[String],
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<BootstrapOutput> {
    cfg.validate()?;
    let k = known_names.len();
    if targets.len() != features.nrows() {
        return Err(NcdlError::Shape(format!("{} targets for {} feature rows", targets.len(), features.nrows())));
    }
    if let Some(t) = targets.iter().find(|&&t| t > k) {
        return Err(NcdlError::Invalid(format!("target {t} outside 0..={k}")));
    }
    let mut counts = vec![0usize; k + 1];
    targets.iter().for_each(|&t| counts[t] += 1);
    let empty: Vec<String> = (0..k).filter(|&c| counts[c] == 0).map(|c| known_names[c].clone()).collect();
    if !empty.is_empty() {
        return Err(NcdlError::EmptyClasses(empty));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, cfg.init_std).expect("validated");
    let mut w = Array2::from_shape_fn((k + 1, features.ncols()), |_| init.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros(w.dim());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = features.select(Axis(0), chunk);
            let mut g = softmax_rows(&x.dot(&w.t()));
            for (mut row, &i) in g.rows_mut().into_iter().zip(chunk) {
                row[targets[i]] -= 1.0;
            }
            let grad = g.t().dot(&x) / chunk.len() as f64;
            velocity = velocity * cfg.momentum + grad;
            w.scaled_add(-cfg.lr, &velocity);
        }
    }
    let predicted = crate::inference::argmax_rows(&features.dot(&w.t()));
    let correct = predicted.iter().zip(targets).filter(|(p, t)| p == t).count();
    let accuracy = if targets.is_empty() { 0.0 } else { correct as f64 / targets.len() as f64 };
    Ok(BootstrapOutput { known_weights: w, accuracy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    /// Weight of the supervised term.
    pub alpha: f64,
    pub total_iters: usize,
    pub batch_images: usize,
    /// Top proposals per image by objectness.
    pub proposals_per_image: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub ramp_iters: usize,
    pub prior: PriorKind,
    pub sinkhorn: SinkhornConfig,
    pub labeler: LabelerKind,
    pub kmeans_iters: usize,
    /// Memory capacity in batches of `batch_images × proposals_per_image`.
    pub memory_batches: usize,
    /// Batches pushed to memory before the self-supervised term starts.
    pub warmup_iters: usize,
    pub swap_views: bool,
    pub use_projector: bool,
    pub projector_hidden: Vec<usize>,
    pub projector_dim: usize,
    pub temperature: f64,
    pub num_novel: usize,
    /// Sizes of additional novel heads trained alongside the primary one.
    pub extra_novel_heads: Vec<usize>,
    pub freeze_known: bool,
    pub sgd: SgdConfig,
    /// Checkpoint interval in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            alpha: 0.5,
            total_iters: 15000,
            batch_images: 16,
            proposals_per_image: 50,
            lr_start: 1e-5,
            lr_peak: 1e-2,
            lr_end: 1e-3,
            ramp_iters: 3000,
            prior: PriorKind::default(),
            sinkhorn: SinkhornConfig::default(),
            labeler: LabelerKind::Sinkhorn,
            kmeans_iters: 20,
            memory_batches: 100,
            warmup_iters: 150,
            swap_views: true,
            use_projector: true,
            projector_hidden: vec![512, 512],
            projector_dim: 256,
            temperature: 0.1,
            num_novel: 3000,
            extra_novel_heads: Vec::new(),
            freeze_known: false,
            sgd: SgdConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("discovery.{k}");
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(NcdlError::config(&key("alpha"), "must be a finite non-negative number"));
        }
        if self.ramp_iters > self.total_iters {
            return Err(NcdlError::config(&key("ramp_iters"), "must not exceed total_iters"));
        }
        if self.batch_images == 0 {
            return Err(NcdlError::config(&key("batch_images"), "must be at least 1"));
        }
        if self.proposals_per_image == 0 {
            return Err(NcdlError::config(&key("proposals_per_image"), "must be at least 1"));
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_peak", self.lr_peak), ("lr_end", self.lr_end)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(NcdlError::config(&key(name), "must be a finite non-negative number"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NcdlError::config(&key("temperature"), "must be positive"));
        }
        if self.num_novel == 0 || self.extra_novel_heads.contains(&0) {
            return Err(NcdlError::config(&key("num_novel"), "every novel head needs at least one slot"));
        }
        if self.use_projector && (self.projector_dim == 0 || self.projector_hidden.contains(&0)) {
            return Err(NcdlError::config(&key("projector_hidden"), "layer widths must be positive"));
        }
        if let PriorKind::Lognormal { sigma, .. } = self.prior {
            if !(sigma > 0.0) {
                return Err(NcdlError::config(&key("prior.sigma"), "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return Err(NcdlError::config(&key("sgd.momentum"), "must lie in [0, 1)"));
        }
        self.sinkhorn.validate().map_err(|e| match e {
            NcdlError::Config { key: k, reason } => NcdlError::Config {
                key: format!("discovery.{k}"),
                reason,
            },
            other => other,
        })
    }

    pub fn memory_capacity(&self) -> usize {
        self.memory_batches * self.batch_images * self.proposals_per_image
    }

    pub fn novel_head_sizes(&self) -> Vec<usize> {
        std::iter::once(self.num_novel).chain(self.extra_novel_heads.iter().copied()).collect()
    }
}

/// Linear ramp from `lr_start` to `lr_peak` over `ramp_iters`, then cosine
/// decay to `lr_end` at `total_iters`.
pub fn lr_at(iter: usize, cfg: &DiscoveryConfig) -> f64 {
    if iter < cfg.ramp_iters {
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * iter as f64 / cfg.ramp_iters as f64
    } else {
        let span = cfg.total_iters.saturating_sub(cfg.ramp_iters).max(1) as f64;
        let t = ((iter - cfg.ramp_iters) as f64 / span).min(1.0);
        cfg.lr_end + (cfg.lr_peak - cfg.lr_end) * (1.0 + (PI * t).cos()) / 2.0
    }
}

/// Everything that changes during discovery.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: HeadParameters,
    pub optimizer: OptimizerState,
    /// One memory per view.
    pub memories: [FeatureMemory; 2],
    pub iter: usize,
    pub seed: u64,
}

/// Drops the background row of the bootstrapped head and initializes the
/// novel head(s) from `seed`.
pub fn start_discovery(boot_known: &Array2<f64>, cfg: &DiscoveryConfig, seed: u64) -> Result<TrainerState> {
    cfg.validate()?;
    if boot_known.nrows() < 2 {
        return Err(NcdlError::Shape(format!(
            "bootstrap head has {} rows; expected K+1 with K >= 1",
            boot_known.nrows()
        )));
    }
    let f = boot_known.ncols();
    let known_weights = boot_known.slice(s![..boot_known.nrows() - 1, ..]).to_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let novel_heads = cfg
        .novel_head_sizes()
        .into_iter()
        .map(|n| {
            NovelHead::init(
                f,
                &cfg.projector_hidden,
                cfg.projector_dim,
                cfg.use_projector,
                n,
                cfg.temperature,
                &mut rng,
            )
        })
        .collect();
    let params = HeadParameters {
        known_weights,
        novel_heads,
    };
    let mut optimizer = OptimizerState::new(&params, cfg.sgd.clone());
    if cfg.freeze_known {
        optimizer.frozen.insert(KNOWN_TENSOR.to_string());
    }
    let cap = cfg.memory_capacity();
    Ok(TrainerState {
        params,
        optimizer,
        memories: [FeatureMemory::new(cap, f), FeatureMemory::new(cap, f)],
        iter: 0,
        seed,
    })
}

/// Proposals of one step. `gt[i]` is the known class of annotation-matched
/// rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Batch {
    #[serde(skip)]
    pub view1: Array2<f64>,
    #[serde(skip)]
    pub view2: Array2<f64>,
    pub gt: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    fn view(&self, v: usize) -> ArrayView2<'_, f64> {
        if v == 0 {
            self.view1.view()
        } else {
            self.view2.view()
        }
    }
}

/// Pseudo-labels per novel head, for view 1 and view 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTargets {
    pub per_head: Vec<[Array2<f64>; 2]>,
}

fn head_logits(params: &HeadParameters, head: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let known = forward_known(x, &params.known_weights)?;
    let (novel, _) = forward_novel(x, &params.novel_heads[head])?;
    Ok(concatenate![Axis(1), known, novel])
}

/// Pseudo-labels for the batch rows, computed jointly with the memory
/// snapshot of the same view under the current weights.
pub fn pseudo_targets(
    params: &HeadParameters,
    batch: &Batch,
    memory: [&Array2<f64>; 2],
    cfg: &DiscoveryConfig,
    kmeans_seed: u64,
) -> Result<PseudoTargets> {
    let mut per_head = Vec::with_capacity(params.novel_heads.len());
    for h in 0..params.novel_heads.len() {
        let mut views = Vec::with_capacity(2);
        for (v, mem) in memory.iter().enumerate() {
            let batch_logits = head_logits(params, h, batch.view(v))?;
            let memory_logits = head_logits(params, h, mem.view())?;
            let c = batch_logits.ncols();
            let q = match cfg.labeler {
                LabelerKind::Sinkhorn => {
                    let prior = cfg.prior.build(c, (batch_logits.nrows() + memory_logits.nrows()) as f64)?;
                    batch_pseudolabels(batch_logits.view(), memory_logits.view(), &prior, &cfg.sinkhorn)?.labels
                }
                LabelerKind::Kmeans => kmeans_targets(
                    &batch_logits,
                    &memory_logits,
                    cfg.kmeans_iters,
                    kmeans_seed.wrapping_add(v as u64),
                )?,
            };
            views.push(q);
        }
        let q2 = views.pop().expect("two views");
        let q1 = views.pop().expect("two views");
        per_head.push([q1, q2]);
    }
    Ok(PseudoTargets { per_head })
}

/// Hard labels from k-means over the logits of batch and memory. Cluster
/// ids are tied to class slots by a Hungarian match maximizing the summed
/// predicted probability of each cluster's members.
fn kmeans_targets(batch: &Array2<f64>, memory: &Array2<f64>, iters: usize, seed: u64) -> Result<Array2<f64>> {
    let all = concatenate![Axis(0), batch.view(), memory.view()];
    let c = all.ncols();
    let k = c.min(all.nrows());
    let res = kmeans(all.view(), k, iters, seed)?;
    let probs = softmax_rows(&all);
    let mut score = Array2::<f64>::zeros((k, c));
    for (i, &a) in res.assignments.iter().enumerate() {
        score.row_mut(a).zip_mut_with(&probs.row(i), |s, &p| *s -= p);
    }
    let slot_of: Vec<usize> = {
        let mut m = vec![0; k];
        for (cluster, slot) in hungarian(score.view())?.pairs {
            m[cluster] = slot;
        }
        m
    };
    let mut q = Array2::zeros((batch.nrows(), c));
    for i in 0..batch.nrows() {
        q[[i, slot_of[res.assignments[i]]]] = 1.0;
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ss: f64,
    pub cls: f64,
    /// Annotation-matched rows in the batch.
    pub matched: usize,
}

/// `L_ss + α·L_cls` averaged over novel heads, with its gradient. The
/// pseudo-labels are constants. `targets = None` drops `L_ss` (warm-up).
/// `L_cls` uses view-1 logits of the matched rows.
pub fn discovery_loss(
    params: &HeadParameters,
    batch: &Batch,
    targets: Option<&PseudoTargets>,
    alpha: f64,
    swap_views: bool,
) -> Result<(LossBreakdown, HeadParameters)> {
    let b = batch.len();
    let k = params.num_known();
    let heads = params.novel_heads.len();
    if let Some(t) = targets {
        if t.per_head.len() != heads {
            return Err(NcdlError::Shape(format!("{} target sets for {heads} heads", t.per_head.len())));
        }
    }
    let matched: Vec<(usize, usize)> = batch
        .gt
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|c| (i, c)))
        .collect();
    if let Some(&(_, c)) = matched.iter().find(|(_, c)| *c >= k) {
        return Err(NcdlError::Invalid(format!("gt class {c} outside the {k} known classes")));
    }
    let hw = 1.0 / heads as f64;
    let mut out = LossBreakdown {
        matched: matched.len(),
        ..Default::default()
    };
    let mut grads = params.zeros_like();

    for v in 0..2 {
        let x = batch.view(v);
        let known = forward_known(x, &params.known_weights)?;
        let mut grad_known = Array2::<f64>::zeros(known.dim());
        let mut grad_novel = Vec::with_capacity(heads);
        let mut caches: Vec<NovelCache> = Vec::with_capacity(heads);
        for h in 0..heads {
            let (novel, cache) = forward_novel(x, &params.novel_heads[h])?;
            let logits = concatenate![Axis(1), known.view(), novel.view()];
            let p = softmax_rows(&logits);
            let mut g = Array2::<f64>::zeros(logits.dim());
            if let Some(t) = targets {
                let q = &t.per_head[h][if swap_views { 1 - v } else { v }];
                if q.dim() != p.dim() {
                    return Err(NcdlError::Shape(format!("targets {:?} vs logits {:?}", q.dim(), p.dim())));
                }
                let w = 0.5 * hw / b as f64;
                let mut ce = 0.0;
                for ((pi, qi), gi) in p.iter().zip(q.iter()).zip(g.iter_mut()) {
                    if *qi > 0.0 {
                        ce -= qi * pi.max(f64::MIN_POSITIVE).ln();
                    }
                    *gi += w * (pi - qi);
                }
                out.ss += w * ce;
            }
            if v == 0 && !matched.is_empty() && alpha > 0.0 {
                let w = alpha * hw / matched.len() as f64;
                for &(i, c) in &matched {
                    out.cls -= hw / matched.len() as f64 * p[[i, c]].max(f64::MIN_POSITIVE).ln();
                    g.row_mut(i).zip_mut_with(&p.row(i), |gi, &pi| *gi += w * pi);
                    g[[i, c]] -= w;
                }
            } else if v == 0 && !matched.is_empty() {
                for &(i, c) in &matched {
                    out.cls -= hw / matched.len() as f64 * p[[i, c]].max(f64::MIN_POSITIVE).ln();
                }
            }
            grad_known += &g.slice(s![.., ..k]);
            grad_novel.push(g.slice(s![.., k..]).to_owned());
            caches.push(cache);
        }
        let gv = backward(x, grad_known.view(), &grad_novel, &caches, params)?;
        add_assign(&mut grads, &gv);
    }
    out.total = out.ss + alpha * out.cls;
    Ok((out, grads))
}

fn add_assign(acc: &mut HeadParameters, g: &HeadParameters) {
    let src = g.tensors();
    for ((_, dst), (_, _, s)) in acc.tensors_mut().into_iter().zip(src) {
        dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub warmup: bool,
    pub batch_rows: usize,
    pub memory_rows: usize,
    /// Mean over rows of the largest view-1 pseudo-label entry (primary head).
    pub pseudo_max_mean: Option<f64>,
    /// Fraction of rows whose view-1 pseudo-label argmax is a novel slot.
    pub pseudo_novel_fraction: Option<f64>,
}

#[derive(Serialize)]
struct StepDump<'a> {
    iter: usize,
    lr: f64,
    loss: LossBreakdown,
    gt: &'a [Option<usize>],
    view1: Vec<Vec<f64>>,
    view2: Vec<Vec<f64>>,
}

/// One discovery iteration: label, take a gradient step, push the batch into
/// the memories.
pub fn discovery_step(state: &mut TrainerState, batch: &Batch, cfg: &DiscoveryConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(NcdlError::Invalid("empty discovery batch".into()));
    }
    let iter = state.iter;
    let lr = lr_at(iter, cfg);
    let warmup = iter < cfg.warmup_iters;
    let snapshots = [state.memories[0].snapshot(), state.memories[1].snapshot()];
    let targets = if warmup {
        None
    } else {
        let seed = state.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(2 * iter as u64);
        Some(pseudo_targets(&state.params, batch, [&snapshots[0], &snapshots[1]], cfg, seed)?)
    };
    let (loss, grads) = discovery_loss(&state.params, batch, targets.as_ref(), cfg.alpha, cfg.swap_views)?;
    if !(loss.total.is_finite() && loss.ss.is_finite() && loss.cls.is_finite()) {
        let dump = StepDump {
            iter,
            lr,
            loss,
            gt: &batch.gt,
            view1: batch.view1.rows().into_iter().map(|r| r.to_vec()).collect(),
            view2: batch.view2.rows().into_iter().map(|r| r.to_vec()).collect(),
        };
        return Err(NcdlError::NonFiniteLoss {
            iter,
            dump: serde_json::to_string(&dump).unwrap_or_default(),
        });
    }
    let active = !warmup || (loss.matched > 0 && cfg.alpha > 0.0);
    if active {
        sgd_step(&mut state.params, &grads, &mut state.optimizer, lr)?;
    }
    state.memories[0].push_batch(batch.view1.view())?;
    state.memories[1].push_batch(batch.view2.view())?;
    state.iter += 1;

    let (pseudo_max_mean, pseudo_novel_fraction) = match &targets {
        Some(t) => {
            let q = &t.per_head[0][0];
            let k = state.params.num_known();
            let maxes: Vec<(usize, f64)> = q
                .rows()
                .into_iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, (j, &v)| if v > a.1 { (j, v) } else { a })
                })
                .collect();
            let n = maxes.len() as f64;
            (
                Some(maxes.iter().map(|m| m.1).sum::<f64>() / n),
                Some(maxes.iter().filter(|m| m.0 >= k).count() as f64 / n),
            )
        }
        None => (None, None),
    };
    Ok(StepReport {
        iter,
        lr,
        loss,
        warmup,
        batch_rows: batch.len(),
        memory_rows: snapshots[0].nrows(),
        pseudo_max_mean,
        pseudo_novel_fraction,
    })
}

/// Streams batches of images: images are shuffled with a seeded RNG each
/// pass; a batch that runs past the end continues into the next pass.
pub struct BatchSampler {
    view1: Array2<f64>,
    view2: Array2<f64>,
    gt: Vec<Option<usize>>,
    /// Capped proposal rows of each image.
    images: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    batch_images: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(ds: &FeatureDataset, cfg: &DiscoveryConfig, seed: u64) -> Self {
        let all: Vec<usize> = (0..ds.len()).collect();
        let (view1, view2) = ds.gather(&all);
        let images: Vec<Vec<usize>> = ds
            .images()
            .into_values()
            .map(|mut rows| {
                rows.sort_by(|&a, &b| {
                    ds.proposals[b]
                        .objectness
                        .total_cmp(&ds.proposals[a].objectness)
                        .then(a.cmp(&b))
                });
                rows.truncate(cfg.proposals_per_image);
                rows.sort_unstable();
                rows
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        BatchSampler {
            view1,
            view2,
            gt: ds.proposals.iter().map(|p| p.gt_class).collect(),
            order: (0..images.len()).collect(),
            cursor: images.len(),
            batch_images: cfg.batch_images.min(images.len()),
            images,
            rng,
        }
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut rows = Vec::new();
        for _ in 0..self.batch_images {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            rows.extend_from_slice(&self.images[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Batch {
            view1: self.view1.select(Axis(0), &rows),
            view2: self.view2.select(Axis(0), &rows),
            gt: rows.iter().map(|&r| self.gt[r]).collect(),
        }
    }
}

/// Runs `cfg.total_iters` steps. `on_step` sees the state after every step
/// (checkpointing, progress).
pub fn run_discovery(
    state: &mut TrainerState,
    dataset: &FeatureDataset,
    cfg: &DiscoveryConfig,
    mut on_step: impl FnMut(&TrainerState, &StepReport) -> Result<()>,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.total_iters);
    if cfg.total_iters == 0 {
        return Ok(log);
    }
    let mut sampler = BatchSampler::new(dataset, cfg, state.seed);
    if sampler.num_images() == 0 {
        return Err(NcdlError::Invalid("dataset has no images to train on".into()));
    }
    while state.iter < cfg.total_iters {
        let batch = sampler.next_batch();
        let report = discovery_step(state, &batch, cfg)?;
        on_step(state, &report)?;
        log.push(report);
    }
    Ok(log)
}

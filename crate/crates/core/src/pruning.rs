//! Heuristic, fixed group-lasso and reweighted group-lasso pruning.
//!
//! The regularizer is `lambda * sum_l phi_l * sum_u pen_u * ||W_l[u]||_g`
//! where `u` ranges over the units of the scheme (filters, kernel groups or
//! kernel-group locations), `phi_l` is the layer's dense FLOPs when FLOPs
//! weighting is enabled (1 otherwise) and `pen_u` are the reweighting
//! penalties (all 1 for plain group lasso).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::sparsity::{
    group_norm, mask_for_target_rate, mask_from_threshold, sparsity_stats, unit_count, unit_flops, unit_map,
    GroupMask, GroupNormTensor, LayerGeometry, NormKind, Scheme, SparsityStats,
};
use crate::tensor::{partition, GroupPartition, WeightTensor5D};
use crate::train::{train_epochs, EpochLog, Gradients, LrSchedule, RegularizerHook, ToyModel, ToyTask, TrainOptions};

/// How the regularizer enters the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UpdateRule {
    /// Proximal step after every SGD step; produces exact zeros.
    #[default]
    Proximal,
    /// Regularizer subgradient added to the loss gradient.
    Subgradient,
}

/// When a unit counts as "converged to zero".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaskPolicy {
    /// Model-wide greedy masking up to a FLOPs pruning rate.
    TargetRate(f64),
    /// Keep units whose norm is strictly above the threshold.
    Absolute(f64),
    /// Per layer, keep units above `c * RMS(unit norms)`.
    RelativeRms(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Heuristic,
    Regularization,
    Reweighted,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Heuristic, Algorithm::Regularization, Algorithm::Reweighted];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Heuristic => "heuristic",
            Algorithm::Regularization => "reg",
            Algorithm::Reweighted => "reweighted",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "heuristic" => Ok(Algorithm::Heuristic),
            "reg" | "regularization" => Ok(Algorithm::Regularization),
            "reweighted" => Ok(Algorithm::Reweighted),
            other => Err(invalid(format!("unknown pruning algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub lambda: f64,
    pub scheme: Scheme,
    pub g_m: usize,
    pub g_n: usize,
    pub norm: NormKind,
    pub reweight_iterations: usize,
    pub epsilon: f64,
    pub flops_weighted: bool,
    pub policy: MaskPolicy,
    /// Epochs of regularized training per reweighting round.
    pub prune_epochs: usize,
    pub retrain_epochs: usize,
    /// Learning rate of the prune phase; the retrain phase starts from it
    /// and follows a cosine schedule.
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub update: UpdateRule,
    pub allow_dead_layers: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            scheme: Scheme::Kgs,
            g_m: 4,
            g_n: 4,
            norm: NormKind::default(),
            reweight_iterations: 3,
            epsilon: 1e-6,
            flops_weighted: false,
            policy: MaskPolicy::TargetRate(2.0),
            prune_epochs: 5,
            retrain_epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            update: UpdateRule::Proximal,
            allow_dead_layers: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(1..=8).contains(&self.reweight_iterations) {
            return Err(invalid(format!("reweight_iterations must be in [1, 8], got {}", self.reweight_iterations)));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.g_m == 0 || self.g_n == 0 {
            return Err(invalid("group sizes must be >= 1"));
        }
        match self.policy {
            MaskPolicy::TargetRate(r) if !(r >= 1.0) => Err(invalid(format!("target rate must be >= 1, got {r}"))),
            MaskPolicy::Absolute(t) | MaskPolicy::RelativeRms(t) if !(t >= 0.0) => {
                Err(invalid(format!("threshold must be >= 0, got {t}")))
            }
            _ => Ok(()),
        }
    }

    fn train_options(&self, epochs: usize, schedule: LrSchedule, salt: u64) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            schedule,
            seed: self.seed.wrapping_add(salt),
        }
    }
}

/// The group-lasso regularizer of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Regularizer {
    pub lambda: f64,
    pub scheme: Scheme,
    pub norm: NormKind,
    pub partitions: Vec<GroupPartition>,
    /// `phi_l`: dense FLOPs of the layer under FLOPs weighting, else 1.
    pub layer_weights: Vec<f64>,
}

impl Regularizer {
    pub fn new(
        lambda: f64,
        scheme: Scheme,
        norm: NormKind,
        partitions: Vec<GroupPartition>,
        layer_weights: Vec<f64>,
    ) -> Result<Self> {
        if partitions.len() != layer_weights.len() {
            return Err(shape_err("one layer weight per partition required"));
        }
        Ok(Self {
            lambda,
            scheme,
            norm,
            partitions,
            layer_weights,
        })
    }

    pub fn for_model(model: &ToyModel, cfg: &PruneConfig) -> Result<Self> {
        let geo = model.geometry();
        let parts = layer_partitions(model, cfg)?;
        let phi = geo
            .iter()
            .map(|g| if cfg.flops_weighted { g.dense_flops() as f64 } else { 1.0 })
            .collect();
        Self::new(cfg.lambda, cfg.scheme, cfg.norm, parts, phi)
    }

    fn check(&self, weights: &[&WeightTensor5D<f64>], penalties: Option<&PenaltyState>) -> Result<()> {
        if weights.len() != self.partitions.len() {
            return Err(shape_err(format!("{} weight tensors for {} layers", weights.len(), self.partitions.len())));
        }
        for (l, (w, p)) in weights.iter().zip(&self.partitions).enumerate() {
            if w.dims() != p.dims {
                return Err(shape_err(format!("layer {l}: weights {:?} vs partition {:?}", w.dims(), p.dims)));
            }
        }
        if let Some(s) = penalties {
            if s.penalties.len() != self.partitions.len() {
                return Err(shape_err("penalty state covers a different layer count"));
            }
            for (l, (pen, part)) in s.penalties.iter().zip(&self.partitions).enumerate() {
                if pen.len() != unit_count(self.scheme, part) {
                    return Err(shape_err(format!("layer {l}: {} penalties for {} units", pen.len(), unit_count(self.scheme, part))));
                }
            }
        }
        Ok(())
    }

    fn penalty(penalties: Option<&PenaltyState>, l: usize, u: usize) -> f64 {
        penalties.map_or(1.0, |s| s.penalties[l][u])
    }

    /// Per-unit `(l1, sum of squares)` of one layer.
    fn unit_sums(&self, l: usize, w: &WeightTensor5D<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let part = &self.partitions[l];
        let map = unit_map(self.scheme, part);
        let n = unit_count(self.scheme, part);
        let (mut l1, mut sq) = (vec![0.0; n], vec![0.0; n]);
        for (&u, &x) in map.iter().zip(w.data()) {
            l1[u] += x.abs();
            sq[u] += x * x;
        }
        (map, l1, sq)
    }

    pub fn value(&self, weights: &[&WeightTensor5D<f64>], penalties: Option<&PenaltyState>) -> Result<f64> {
        self.check(weights, penalties)?;
        let mut total = 0.0;
        for (l, w) in weights.iter().enumerate() {
            let (_, l1, sq) = self.unit_sums(l, w);
            let layer: f64 = l1
                .iter()
                .zip(&sq)
                .enumerate()
                .map(|(u, (&a, &s))| Self::penalty(penalties, l, u) * self.norm.combine(a, s))
                .sum();
            total += self.layer_weights[l] * layer;
        }
        Ok(self.lambda * total)
    }

    /// `d value / d w`; zero on units whose l2 norm is 0.
    pub fn subgradient(&self, weights: &[&WeightTensor5D<f64>], penalties: Option<&PenaltyState>) -> Result<Vec<Vec<f64>>> {
        self.check(weights, penalties)?;
        let alpha = self.norm.alpha();
        Ok(weights
            .iter()
            .enumerate()
            .map(|(l, w)| {
                let (map, _, sq) = self.unit_sums(l, w);
                map.iter()
                    .zip(w.data())
                    .map(|(&u, &x)| {
                        let r = sq[u].sqrt();
                        if r == 0.0 {
                            return 0.0;
                        }
                        let c = self.lambda * self.layer_weights[l] * Self::penalty(penalties, l, u);
                        c * (alpha * sign(x) + (1.0 - alpha) * x / r)
                    })
                    .collect()
            })
            .collect())
    }

    /// Proximal operator of `step * value`, applied in place: soft-threshold
    /// by the l1 share, then shrink each unit's l2 norm by the l2 share.
    pub fn prox(&self, weights: &mut [&mut WeightTensor5D<f64>], penalties: Option<&PenaltyState>, step: f64) -> Result<()> {
        {
            let view: Vec<&WeightTensor5D<f64>> = weights.iter().map(|w| &**w).collect();
            self.check(&view, penalties)?;
        }
        let alpha = self.norm.alpha();
        for (l, w) in weights.iter_mut().enumerate() {
            let part = &self.partitions[l];
            let map = unit_map(self.scheme, part);
            let tau: Vec<f64> = (0..unit_count(self.scheme, part))
                .map(|u| step * self.lambda * self.layer_weights[l] * Self::penalty(penalties, l, u))
                .collect();
            let data = w.data_mut();
            let mut sq = vec![0.0; tau.len()];
            for (&u, x) in map.iter().zip(data.iter_mut()) {
                let t = tau[u] * alpha;
                *x = x.signum() * (x.abs() - t).max(0.0);
                sq[u] += *x * *x;
            }
            for (&u, x) in map.iter().zip(data.iter_mut()) {
                let r = sq[u].sqrt();
                let scale = if r > 0.0 { (1.0 - tau[u] * (1.0 - alpha) / r).max(0.0) } else { 0.0 };
                *x *= scale;
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn regularizer_value(weights: &[&WeightTensor5D<f64>], reg: &Regularizer) -> Result<f64> {
    reg.value(weights, None)
}

pub fn regularizer_subgradient(
    weights: &[&WeightTensor5D<f64>],
    reg: &Regularizer,
    penalties: Option<&PenaltyState>,
) -> Result<Vec<Vec<f64>>> {
    reg.subgradient(weights, penalties)
}

/// Reweighting penalties, one per unit of every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyState {
    pub scheme: Scheme,
    pub norm: NormKind,
    pub penalties: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub iteration: usize,
}

impl PenaltyState {
    /// All penalties 1 (round one coincides with plain group lasso).
    pub fn ones(scheme: Scheme, norm: NormKind, partitions: &[GroupPartition], epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self {
            scheme,
            norm,
            penalties: partitions.iter().map(|p| vec![1.0; unit_count(scheme, p)]).collect(),
            epsilon,
            iteration: 0,
        })
    }
}

/// `pen = 1 / (||W[u]||_g^2 + eps)` for every unit.
pub fn reweight_update(state: &PenaltyState, weights: &[&WeightTensor5D<f64>], partitions: &[GroupPartition]) -> Result<PenaltyState> {
    if weights.len() != state.penalties.len() || partitions.len() != weights.len() {
        return Err(shape_err("penalty state, weights and partitions cover different layer counts"));
    }
    let mut penalties = Vec::with_capacity(weights.len());
    for (l, (w, part)) in weights.iter().zip(partitions).enumerate() {
        let norms = group_norm(*w, part, state.scheme, state.norm)?;
        if norms.values.len() != state.penalties[l].len() {
            return Err(shape_err(format!("layer {l}: penalty count does not match unit count")));
        }
        penalties.push(norms.values.iter().map(|r| 1.0 / (r * r + state.epsilon)).collect());
    }
    Ok(PenaltyState {
        penalties,
        iteration: state.iteration + 1,
        ..state.clone()
    })
}

/// Per-layer partitions for `cfg` (Filter pruning ignores `g_M`, `g_N`).
pub fn layer_partitions(model: &ToyModel, cfg: &PruneConfig) -> Result<Vec<GroupPartition>> {
    model
        .convs()
        .iter()
        .map(|c| match cfg.scheme {
            Scheme::Filter => partition(c.weights.dims(), 1, 1),
            _ => partition(c.weights.dims(), cfg.g_m, cfg.g_n),
        })
        .collect()
}

/// Result of a pruning run.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub masks: Vec<GroupMask>,
    pub model: ToyModel,
    /// Unit norms (or heuristic importances) the mask was derived from.
    pub scores: Vec<GroupNormTensor>,
    pub stats: SparsityStats,
    pub log: Vec<EpochLog>,
}

struct PenaltyHook<'a> {
    reg: &'a Regularizer,
    penalties: &'a PenaltyState,
    update: UpdateRule,
}

impl RegularizerHook for PenaltyHook<'_> {
    fn add_gradient(&mut self, model: &ToyModel, grads: &mut Gradients) {
        if self.update != UpdateRule::Subgradient {
            return;
        }
        let sub = self
            .reg
            .subgradient(&model.conv_weights(), Some(self.penalties))
            .expect("regularizer built for this model");
        for (g, s) in grads.conv_w.iter_mut().zip(sub) {
            for (a, b) in g.iter_mut().zip(s) {
                *a += b;
            }
        }
    }

    fn after_step(&mut self, model: &mut ToyModel, lr: f64) {
        if self.update != UpdateRule::Proximal {
            return;
        }
        let n = model.convs().len();
        let mut ws: Vec<WeightTensor5D<f64>> = (0..n).map(|l| model.convs()[l].weights.clone()).collect();
        {
            let mut refs: Vec<&mut WeightTensor5D<f64>> = ws.iter_mut().collect();
            self.reg.prox(&mut refs, Some(self.penalties), lr).expect("regularizer built for this model");
        }
        for (l, w) in ws.into_iter().enumerate() {
            model.conv_mut(l).weights = w;
        }
    }

    fn value(&self, model: &ToyModel) -> f64 {
        self.reg.value(&model.conv_weights(), Some(self.penalties)).unwrap_or(f64::NAN)
    }

    fn flops_rate(&self, model: &ToyModel) -> Option<f64> {
        let masks: Option<Vec<GroupMask>> = model
            .convs()
            .iter()
            .zip(&self.reg.partitions)
            .map(|(c, p)| GroupMask::from_weights(&c.weights, p, self.reg.scheme).ok())
            .collect();
        sparsity_stats(&masks?, &model.geometry()).ok().map(|s| s.flops_rate)
    }
}

fn layer_norms(model: &ToyModel, parts: &[GroupPartition], cfg: &PruneConfig) -> Result<Vec<GroupNormTensor>> {
    model
        .convs()
        .iter()
        .zip(parts)
        .map(|(c, p)| group_norm(&c.weights, p, cfg.scheme, cfg.norm))
        .collect()
}

fn masks_from_scores(scores: &[GroupNormTensor], geo: &[LayerGeometry], cfg: &PruneConfig) -> Result<Vec<GroupMask>> {
    match cfg.policy {
        MaskPolicy::TargetRate(target) => {
            let flops: Vec<Vec<u64>> = scores
                .iter()
                .zip(geo)
                .map(|(s, g)| unit_flops(s.scheme, &s.partition, g))
                .collect();
            mask_for_target_rate(scores, &flops, target, cfg.allow_dead_layers)
        }
        MaskPolicy::Absolute(t) => Ok(scores.iter().map(|s| mask_from_threshold(s, t)).collect()),
        MaskPolicy::RelativeRms(c) => Ok(scores
            .iter()
            .map(|s| {
                let rms = (s.values.iter().map(|v| v * v).sum::<f64>() / s.values.len().max(1) as f64).sqrt();
                mask_from_threshold(s, c * rms)
            })
            .collect()),
    }
}

fn finish(
    mut model: ToyModel,
    masks: Vec<GroupMask>,
    scores: Vec<GroupNormTensor>,
    task: &ToyTask,
    cfg: &PruneConfig,
    mut log: Vec<EpochLog>,
) -> Result<PruneOutcome> {
    model.apply_masks(&masks)?;
    let opts = cfg.train_options(cfg.retrain_epochs, LrSchedule::Cosine, 0x5eed);
    log.extend(train_epochs(&mut model, &task.train, &opts, Some(&masks), None, Some(&task.test), "retrain")?);
    let stats = sparsity_stats(&masks, &model.geometry())?;
    Ok(PruneOutcome {
        masks,
        model,
        scores,
        stats,
        log,
    })
}

fn regularized_prune(model: &ToyModel, task: &ToyTask, cfg: &PruneConfig, rounds: usize, reweight: bool) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let reg = Regularizer::for_model(&model, cfg)?;
    let mut penalties = PenaltyState::ones(cfg.scheme, cfg.norm, &reg.partitions, cfg.epsilon)?;
    let mut log = Vec::new();
    for round in 0..rounds {
        let opts = cfg.train_options(cfg.prune_epochs, LrSchedule::Constant, round as u64);
        let mut hook = PenaltyHook {
            reg: &reg,
            penalties: &penalties,
            update: cfg.update,
        };
        let mut round_log = train_epochs(&mut model, &task.train, &opts, None, Some(&mut hook), Some(&task.test), "prune")?;
        for e in &mut round_log {
            e.epoch += round * cfg.prune_epochs;
        }
        log.extend(round_log);
        if reweight {
            penalties = reweight_update(&penalties, &model.conv_weights(), &reg.partitions)?;
            log::debug!("reweight round {} done", penalties.iteration);
        }
    }
    let scores = layer_norms(&model, &reg.partitions, cfg)?;
    let masks = masks_from_scores(&scores, &model.geometry(), cfg)?;
    finish(model, masks, scores, task, cfg, log)
}

/// Reweighted group lasso: `reweight_iterations` rounds of penalized
/// training, each followed by a penalty update; then mask and retrain.
pub fn reweighted_prune(model: &ToyModel, task: &ToyTask, cfg: &PruneConfig) -> Result<PruneOutcome> {
    regularized_prune(model, task, cfg, cfg.reweight_iterations, true)
}

/// Plain group lasso with penalties fixed at 1, trained for the same total
/// number of prune-phase epochs as the reweighted variant.
pub fn regularization_prune(model: &ToyModel, task: &ToyTask, cfg: &PruneConfig) -> Result<PruneOutcome> {
    regularized_prune(model, task, cfg, cfg.reweight_iterations, false)
}

/// First-order Taylor importance `mean_batches |sum_{w in u} w * dL/dw|` of
/// every unit, on the calibration split.
pub fn taylor_importance(model: &ToyModel, task: &ToyTask, parts: &[GroupPartition], scheme: Scheme, batch: usize) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..task.calib.len()).collect();
    let maps: Vec<Vec<usize>> = parts.iter().map(|p| unit_map(scheme, p)).collect();
    let mut imp: Vec<Vec<f64>> = parts.iter().map(|p| vec![0.0; unit_count(scheme, p)]).collect();
    let mut batches = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = task.calib.batch(chunk)?;
        let (_, cache) = model.forward(&x)?;
        let (_, g) = model.backward(&cache, &y)?;
        for (l, c) in model.convs().iter().enumerate() {
            let mut sums = vec![0.0; imp[l].len()];
            for ((&u, &w), &gw) in maps[l].iter().zip(c.weights.data()).zip(&g.conv_w[l]) {
                sums[u] += w * gw;
            }
            for (i, s) in imp[l].iter_mut().zip(sums) {
                *i += s.abs();
            }
        }
        batches += 1;
    }
    for layer in &mut imp {
        for v in layer.iter_mut() {
            *v /= batches.max(1) as f64;
        }
    }
    Ok(imp)
}

/// Importance-score pruning, last layer to first; importances of each layer
/// are recomputed after the layers behind it have been pruned. Each layer
/// gets the target's share of its dense FLOPs; the first layer absorbs the
/// rounding so the model-wide rate lands on the target. Retrains once.
pub fn heuristic_prune(model: &ToyModel, task: &ToyTask, cfg: &PruneConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let parts = layer_partitions(&model, cfg)?;
    let geo = model.geometry();
    let nl = parts.len();
    let flops: Vec<Vec<u64>> = parts.iter().zip(&geo).map(|(p, g)| unit_flops(cfg.scheme, p, g)).collect();
    let mut masks: Vec<GroupMask> = parts.iter().map(|p| GroupMask::all(cfg.scheme, *p, true)).collect();
    let mut scores: Vec<Option<GroupNormTensor>> = vec![None; nl];

    let target = match cfg.policy {
        MaskPolicy::TargetRate(t) => Some(t),
        _ => None,
    };
    let dense_total: u64 = geo.iter().map(|g| g.dense_flops()).sum();
    let mut kept_after: Vec<u64> = geo.iter().map(|g| g.dense_flops()).collect();

    for l in (0..nl).rev() {
        let imp = taylor_importance(&model, task, &parts, cfg.scheme, cfg.batch_size)?;
        let score = GroupNormTensor {
            scheme: cfg.scheme,
            partition: parts[l],
            kind: cfg.norm,
            values: imp[l].clone(),
        };
        let keep = match target {
            Some(t) => {
                let budget = if l == 0 {
                    let others: u64 = kept_after[1..].iter().sum();
                    (dense_total as f64 / t).floor() as i64 - others as i64
                } else {
                    (geo[l].dense_flops() as f64 / t).floor() as i64
                };
                let mut order: Vec<usize> = (0..score.values.len()).collect();
                order.sort_by(|&a, &b| score.values[a].total_cmp(&score.values[b]).then(a.cmp(&b)));
                let mut keep = vec![true; order.len()];
                let mut remaining = geo[l].dense_flops() as i64;
                let mut alive = order.len();
                for u in order {
                    if remaining <= budget {
                        break;
                    }
                    if alive == 1 && !cfg.allow_dead_layers {
                        break;
                    }
                    keep[u] = false;
                    alive -= 1;
                    remaining -= flops[l][u] as i64;
                }
                kept_after[l] = remaining.max(0) as u64;
                keep
            }
            None => masks_from_scores(std::slice::from_ref(&score), &geo[l..=l], cfg)?.remove(0).keep,
        };
        masks[l] = GroupMask::new(cfg.scheme, parts[l], keep)?;
        model.apply_masks(&masks)?;
        scores[l] = Some(score);
    }
    if let Some(t) = target {
        let reached = sparsity_stats(&masks, &geo)?.flops_rate;
        if reached < t * (1.0 - 1e-9) {
            return Err(Error::UnreachableTarget { target: t, reachable: reached });
        }
    }
    let scores = scores.into_iter().map(|s| s.expect("every layer scored")).collect();
    finish(model, masks, scores, task, cfg, Vec::new())
}

pub fn prune(algorithm: Algorithm, model: &ToyModel, task: &ToyTask, cfg: &PruneConfig) -> Result<PruneOutcome> {
    match algorithm {
        Algorithm::Heuristic => heuristic_prune(model, task, cfg),
        Algorithm::Regularization => regularization_prune(model, task, cfg),
        Algorithm::Reweighted => reweighted_prune(model, task, cfg),
    }
}

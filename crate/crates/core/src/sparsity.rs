//! Structured sparsity schemes, group norms and pruning-rate accounting.
//!
//! A *unit* is the smallest thing a scheme keeps or prunes:
//!
//! * `Filter`: one filter `m` (all `N * K_s` weights).
//! * `Vanilla`: one kernel group `(p, q)` (all `g_M * g_N * K_s` weights).
//! * `Kgs`: one kernel location `(p, q, h, w, d)` of a group (its `g_M * g_N` weights).
//!
//! Units are indexed row-major in `(p, q, h, w, d)` order for KGS, `(p, q)` for
//! Vanilla and `m` for Filter. Ties in every ordering decision are broken by
//! the lowest unit index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{ConvSpec, FeatureDims, GroupPartition, KernelDims, Real, WeightTensor5D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Filter,
    Vanilla,
    Kgs,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Filter, Scheme::Vanilla, Scheme::Kgs];

    pub fn code(self) -> u8 {
        match self {
            Scheme::Filter => 0,
            Scheme::Vanilla => 1,
            Scheme::Kgs => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scheme::Filter),
            1 => Some(Scheme::Vanilla),
            2 => Some(Scheme::Kgs),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Filter => "filter",
            Scheme::Vanilla => "vanilla",
            Scheme::Kgs => "kgs",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "filter" => Ok(Scheme::Filter),
            "vanilla" => Ok(Scheme::Vanilla),
            "kgs" => Ok(Scheme::Kgs),
            other => Err(invalid(format!("unknown sparsity scheme `{other}`"))),
        }
    }
}

/// Group norm used by the regularizers and for ranking units.
///
/// `Mix(alpha)` is `alpha * l1 + (1 - alpha) * l2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
    Mix(f64),
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::Mix(0.5)
    }
}

impl NormKind {
    /// Weight of the l1 part.
    pub fn alpha(self) -> f64 {
        match self {
            NormKind::L1 => 1.0,
            NormKind::L2 => 0.0,
            NormKind::Mix(a) => a,
        }
    }

    pub fn from_alpha(alpha: f64) -> Self {
        if alpha == 1.0 {
            NormKind::L1
        } else if alpha == 0.0 {
            NormKind::L2
        } else {
            NormKind::Mix(alpha)
        }
    }

    /// Combines the l1 sum and the sum of squares of one unit.
    #[inline]
    pub fn combine(self, l1: f64, sum_sq: f64) -> f64 {
        let a = self.alpha();
        let mut v = 0.0;
        if a != 0.0 {
            v += a * l1;
        }
        if a != 1.0 {
            v += (1.0 - a) * sum_sq.sqrt();
        }
        v
    }
}

/// Number of units of `scheme` over `part`.
pub fn unit_count(scheme: Scheme, part: &GroupPartition) -> usize {
    match scheme {
        Scheme::Filter => part.dims.m,
        Scheme::Vanilla => part.num_groups(),
        Scheme::Kgs => part.num_groups() * part.kernel_volume(),
    }
}

/// Unit containing weight `(m, n, h, w, d)`.
#[inline]
pub fn unit_of(scheme: Scheme, part: &GroupPartition, m: usize, n: usize, h: usize, w: usize, d: usize) -> usize {
    match scheme {
        Scheme::Filter => m,
        Scheme::Vanilla => {
            let (p, q) = part.group_of(m, n);
            p * part.q + q
        }
        Scheme::Kgs => {
            let (p, q) = part.group_of(m, n);
            (p * part.q + q) * part.kernel_volume() + part.dims.location(h, w, d)
        }
    }
}

/// Unit index of every weight, in weight storage order.
pub fn unit_map(scheme: Scheme, part: &GroupPartition) -> Vec<usize> {
    let k = part.dims;
    let mut map = Vec::with_capacity(k.len());
    for m in 0..k.m {
        for n in 0..k.n {
            for h in 0..k.kh {
                for w in 0..k.kw {
                    for d in 0..k.kd {
                        map.push(unit_of(scheme, part, m, n, h, w, d));
                    }
                }
            }
        }
    }
    map
}

/// Number of weights in each unit (ragged groups included).
pub fn unit_sizes(scheme: Scheme, part: &GroupPartition) -> Vec<usize> {
    let mut sizes = vec![0usize; unit_count(scheme, part)];
    for u in unit_map(scheme, part) {
        sizes[u] += 1;
    }
    sizes
}

fn check_partition(part: &GroupPartition, dims: KernelDims) -> Result<()> {
    if part.dims != dims {
        return Err(shape_err(format!(
            "partition built for {:?} does not match weights {:?}",
            part.dims, dims
        )));
    }
    Ok(())
}

/// One norm value per unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupNormTensor {
    pub scheme: Scheme,
    pub partition: GroupPartition,
    pub kind: NormKind,
    pub values: Vec<f64>,
}

impl GroupNormTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn group_norm<T: Real>(
    weights: &WeightTensor5D<T>,
    part: &GroupPartition,
    scheme: Scheme,
    kind: NormKind,
) -> Result<GroupNormTensor> {
    check_partition(part, weights.dims())?;
    let units = unit_count(scheme, part);
    let mut l1 = vec![0.0f64; units];
    let mut sq = vec![0.0f64; units];
    for (&u, &w) in unit_map(scheme, part).iter().zip(weights.data()) {
        let w = w.as_f64();
        l1[u] += w.abs();
        sq[u] += w * w;
    }
    Ok(GroupNormTensor {
        scheme,
        partition: *part,
        kind,
        values: l1.iter().zip(&sq).map(|(&a, &s)| kind.combine(a, s)).collect(),
    })
}

/// Keep/prune decision per unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    pub scheme: Scheme,
    pub partition: GroupPartition,
    pub keep: Vec<bool>,
}

impl GroupMask {
    pub fn new(scheme: Scheme, partition: GroupPartition, keep: Vec<bool>) -> Result<Self> {
        let expected = unit_count(scheme, &partition);
        if keep.len() != expected {
            return Err(shape_err(format!(
                "{scheme} mask needs {expected} bits, got {}",
                keep.len()
            )));
        }
        Ok(Self {
            scheme,
            partition,
            keep,
        })
    }

    pub fn all(scheme: Scheme, partition: GroupPartition, keep: bool) -> Self {
        Self {
            scheme,
            partition,
            keep: vec![keep; unit_count(scheme, &partition)],
        }
    }

    /// Mask keeping exactly the units that still hold a nonzero weight.
    pub fn from_weights<T: Real>(weights: &WeightTensor5D<T>, part: &GroupPartition, scheme: Scheme) -> Result<Self> {
        Ok(mask_from_threshold(&group_norm(weights, part, scheme, NormKind::L1)?, 0.0))
    }

    pub fn dims(&self) -> KernelDims {
        self.partition.dims
    }

    pub fn kept_units(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    #[inline]
    pub fn keeps(&self, m: usize, n: usize, h: usize, w: usize, d: usize) -> bool {
        self.keep[unit_of(self.scheme, &self.partition, m, n, h, w, d)]
    }

    /// Kept weight count.
    pub fn kept_weights(&self) -> usize {
        unit_sizes(self.scheme, &self.partition)
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s)
            .sum()
    }

    /// The same pruning pattern expressed at KGS granularity. Vanilla masks
    /// keep their partition; Filter masks use one filter per group row
    /// (`g_M = 1`) and the original `g_N`.
    pub fn to_kgs(&self) -> GroupMask {
        let part = match self.scheme {
            Scheme::Filter => GroupPartition::new(self.partition.dims, 1, self.partition.g_n)
                .expect("valid partition stays valid with g_M = 1"),
            _ => self.partition,
        };
        let ks = part.kernel_volume();
        let mut keep = vec![false; part.num_groups() * ks];
        for p in 0..part.p {
            for q in 0..part.q {
                let group_kept = match self.scheme {
                    Scheme::Filter => self.keep[p],
                    Scheme::Vanilla => self.keep[p * part.q + q],
                    Scheme::Kgs => false,
                };
                for loc in 0..ks {
                    let idx = (p * part.q + q) * ks + loc;
                    keep[idx] = if self.scheme == Scheme::Kgs { self.keep[idx] } else { group_kept };
                }
            }
        }
        GroupMask {
            scheme: Scheme::Kgs,
            partition: part,
            keep,
        }
    }
}

/// Zeroes every weight of every pruned unit; kept weights are copied unchanged.
pub fn apply_mask<T: Real>(weights: &WeightTensor5D<T>, mask: &GroupMask) -> Result<WeightTensor5D<T>> {
    let mut out = weights.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

pub fn apply_mask_in_place<T: Real>(weights: &mut WeightTensor5D<T>, mask: &GroupMask) -> Result<()> {
    check_partition(&mask.partition, weights.dims())?;
    let map = unit_map(mask.scheme, &mask.partition);
    for (w, u) in weights.data_mut().iter_mut().zip(map) {
        if !mask.keep[u] {
            *w = T::zero();
        }
    }
    Ok(())
}

/// Keeps a unit iff its norm is strictly greater than `threshold`.
pub fn mask_from_threshold(norms: &GroupNormTensor, threshold: f64) -> GroupMask {
    GroupMask {
        scheme: norms.scheme,
        partition: norms.partition,
        keep: norms.values.iter().map(|&v| v > threshold).collect(),
    }
}

/// Geometry of one convolution layer, used for FLOPs accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub kernel: KernelDims,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub input: FeatureDims,
}

impl LayerGeometry {
    pub fn new(kernel: KernelDims, spec: &ConvSpec, input: FeatureDims) -> Result<Self> {
        let geo = Self {
            kernel,
            stride: spec.stride,
            padding: spec.padding,
            input,
        };
        geo.output()?;
        Ok(geo)
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding)
    }

    pub fn output(&self) -> Result<FeatureDims> {
        self.spec().output_dims(&self.input, &self.kernel)
    }

    /// Output positions over the whole batch.
    pub fn output_positions(&self) -> u64 {
        let o = self.output().expect("geometry validated at construction");
        (o.batch * o.spatial()) as u64
    }

    pub fn dense_flops(&self) -> u64 {
        2 * self.kernel.len() as u64 * self.output_positions()
    }
}

/// FLOPs of each unit of `scheme` over `geo` (ragged groups pro-rated).
pub fn unit_flops(scheme: Scheme, part: &GroupPartition, geo: &LayerGeometry) -> Vec<u64> {
    let positions = geo.output_positions();
    unit_sizes(scheme, part)
        .into_iter()
        .map(|s| 2 * s as u64 * positions)
        .collect()
}

/// Pruning-rate summary of a masked model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub total_weights: u64,
    pub kept_weights: u64,
    pub dense_flops: u64,
    pub flops_after: u64,
    /// `total_weights / kept_weights`
    pub param_rate: f64,
    /// `dense_flops / flops_after`; infinite when nothing survives.
    pub flops_rate: f64,
    /// Per-layer FLOPs rate; infinite for fully pruned layers.
    pub layer_flops_rates: Vec<f64>,
    pub dead_layers: Vec<usize>,
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::INFINITY
    } else {
        num as f64 / den as f64
    }
}

pub fn sparsity_stats(masks: &[GroupMask], geometry: &[LayerGeometry]) -> Result<SparsityStats> {
    if masks.len() != geometry.len() {
        return Err(shape_err(format!(
            "{} masks for {} layers",
            masks.len(),
            geometry.len()
        )));
    }
    let mut total_w = 0u64;
    let mut kept_w = 0u64;
    let mut dense = 0u64;
    let mut after = 0u64;
    let mut layer_rates = Vec::with_capacity(masks.len());
    let mut dead = Vec::new();
    for (l, (mask, geo)) in masks.iter().zip(geometry).enumerate() {
        if mask.dims() != geo.kernel {
            return Err(shape_err(format!("layer {l}: mask dims {:?} != kernel {:?}", mask.dims(), geo.kernel)));
        }
        let flops = unit_flops(mask.scheme, &mask.partition, geo);
        let layer_after: u64 = flops.iter().zip(&mask.keep).filter(|(_, &k)| k).map(|(f, _)| f).sum();
        let layer_dense = geo.dense_flops();
        total_w += geo.kernel.len() as u64;
        kept_w += mask.kept_weights() as u64;
        dense += layer_dense;
        after += layer_after;
        if layer_after == 0 {
            log::warn!("layer {l} is fully pruned; its FLOPs rate is reported as infinite");
            dead.push(l);
        }
        layer_rates.push(rate(layer_dense, layer_after));
    }
    Ok(SparsityStats {
        total_weights: total_w,
        kept_weights: kept_w,
        dense_flops: dense,
        flops_after: after,
        param_rate: rate(total_w, kept_w),
        flops_rate: rate(dense, after),
        layer_flops_rates: layer_rates,
        dead_layers: dead,
    })
}

/// Greedy model-wide target-rate masking.
///
/// Units across all layers are pruned in ascending norm order (ties: lowest
/// `(layer, unit)` index) until `dense / remaining` first reaches `target`.
/// Unless `allow_dead_layers` is set, the last surviving unit of a layer is
/// never pruned.
pub fn mask_for_target_rate(
    norms: &[GroupNormTensor],
    unit_flops: &[Vec<u64>],
    target: f64,
    allow_dead_layers: bool,
) -> Result<Vec<GroupMask>> {
    if !(target >= 1.0) {
        return Err(invalid(format!("target FLOPs rate must be >= 1.0, got {target}")));
    }
    if norms.len() != unit_flops.len() {
        return Err(shape_err("norms and unit FLOPs cover different layer counts"));
    }
    for (l, (n, f)) in norms.iter().zip(unit_flops).enumerate() {
        if n.values.len() != f.len() {
            return Err(shape_err(format!("layer {l}: {} norms but {} FLOPs entries", n.values.len(), f.len())));
        }
    }
    let mut keep: Vec<Vec<bool>> = norms.iter().map(|n| vec![true; n.values.len()]).collect();
    let dense: u64 = unit_flops.iter().flatten().sum();
    let mut remaining = dense;
    let reached = |remaining: u64| remaining > 0 && dense as f64 / remaining as f64 >= target;

    if !reached(remaining) {
        let mut order: Vec<(usize, usize)> = norms
            .iter()
            .enumerate()
            .flat_map(|(l, n)| (0..n.values.len()).map(move |u| (l, u)))
            .collect();
        order.sort_by(|a, b| {
            norms[a.0].values[a.1]
                .total_cmp(&norms[b.0].values[b.1])
                .then(a.cmp(b))
        });
        let mut alive: Vec<usize> = norms.iter().map(|n| n.values.len()).collect();
        for (l, u) in order {
            if unit_flops[l][u] == 0 && alive[l] > 1 {
                // zero-cost units never change the rate
                continue;
            }
            if !allow_dead_layers && alive[l] == 1 {
                continue;
            }
            if dense - unit_flops[l][u] == 0 {
                // pruning this would remove all compute
                continue;
            }
            keep[l][u] = false;
            alive[l] -= 1;
            remaining -= unit_flops[l][u];
            if reached(remaining) {
                break;
            }
        }
        if !reached(remaining) {
            return Err(Error::UnreachableTarget {
                target,
                reachable: rate(dense, remaining),
            });
        }
    }
    Ok(norms
        .iter()
        .zip(keep)
        .map(|(n, keep)| GroupMask {
            scheme: n.scheme,
            partition: n.partition,
            keep,
        })
        .collect())
}

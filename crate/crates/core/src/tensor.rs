//! Dense tensors, the reference 3D convolutions and kernel-group partitioning.
//!
//! Weight tensors are laid out `M x N x K_h x K_w x K_d` row-major (filter,
//! input channel, kernel height, kernel width, kernel depth). Feature maps are
//! `batch x channels x depth x height x width` row-major.

use std::fmt::Debug;
use std::ops::{AddAssign, Range};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// Scalar type usable by the convolution paths (`f32` for compiled
/// execution, `f64` for training and verification).
pub trait Real: Float + AddAssign + Default + Debug + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of a 3D convolution weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelDims {
    /// Filters (output channels).
    pub m: usize,
    /// Input channels.
    pub n: usize,
    pub kh: usize,
    pub kw: usize,
    pub kd: usize,
}

impl KernelDims {
    pub fn new(m: usize, n: usize, kh: usize, kw: usize, kd: usize) -> Self {
        Self { m, n, kh, kw, kd }
    }

    /// Number of kernel locations `K_s = K_h * K_w * K_d`.
    pub fn kernel_volume(&self) -> usize {
        self.kh * self.kw * self.kd
    }

    pub fn len(&self) -> usize {
        self.m * self.n * self.kernel_volume()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of kernel location `(h, w, d)` within one `K_h x K_w x K_d` kernel.
    #[inline]
    pub fn location(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.kw + w) * self.kd + d
    }

    #[inline]
    pub fn index(&self, m: usize, n: usize, h: usize, w: usize, d: usize) -> usize {
        (m * self.n + n) * self.kernel_volume() + self.location(h, w, d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.kh == 0 || self.kw == 0 || self.kd == 0 {
            return Err(shape_err(format!("kernel dims must all be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Weights of one 3D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor5D<T> {
    dims: KernelDims,
    data: Vec<T>,
    pub layer_id: usize,
}

impl<T: Real> WeightTensor5D<T> {
    pub fn new(dims: KernelDims, data: Vec<T>, layer_id: usize) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(shape_err(format!(
                "weight data length {} != M*N*Kh*Kw*Kd = {}",
                data.len(),
                dims.len()
            )));
        }
        Ok(Self { dims, data, layer_id })
    }

    pub fn zeros(dims: KernelDims, layer_id: usize) -> Result<Self> {
        Self::new(dims, vec![T::zero(); dims.len()], layer_id)
    }

    pub fn from_fn(
        dims: KernelDims,
        layer_id: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.len());
        for m in 0..dims.m {
            for n in 0..dims.n {
                for h in 0..dims.kh {
                    for w in 0..dims.kw {
                        for d in 0..dims.kd {
                            data.push(f(m, n, h, w, d));
                        }
                    }
                }
            }
        }
        Self::new(dims, data, layer_id)
    }

    pub fn dims(&self) -> KernelDims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize, h: usize, w: usize, d: usize) -> T {
        self.data[self.dims.index(m, n, h, w, d)]
    }

    /// Weights of filter `m`, channel `n` as a `K_s` slice.
    pub fn kernel(&self, m: usize, n: usize) -> &[T] {
        let ks = self.dims.kernel_volume();
        let start = (m * self.dims.n + n) * ks;
        &self.data[start..start + ks]
    }

    pub fn cast<U: Real>(&self) -> WeightTensor5D<U> {
        WeightTensor5D {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            layer_id: self.layer_id,
        }
    }
}

/// Shape of a feature map: `(batch, channels, depth, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDims {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureDims {
    pub fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            depth,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((b * self.channels + c) * self.depth + d) * self.height + h) * self.width + w
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0
            || self.channels == 0
            || self.depth == 0
            || self.height == 0
            || self.width == 0
        {
            return Err(shape_err(format!("feature dims must all be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    dims: FeatureDims,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(dims: FeatureDims, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(shape_err(format!(
                "feature data length {} != product of dims {}",
                data.len(),
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: FeatureDims) -> Result<Self> {
        Self::new(dims, vec![T::zero(); dims.len()])
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.dims.index(b, c, d, h, w)]
    }

    /// Contiguous slice for sample `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.dims.channels * self.dims.spatial();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Stride, zero padding and optional bias of a convolution. Axis order is
/// `(depth, height, width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub bias: Option<Vec<f64>>,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            bias: None,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            stride,
            padding,
            bias: None,
        }
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
        self.bias = Some(bias);
        self
    }

    /// Output spatial extents `(D_o, H_o, W_o)` for an input of extents `(D, H, W)`.
    pub fn output_extents(&self, input: [usize; 3], kernel: &KernelDims) -> Result<[usize; 3]> {
        if self.stride.iter().any(|&s| s == 0) {
            return Err(invalid(format!("strides must be >= 1, got {:?}", self.stride)));
        }
        let k = [kernel.kd, kernel.kh, kernel.kw];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < k[a] {
                return Err(shape_err(format!(
                    "padded extent {} on axis {} is smaller than kernel extent {}",
                    padded, a, k[a]
                )));
            }
            out[a] = (padded - k[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Validates the spec against `input` and `kernel` and returns output dims.
    pub fn output_dims(&self, input: &FeatureDims, kernel: &KernelDims) -> Result<FeatureDims> {
        input.validate()?;
        kernel.validate()?;
        if input.channels != kernel.n {
            return Err(shape_err(format!(
                "input has {} channels but weights expect N = {}",
                input.channels, kernel.n
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != kernel.m {
                return Err(shape_err(format!(
                    "bias length {} != filter count {}",
                    b.len(),
                    kernel.m
                )));
            }
        }
        let [d, h, w] = self.output_extents(input.extents(), kernel)?;
        Ok(FeatureDims::new(input.batch, kernel.m, d, h, w))
    }

    pub fn bias_at(&self, m: usize) -> f64 {
        self.bias.as_ref().map_or(0.0, |b| b[m])
    }
}

/// Kernel-group partition of a layer along filters (`g_M`) and input
/// channels (`g_N`). The last group along each axis may be smaller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupPartition {
    pub dims: KernelDims,
    pub g_m: usize,
    pub g_n: usize,
    /// `ceil(M / g_M)`
    pub p: usize,
    /// `ceil(N / g_N)`
    pub q: usize,
}

impl GroupPartition {
    pub fn new(dims: KernelDims, g_m: usize, g_n: usize) -> Result<Self> {
        dims.validate()?;
        if g_m == 0 || g_n == 0 {
            return Err(invalid(format!("group sizes must be >= 1, got g_M={g_m}, g_N={g_n}")));
        }
        Ok(Self {
            dims,
            g_m,
            g_n,
            p: dims.m.div_ceil(g_m),
            q: dims.n.div_ceil(g_n),
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.dims.kernel_volume()
    }

    /// Filters belonging to group row `p`.
    pub fn filters(&self, p: usize) -> Range<usize> {
        p * self.g_m..((p + 1) * self.g_m).min(self.dims.m)
    }

    /// Input channels belonging to group column `q`.
    pub fn channels(&self, q: usize) -> Range<usize> {
        q * self.g_n..((q + 1) * self.g_n).min(self.dims.n)
    }

    #[inline]
    pub fn group_of(&self, m: usize, n: usize) -> (usize, usize) {
        (m / self.g_m, n / self.g_n)
    }

    /// Number of weights in group `(p, q)` at a single kernel location.
    pub fn group_size(&self, p: usize, q: usize) -> usize {
        self.filters(p).len() * self.channels(q).len()
    }

    pub fn num_groups(&self) -> usize {
        self.p * self.q
    }
}

/// Partitions `dims` into `g_M x g_N` kernel groups.
pub fn partition(dims: KernelDims, g_m: usize, g_n: usize) -> Result<GroupPartition> {
    GroupPartition::new(dims, g_m, g_n)
}

fn check_weights<T: Real>(input: &FeatureMap<T>, weights: &WeightTensor5D<T>, spec: &ConvSpec) -> Result<FeatureDims> {
    spec.output_dims(&input.dims(), &weights.dims())
}

/// Reference 3D convolution: one accumulator per output value, taps summed
/// in the fixed order `n`, then `d`, `h`, `w`; bias added last.
pub fn conv3d_dense<T: Real>(
    input: &FeatureMap<T>,
    weights: &WeightTensor5D<T>,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>> {
    Ok(conv3d_dense_counted(input, weights, spec)?.0)
}

/// [`conv3d_dense`] that also returns the number of multiply-accumulates it
/// executed. Taps that fall into the zero padding are counted as executed
/// (they multiply a zero input).
pub fn conv3d_dense_counted<T: Real>(
    input: &FeatureMap<T>,
    weights: &WeightTensor5D<T>,
    spec: &ConvSpec,
) -> Result<(FeatureMap<T>, u64)> {
    let od = check_weights(input, weights, spec)?;
    let id = input.dims();
    let k = weights.dims();
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let mut out = FeatureMap::zeros(od)?;
    let mut macs = 0u64;
    for b in 0..od.batch {
        for m in 0..od.channels {
            let bias = T::of_f64(spec.bias_at(m));
            for zo in 0..od.depth {
                for yo in 0..od.height {
                    for xo in 0..od.width {
                        let mut acc = T::zero();
                        for n in 0..k.n {
                            for d in 0..k.kd {
                                for h in 0..k.kh {
                                    for w in 0..k.kw {
                                        macs += 1;
                                        let z = (zo * sd + d) as isize - pd as isize;
                                        let y = (yo * sh + h) as isize - ph as isize;
                                        let x = (xo * sw + w) as isize - pw as isize;
                                        if z < 0
                                            || y < 0
                                            || x < 0
                                            || z as usize >= id.depth
                                            || y as usize >= id.height
                                            || x as usize >= id.width
                                        {
                                            continue;
                                        }
                                        acc += weights.get(m, n, h, w, d)
                                            * input.get(b, n, z as usize, y as usize, x as usize);
                                    }
                                }
                            }
                        }
                        let i = od.index(b, m, zo, yo, xo);
                        out.data_mut()[i] = acc + bias;
                    }
                }
            }
        }
    }
    Ok((out, macs))
}

/// Gathers the input patches of sample `b` into a `(N * K_s) x L` column
/// matrix, `L = D_o * H_o * W_o`. Row `n * K_s + loc(h, w, d)` matches the
/// reshaped kernel vector of channel `n`.
fn gather_patches<T: Real>(
    input: &FeatureMap<T>,
    b: usize,
    k: &KernelDims,
    spec: &ConvSpec,
    out: &FeatureDims,
) -> Vec<T> {
    let id = input.dims();
    let l = out.spatial();
    let ks = k.kernel_volume();
    let mut cols = vec![T::zero(); k.n * ks * l];
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    for n in 0..k.n {
        for h in 0..k.kh {
            for w in 0..k.kw {
                for d in 0..k.kd {
                    let row = n * ks + k.location(h, w, d);
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for zo in 0..out.depth {
                        let z = (zo * sd + d) as isize - pd as isize;
                        if z < 0 || z as usize >= id.depth {
                            continue;
                        }
                        for yo in 0..out.height {
                            let y = (yo * sh + h) as isize - ph as isize;
                            if y < 0 || y as usize >= id.height {
                                continue;
                            }
                            for xo in 0..out.width {
                                let x = (xo * sw + w) as isize - pw as isize;
                                if x < 0 || x as usize >= id.width {
                                    continue;
                                }
                                dst[(zo * out.height + yo) * out.width + xo] =
                                    input.get(b, n, z as usize, y as usize, x as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Convolution as patch gathering plus one `g_M x (g_N * K_s)` matrix
/// product per kernel group, accumulated over the channel groups.
pub fn conv3d_gemm<T: Real>(
    input: &FeatureMap<T>,
    weights: &WeightTensor5D<T>,
    spec: &ConvSpec,
    part: &GroupPartition,
) -> Result<FeatureMap<T>> {
    let od = check_weights(input, weights, spec)?;
    let k = weights.dims();
    if part.dims != k {
        return Err(shape_err(format!(
            "partition built for {:?} applied to weights {:?}",
            part.dims, k
        )));
    }
    let l = od.spatial();
    let ks = k.kernel_volume();
    let row_len = k.n * ks;
    let mut out = FeatureMap::zeros(od)?;
    for b in 0..od.batch {
        let cols = gather_patches(input, b, &k, spec, &od);
        for p in 0..part.p {
            for m in part.filters(p) {
                let base = od.index(b, m, 0, 0, 0);
                let acc = &mut out.data_mut()[base..base + l];
                let wrow = &weights.data()[m * row_len..(m + 1) * row_len];
                for q in 0..part.q {
                    let cols_range = part.channels(q);
                    for j in cols_range.start * ks..cols_range.end * ks {
                        let wv = wrow[j];
                        if wv == T::zero() {
                            continue;
                        }
                        let src = &cols[j * l..(j + 1) * l];
                        for (a, &x) in acc.iter_mut().zip(src) {
                            *a += wv * x;
                        }
                    }
                }
                let bias = T::of_f64(spec.bias_at(m));
                for a in acc.iter_mut() {
                    *a += bias;
                }
            }
        }
    }
    Ok(out)
}

/// Dense FLOPs (`2 x` multiply-accumulates) of one convolution over the whole batch.
pub fn flops_count(kernel: &KernelDims, spec: &ConvSpec, input: &FeatureDims) -> Result<u64> {
    let od = spec.output_dims(input, kernel)?;
    Ok(2 * (od.batch * kernel.len() * od.spatial()) as u64)
}

/// Largest absolute difference between two equally shaped slices, relative
/// to `max(|a|, |b|, 1)` element-wise.
pub fn max_rel_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared slices differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

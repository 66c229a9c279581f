//! Toy 3D CNNs, their gradients and a deterministic SGD training loop.
//!
//! The model is `(conv3d -> ReLU) x k -> global average pool -> linear`,
//! trained with mean softmax cross-entropy. Gradients are computed by an
//! explicit reverse pass over the cached activations of the forward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::sparsity::{apply_mask_in_place, sparsity_stats, GroupMask, LayerGeometry};
use crate::tensor::{ConvSpec, FeatureDims, FeatureMap, KernelDims, WeightTensor5D};

/// Shape of one convolution layer of an architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    /// `(K_d, K_h, K_w)`
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Per-sample input `(channels, depth, height, width)`.
    pub input: [usize; 4],
    pub convs: Vec<ConvLayerSpec>,
    pub classes: usize,
}

impl ArchSpec {
    /// Two 3x3x3 conv layers on 1x8x8x8 clips, four classes.
    pub fn tiny3d() -> Self {
        Self {
            name: "tiny3d".into(),
            input: [1, 8, 8, 8],
            convs: vec![
                ConvLayerSpec {
                    out_channels: 8,
                    kernel: [3, 3, 3],
                    stride: [1, 1, 1],
                    padding: [1, 1, 1],
                },
                ConvLayerSpec {
                    out_channels: 16,
                    kernel: [3, 3, 3],
                    stride: [2, 2, 2],
                    padding: [1, 1, 1],
                },
            ],
            classes: 4,
        }
    }

    /// Four-layer C3D-shaped stack on 3x8x28x28 clips, used for latency work.
    pub fn c3d_lite() -> Self {
        let conv = |out_channels, stride| ConvLayerSpec {
            out_channels,
            kernel: [3, 3, 3],
            stride,
            padding: [1, 1, 1],
        };
        Self {
            name: "c3d-lite".into(),
            input: [3, 8, 28, 28],
            convs: vec![conv(16, [1, 1, 1]), conv(32, [1, 2, 2]), conv(64, [2, 2, 2]), conv(64, [1, 1, 1])],
            classes: 4,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny3d" => Ok(Self::tiny3d()),
            "c3d-lite" => Ok(Self::c3d_lite()),
            other => Err(invalid(format!("unknown architecture `{other}`"))),
        }
    }

    /// Kernel dims, conv spec (without bias) and per-sample input dims of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<(KernelDims, ConvSpec, FeatureDims)>> {
        if self.convs.is_empty() {
            return Err(invalid("architecture needs at least one conv layer"));
        }
        let [c, d, h, w] = self.input;
        let mut input = FeatureDims::new(1, c, d, h, w);
        let mut out = Vec::with_capacity(self.convs.len());
        for l in &self.convs {
            let k = KernelDims::new(l.out_channels, input.channels, l.kernel[1], l.kernel[2], l.kernel[0]);
            let spec = ConvSpec::new(l.stride, l.padding);
            let o = spec.output_dims(&input, &k)?;
            out.push((k, spec, input));
            input = o;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weights: WeightTensor5D<f64>,
    pub bias: Vec<f64>,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvLayer {
    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding).with_bias(self.bias.clone())
    }
}

/// A toy classifier. Every mutable access bumps an internal version so a
/// forward cache taken before a parameter change is rejected by `backward`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    arch: ArchSpec,
    convs: Vec<ConvLayer>,
    /// `classes x C_last`, row-major.
    cls_w: Vec<f64>,
    cls_b: Vec<f64>,
    version: u64,
}

impl ToyModel {
    /// He-normal initialization from `seed`; biases start at zero.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let shapes = arch.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(shapes.len());
        for (l, (k, spec, _)) in shapes.iter().enumerate() {
            let std = (2.0 / (k.n * k.kernel_volume()) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..k.len()).map(|_| dist.sample(&mut rng)).collect();
            convs.push(ConvLayer {
                weights: WeightTensor5D::new(*k, data, l)?,
                bias: vec![0.0; k.m],
                stride: spec.stride,
                padding: spec.padding,
            });
        }
        let c_last = shapes.last().expect("non-empty").0.m;
        let dist = Normal::new(0.0, (1.0 / c_last as f64).sqrt()).expect("positive std");
        let cls_w = (0..arch.classes * c_last).map(|_| dist.sample(&mut rng)).collect();
        Ok(Self {
            arch: arch.clone(),
            convs,
            cls_w,
            cls_b: vec![0.0; arch.classes],
            version: 0,
        })
    }

    /// Assembles a model from explicit parameters.
    pub fn from_parts(arch: &ArchSpec, convs: Vec<ConvLayer>, cls_w: Vec<f64>, cls_b: Vec<f64>) -> Result<Self> {
        let shapes = arch.layer_shapes()?;
        if convs.len() != shapes.len() {
            return Err(shape_err(format!("{} conv layers for an architecture with {}", convs.len(), shapes.len())));
        }
        for (l, (layer, (k, spec, _))) in convs.iter().zip(&shapes).enumerate() {
            if layer.weights.dims() != *k || layer.bias.len() != k.m || layer.stride != spec.stride || layer.padding != spec.padding {
                return Err(shape_err(format!("layer {l} does not match the architecture")));
            }
        }
        let c_last = shapes.last().expect("non-empty").0.m;
        if cls_w.len() != arch.classes * c_last || cls_b.len() != arch.classes {
            return Err(shape_err("classifier parameters do not match the architecture"));
        }
        Ok(Self {
            arch: arch.clone(),
            convs,
            cls_w,
            cls_b,
            version: 0,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn conv_mut(&mut self, l: usize) -> &mut ConvLayer {
        self.version += 1;
        &mut self.convs[l]
    }

    pub fn classifier(&self) -> (&[f64], &[f64]) {
        (&self.cls_w, &self.cls_b)
    }

    pub fn classifier_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.version += 1;
        (&mut self.cls_w, &mut self.cls_b)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn conv_weights(&self) -> Vec<&WeightTensor5D<f64>> {
        self.convs.iter().map(|c| &c.weights).collect()
    }

    /// Per-sample (batch 1) geometry of every conv layer.
    pub fn geometry(&self) -> Vec<LayerGeometry> {
        self.arch
            .layer_shapes()
            .expect("validated at construction")
            .into_iter()
            .map(|(k, spec, input)| LayerGeometry::new(k, &spec, input).expect("validated"))
            .collect()
    }

    /// Parameter tensors in the canonical order
    /// `conv0.w, conv0.b, ..., classifier.w, classifier.b`.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            v.push(c.weights.data());
            v.push(&c.bias);
        }
        v.push(&self.cls_w);
        v.push(&self.cls_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(c.weights.data_mut());
            v.push(&mut c.bias);
        }
        v.push(&mut self.cls_w);
        v.push(&mut self.cls_b);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.convs.len() {
            v.push(format!("conv{l}.weight"));
            v.push(format!("conv{l}.bias"));
        }
        v.push("classifier.weight".into());
        v.push("classifier.bias".into());
        v
    }

    /// Applies one mask per conv layer.
    pub fn apply_masks(&mut self, masks: &[GroupMask]) -> Result<()> {
        if masks.len() != self.convs.len() {
            return Err(shape_err(format!("{} masks for {} conv layers", masks.len(), self.convs.len())));
        }
        self.version += 1;
        for (c, m) in self.convs.iter_mut().zip(masks) {
            apply_mask_in_place(&mut c.weights, m)?;
        }
        Ok(())
    }

    fn sample_dims(&self) -> [usize; 4] {
        self.arch.input
    }

    pub fn forward(&self, batch: &FeatureMap<f64>) -> Result<(Vec<f64>, ForwardCache)> {
        let bd = batch.dims();
        let [c, d, h, w] = self.sample_dims();
        if [bd.channels, bd.depth, bd.height, bd.width] != [c, d, h, w] {
            return Err(shape_err(format!(
                "batch sample shape {:?} != model input {:?}",
                [bd.channels, bd.depth, bd.height, bd.width],
                self.arch.input
            )));
        }
        let shapes = self.arch.layer_shapes()?;
        let nb = bd.batch;
        let mut acts = vec![batch.data().to_vec()];
        let mut pre = Vec::with_capacity(self.convs.len());
        for (layer, (_, spec, input)) in self.convs.iter().zip(&shapes) {
            let out_dims = spec.output_dims(input, &layer.weights.dims())?;
            let in_len = input.channels * input.spatial();
            let out_len = out_dims.channels * out_dims.spatial();
            let x = acts.last().expect("non-empty");
            let mut z = vec![0.0; nb * out_len];
            for b in 0..nb {
                conv_forward(
                    &x[b * in_len..(b + 1) * in_len],
                    input,
                    layer,
                    &out_dims,
                    &mut z[b * out_len..(b + 1) * out_len],
                );
            }
            let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            pre.push(z);
            acts.push(a);
        }
        let last = shapes.last().expect("non-empty");
        let last_out = last.1.output_dims(&last.2, &last.0)?;
        let (cl, sp) = (last_out.channels, last_out.spatial());
        let a = acts.last().expect("non-empty");
        let mut pooled = vec![0.0; nb * cl];
        for b in 0..nb {
            for ch in 0..cl {
                let s: f64 = a[(b * cl + ch) * sp..(b * cl + ch + 1) * sp].iter().sum();
                pooled[b * cl + ch] = s / sp as f64;
            }
        }
        let k = self.arch.classes;
        let mut logits = vec![0.0; nb * k];
        for b in 0..nb {
            for j in 0..k {
                let mut s = self.cls_b[j];
                for ch in 0..cl {
                    s += self.cls_w[j * cl + ch] * pooled[b * cl + ch];
                }
                logits[b * k + j] = s;
            }
        }
        Ok((
            logits.clone(),
            ForwardCache {
                version: self.version,
                batch: nb,
                acts,
                pre,
                pooled,
                logits,
            },
        ))
    }

    /// Gradients of the mean cross-entropy loss.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Gradients)> {
        self.backward_with(cache, labels, Reduction::Mean)
    }

    pub fn backward_with(&self, cache: &ForwardCache, labels: &[usize], reduction: Reduction) -> Result<(f64, Gradients)> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache taken at model version {}, model is at {}",
                cache.version, self.version
            )));
        }
        let nb = cache.batch;
        if labels.len() != nb {
            return Err(shape_err(format!("{} labels for a batch of {nb}", labels.len())));
        }
        let k = self.arch.classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / nb as f64,
            Reduction::Sum => 1.0,
        };
        let shapes = self.arch.layer_shapes()?;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; nb * k];
        for b in 0..nb {
            let row = &cache.logits[b * k..(b + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            loss += (z.ln() + mx - row[labels[b]]) * scale;
            for j in 0..k {
                let p = (row[j] - mx).exp() / z;
                dlogits[b * k + j] = (p - if j == labels[b] { 1.0 } else { 0.0 }) * scale;
            }
        }
        let cl = self.cls_w.len() / k;
        let mut g = Gradients::zeros_like(self);
        let mut dpooled = vec![0.0; nb * cl];
        for b in 0..nb {
            for j in 0..k {
                let dl = dlogits[b * k + j];
                g.cls_b[j] += dl;
                for ch in 0..cl {
                    g.cls_w[j * cl + ch] += dl * cache.pooled[b * cl + ch];
                    dpooled[b * cl + ch] += dl * self.cls_w[j * cl + ch];
                }
            }
        }
        let nl = self.convs.len();
        let last = &shapes[nl - 1];
        let sp = last.1.output_dims(&last.2, &last.0)?.spatial();
        let mut dact: Vec<f64> = Vec::with_capacity(nb * cl * sp);
        for &v in &dpooled {
            dact.extend(std::iter::repeat_n(v / sp as f64, sp));
        }
        for l in (0..nl).rev() {
            let (kd, spec, input) = &shapes[l];
            let out = spec.output_dims(input, kd)?;
            let in_len = input.channels * input.spatial();
            let out_len = out.channels * out.spatial();
            let dz: Vec<f64> = dact
                .iter()
                .zip(&cache.pre[l])
                .map(|(&da, &z)| if z > 0.0 { da } else { 0.0 })
                .collect();
            let need_dx = l > 0;
            let mut dx = if need_dx { vec![0.0; nb * in_len] } else { Vec::new() };
            let (gw, gb) = (&mut g.conv_w[l], &mut g.conv_b[l]);
            for b in 0..nb {
                let dxs = if need_dx { Some(&mut dx[b * in_len..(b + 1) * in_len]) } else { None };
                conv_backward(
                    &cache.acts[l][b * in_len..(b + 1) * in_len],
                    input,
                    &self.convs[l],
                    &out,
                    &dz[b * out_len..(b + 1) * out_len],
                    gw,
                    gb,
                    dxs,
                );
            }
            dact = dx;
        }
        Ok((loss, g))
    }

    /// Cross-entropy loss (mean) without building gradients.
    pub fn loss(&self, batch: &FeatureMap<f64>, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward(batch)?;
        Ok(cross_entropy(&logits, labels, self.arch.classes))
    }
}

pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let nb = labels.len();
    let mut loss = 0.0;
    for (b, &lab) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        loss += z.ln() + mx - row[lab];
    }
    loss / nb as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    /// Input of every conv layer, then the last post-ReLU activation.
    acts: Vec<Vec<f64>>,
    /// Pre-ReLU output of every conv layer.
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

/// Parameter gradients in the same layout as [`ToyModel::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            conv_w: model.convs.iter().map(|c| vec![0.0; c.weights.data().len()]).collect(),
            conv_b: model.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
            cls_w: vec![0.0; model.cls_w.len()],
            cls_b: vec![0.0; model.cls_b.len()],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.push(w);
            v.push(b);
        }
        v.push(&self.cls_w);
        v.push(&self.cls_b);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Output range `[lo, hi)` along one axis for which input coordinate
/// `o * stride + k - pad` lies inside `[0, extent)`.
#[inline]
fn valid_range(out_extent: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = extent as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

struct Taps {
    z: (usize, usize),
    y: (usize, usize),
    x: (usize, usize),
}

fn taps(out: &FeatureDims, input: &FeatureDims, layer: &ConvLayer, d: usize, h: usize, w: usize) -> Taps {
    let (s, p) = (layer.stride, layer.padding);
    Taps {
        z: valid_range(out.depth, s[0], p[0], d, input.depth),
        y: valid_range(out.height, s[1], p[1], h, input.height),
        x: valid_range(out.width, s[2], p[2], w, input.width),
    }
}

fn conv_forward(x: &[f64], input: &FeatureDims, layer: &ConvLayer, out: &FeatureDims, z: &mut [f64]) {
    let k = layer.weights.dims();
    let (s, p) = (layer.stride, layer.padding);
    let osp = out.spatial();
    let isp = input.spatial();
    for m in 0..k.m {
        let zm = &mut z[m * osp..(m + 1) * osp];
        zm.fill(layer.bias[m]);
        for n in 0..k.n {
            let xn = &x[n * isp..(n + 1) * isp];
            for h in 0..k.kh {
                for w in 0..k.kw {
                    for d in 0..k.kd {
                        let wv = layer.weights.get(m, n, h, w, d);
                        if wv == 0.0 {
                            continue;
                        }
                        let t = taps(out, input, layer, d, h, w);
                        for zo in t.z.0..t.z.1 {
                            let zi = zo * s[0] + d - p[0];
                            for yo in t.y.0..t.y.1 {
                                let yi = yo * s[1] + h - p[1];
                                let orow = (zo * out.height + yo) * out.width;
                                let irow = (zi * input.height + yi) * input.width;
                                for xo in t.x.0..t.x.1 {
                                    let xi = xo * s[2] + w - p[2];
                                    zm[orow + xo] += wv * xn[irow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    input: &FeatureDims,
    layer: &ConvLayer,
    out: &FeatureDims,
    dz: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let k = layer.weights.dims();
    let (s, p) = (layer.stride, layer.padding);
    let osp = out.spatial();
    let isp = input.spatial();
    for m in 0..k.m {
        let dzm = &dz[m * osp..(m + 1) * osp];
        gb[m] += dzm.iter().sum::<f64>();
        for n in 0..k.n {
            let xn = &x[n * isp..(n + 1) * isp];
            for h in 0..k.kh {
                for w in 0..k.kw {
                    for d in 0..k.kd {
                        let idx = k.index(m, n, h, w, d);
                        let wv = layer.weights.data()[idx];
                        let t = taps(out, input, layer, d, h, w);
                        let mut acc = 0.0;
                        for zo in t.z.0..t.z.1 {
                            let zi = zo * s[0] + d - p[0];
                            for yo in t.y.0..t.y.1 {
                                let yi = yo * s[1] + h - p[1];
                                let orow = (zo * out.height + yo) * out.width;
                                let irow = (zi * input.height + yi) * input.width;
                                for xo in t.x.0..t.x.1 {
                                    let xi = xo * s[2] + w - p[2];
                                    acc += dzm[orow + xo] * xn[irow + xi];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    if wv != 0.0 {
                                        let dxn = &mut dx[n * isp..(n + 1) * isp];
                                        for xo in t.x.0..t.x.1 {
                                            let xi = xo * s[2] + w - p[2];
                                            dxn[irow + xi] += wv * dzm[orow + xo];
                                        }
                                    }
                                }
                            }
                        }
                        gw[idx] += acc;
                    }
                }
            }
        }
    }
}

/// SGD with heavy-ball momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut ToyModel, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let gs = grads.tensors();
        if self.velocity.is_empty() {
            self.velocity = gs.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in model.params_mut().into_iter().zip(gs).zip(&mut self.velocity) {
            sgd_update(p, g, v, lr, self.momentum);
        }
        Ok(())
    }
}

/// One momentum update on a flat parameter slice.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = epoch.min(total) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

/// Hook through which a pruning algorithm injects its regularizer into training.
pub trait RegularizerHook {
    /// Adds regularizer (sub)gradients to the loss gradients.
    fn add_gradient(&mut self, _model: &ToyModel, _grads: &mut Gradients) {}
    /// Runs after each optimizer step (e.g. a proximal update).
    fn after_step(&mut self, _model: &mut ToyModel, _lr: f64) {}
    /// Current regularizer value.
    fn value(&self, model: &ToyModel) -> f64;
    /// Model-wide FLOPs rate implied by the exact zeros currently in the model.
    fn flops_rate(&self, _model: &ToyModel) -> Option<f64> {
        None
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub regularizer: f64,
    pub accuracy: f64,
    pub flops_rate: f64,
}

/// Trains `model` in place.
///
/// When `masks` is set the masks are re-applied after every optimizer step,
/// so pruned weights stay exactly zero. `eval` (if any) supplies the
/// accuracy reported in the log; otherwise training accuracy is used.
pub fn train_epochs(
    model: &mut ToyModel,
    data: &SyntheticVideoDataset,
    opts: &TrainOptions,
    masks: Option<&[GroupMask]>,
    mut hook: Option<&mut dyn RegularizerHook>,
    eval: Option<&SyntheticVideoDataset>,
    phase: &str,
) -> Result<Vec<EpochLog>> {
    if opts.batch_size == 0 {
        return Err(invalid("batch size must be >= 1"));
    }
    if let Some(m) = masks {
        model.apply_masks(m)?;
    }
    let mask_rate = match masks {
        Some(m) => Some(sparsity_stats(m, &model.geometry())?.flops_rate),
        None => None,
    };
    let mut sgd = Sgd::new(opts.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = match opts.schedule {
            LrSchedule::Constant => opts.lr,
            LrSchedule::Cosine => cosine_lr(epoch, opts.epochs, opts.lr),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let (x, y) = data.batch(chunk)?;
            let (_, cache) = model.forward(&x)?;
            let (loss, mut grads) = model.backward(&cache, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
            }
            if let Some(h) = hook.as_deref_mut() {
                h.add_gradient(model, &mut grads);
            }
            sgd.step(model, &grads, lr)?;
            if let Some(h) = hook.as_deref_mut() {
                h.after_step(model, lr);
            }
            if let Some(m) = masks {
                model.apply_masks(m)?;
            }
            loss_sum += loss;
            batches += 1;
        }
        let accuracy = evaluate(model, eval.unwrap_or(data))?;
        let (regularizer, hook_rate) = match hook.as_deref() {
            Some(h) => (h.value(model), h.flops_rate(model)),
            None => (0.0, None),
        };
        log.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            regularizer,
            accuracy,
            flops_rate: mask_rate.or(hook_rate).unwrap_or(1.0),
        });
    }
    Ok(log)
}

/// Fraction of correctly classified clips.
pub fn evaluate(model: &ToyModel, data: &SyntheticVideoDataset) -> Result<f64> {
    let k = model.arch().classes;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, y) = data.batch(chunk)?;
        let (logits, _) = model.forward(&x)?;
        for (b, &lab) in y.iter().enumerate() {
            let row = &logits[b * k..(b + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += (pred == lab) as usize;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Generator settings for the moving-blob clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoConfig {
    pub classes: usize,
    /// `(channels, depth, height, width)`
    pub clip: [usize; 4],
    /// Blob displacement per frame, in pixels.
    pub speed: f64,
    pub blob_sigma: f64,
    pub noise: f64,
}

impl Default for SyntheticVideoConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            clip: [1, 8, 8, 8],
            speed: 0.6,
            blob_sigma: 1.2,
            noise: 0.6,
        }
    }
}

/// Gaussian blobs drifting across the frames; the class is the drift
/// direction (`2 pi c / classes`). A single frame carries no class
/// information beyond the blob position, so depth matters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideoDataset {
    pub config: SyntheticVideoConfig,
    pub seed: u64,
    clips: Vec<f64>,
    labels: Vec<usize>,
}

impl SyntheticVideoDataset {
    pub fn generate(config: &SyntheticVideoConfig, samples: usize, seed: u64) -> Result<Self> {
        let [c, d, h, w] = config.clip;
        if config.classes == 0 || c == 0 || d == 0 || h == 0 || w == 0 {
            return Err(invalid("dataset dims and class count must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
        let per = c * d * h * w;
        let mut clips = Vec::with_capacity(samples * per);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let label = i % config.classes;
            let angle = 2.0 * std::f64::consts::PI * label as f64 / config.classes as f64;
            let (vx, vy) = (config.speed * angle.cos(), config.speed * angle.sin());
            let mid = (d as f64 - 1.0) / 2.0;
            let cx0 = (w as f64 - 1.0) / 2.0 - vx * mid + rng.random_range(-1.5..1.5);
            let cy0 = (h as f64 - 1.0) / 2.0 - vy * mid + rng.random_range(-1.5..1.5);
            let amp = rng.random_range(0.8..1.2);
            let inv = 1.0 / (2.0 * config.blob_sigma * config.blob_sigma);
            for _ch in 0..c {
                for t in 0..d {
                    let (cx, cy) = (cx0 + vx * t as f64, cy0 + vy * t as f64);
                    for y in 0..h {
                        for x in 0..w {
                            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                            clips.push(amp * (-r2 * inv).exp() + noise.sample(&mut rng));
                        }
                    }
                }
            }
            labels.push(label);
        }
        // shuffle sample order so batches mix classes
        let mut perm: Vec<usize> = (0..samples).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = Vec::with_capacity(clips.len());
        let mut shuffled_labels = Vec::with_capacity(samples);
        for &p in &perm {
            shuffled.extend_from_slice(&clips[p * per..(p + 1) * per]);
            shuffled_labels.push(labels[p]);
        }
        Ok(Self {
            config: config.clone(),
            seed,
            clips: shuffled,
            labels: shuffled_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(FeatureMap<f64>, Vec<usize>)> {
        let [c, d, h, w] = self.config.clip;
        let per = c * d * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(invalid(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.clips[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((FeatureMap::new(FeatureDims::new(idx.len(), c, d, h, w), data)?, labels))
    }
}

/// Train / held-out test / calibration splits regenerated from one seed.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub train: SyntheticVideoDataset,
    pub test: SyntheticVideoDataset,
    pub calib: SyntheticVideoDataset,
}

impl ToyTask {
    pub const TRAIN: usize = 256;
    pub const TEST: usize = 256;
    pub const CALIB: usize = 64;

    pub fn new(config: &SyntheticVideoConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            train: SyntheticVideoDataset::generate(config, Self::TRAIN, seed.wrapping_mul(3).wrapping_add(1))?,
            test: SyntheticVideoDataset::generate(config, Self::TEST, seed.wrapping_mul(3).wrapping_add(2))?,
            calib: SyntheticVideoDataset::generate(config, Self::CALIB, seed.wrapping_mul(3).wrapping_add(3))?,
        })
    }

    pub fn for_arch(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let config = SyntheticVideoConfig {
            classes: arch.classes,
            clip: arch.input,
            ..SyntheticVideoConfig::default()
        };
        Self::new(&config, seed)
    }
}

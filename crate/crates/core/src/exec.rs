//! Sparse 3D convolution over a [`CompactWeightStore`], driven by a [`Schedule`].
//!
//! For every output tile the input halo is packed once (zeros for padding),
//! then each stored row walks its kept entries: every entry is a dense
//! `rows x channels` micro-block applied to the gathered input column.
//! Outputs are written straight to the original filter indices, so the
//! reorder is invisible to callers.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compile::{pow2_at_most, CompactWeightStore, InnerOrder, Schedule, Traversal};
use crate::error::{invalid, shape_err, Result};
use crate::sparsity::Scheme;
use crate::tensor::{ConvSpec, FeatureDims, FeatureMap, GroupPartition, KernelDims, Real};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    pub multiply_accumulates: u64,
    pub weight_bytes_read: u64,
    pub input_elements_read: u64,
    pub output_elements_written: u64,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        d.as_secs_f64().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl ExecStats {
    fn add(&mut self, o: &ExecStats) {
        self.multiply_accumulates += o.multiply_accumulates;
        self.weight_bytes_read += o.weight_bytes_read;
        self.input_elements_read += o.input_elements_read;
        self.output_elements_written += o.output_elements_written;
    }
}

/// `Instrumented` fills the counters; `Fast` leaves them at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Fast,
    Instrumented,
}

#[derive(Clone, Debug)]
struct Entry {
    d: usize,
    h: usize,
    w: usize,
    c0: usize,
    cn: usize,
    /// Start of the `rows x cn` block in the weight array.
    w_off: usize,
}

#[derive(Clone, Debug)]
struct Row {
    /// Output position of the row's first filter in an item buffer.
    pos: usize,
    /// Original filter of every stored filter of the row.
    filters: Vec<usize>,
    entries: Vec<Entry>,
}

/// A store unpacked into execution tables, with weights cast to `T`.
#[derive(Clone, Debug)]
pub struct PreparedLayer<T> {
    pub dims: KernelDims,
    pub g_m: usize,
    pub scheme: Scheme,
    rows: Vec<Row>,
    weights: Vec<T>,
}

impl<T: Real> PreparedLayer<T> {
    pub fn new(store: &CompactWeightStore) -> Result<Self> {
        let part: GroupPartition = store.partition()?;
        let k = store.dims;
        let row_perm = store.row_perm()?;
        if store.offsets.len() != row_perm.len() + 1 {
            return Err(shape_err("offset array does not match the row count"));
        }
        let mut rows = Vec::with_capacity(row_perm.len());
        let mut pos = 0usize;
        let mut w_off = 0usize;
        for (r, &p) in row_perm.iter().enumerate() {
            let nf = part.filters(p).len();
            let filters = store.reorder[pos..pos + nf].iter().map(|&f| f as usize).collect();
            let mut entries = Vec::new();
            for e in store.offsets[r] as usize..store.offsets[r + 1] as usize {
                let [d, h, w, q] = store.index[e].map(|b| b as usize);
                let ch = part.channels(q);
                let block = nf * ch.len();
                match store.scheme {
                    Scheme::Vanilla => {
                        // one group entry expands to every kernel location
                        for d in 0..k.kd {
                            for h in 0..k.kh {
                                for w in 0..k.kw {
                                    entries.push(Entry { d, h, w, c0: ch.start, cn: ch.len(), w_off });
                                    w_off += block;
                                }
                            }
                        }
                    }
                    _ => {
                        entries.push(Entry { d, h, w, c0: ch.start, cn: ch.len(), w_off });
                        w_off += block;
                    }
                }
            }
            rows.push(Row { pos, filters, entries });
            pos += nf;
        }
        if w_off != store.weights.len() {
            return Err(shape_err("weight array length does not match the index array"));
        }
        Ok(Self {
            dims: k,
            g_m: store.g_m,
            scheme: store.scheme,
            rows,
            weights: store.weights.iter().map(|&w| T::of_f64(w as f64)).collect(),
        })
    }

    /// Multiply-accumulates per output position (padded taps included).
    pub fn macs_per_position(&self) -> u64 {
        self.rows
            .iter()
            .map(|r| r.entries.iter().map(|e| (r.filters.len() * e.cn) as u64).sum::<u64>())
            .sum()
    }

    pub fn execute(&self, input: &FeatureMap<T>, spec: &ConvSpec, schedule: &Schedule, mode: ExecMode) -> Result<(FeatureMap<T>, ExecStats)> {
        let start = Instant::now();
        let in_dims = input.dims();
        let out_dims = spec.output_dims(&in_dims, &self.dims)?;
        let ext = out_dims.extents();
        schedule.validate(ext, self.g_m)?;
        let geo = TileGeometry::new(&in_dims, &self.dims, spec, schedule.tile);
        let tiles = geo.tiles(ext);
        let nt = tiles.len();
        let items: Vec<Item> = match schedule.traversal {
            Traversal::TileMajor => (0..in_dims.batch)
                .flat_map(|b| (0..nt).map(move |t| Item { b, tile: t, row: None }))
                .collect(),
            Traversal::RowMajor => (0..self.rows.len())
                .flat_map(|r| (0..in_dims.batch).flat_map(move |b| (0..nt).map(move |t| Item { b, tile: t, row: Some(r) })))
                .collect(),
        };
        let ctx = Ctx {
            layer: self,
            input,
            geo: &geo,
            tiles: &tiles,
            schedule,
            instrumented: mode == ExecMode::Instrumented,
        };
        let threads = schedule.threads.min(items.len()).max(1);
        let mut results: Vec<(usize, Vec<T>)> = Vec::with_capacity(items.len());
        let mut stats = ExecStats::default();
        if threads == 1 {
            let mut ws = Workspace::default();
            for (i, it) in items.iter().enumerate() {
                results.push((i, ctx.run(it, &mut ws, &mut stats)));
            }
        } else {
            let parts: Vec<(Vec<(usize, Vec<T>)>, ExecStats)> = std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let (ctx, items) = (&ctx, &items);
                        s.spawn(move || {
                            let mut ws = Workspace::default();
                            let mut st = ExecStats::default();
                            let out: Vec<(usize, Vec<T>)> = (t..items.len())
                                .step_by(threads)
                                .map(|i| (i, ctx.run(&items[i], &mut ws, &mut st)))
                                .collect();
                            (out, st)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            for (r, st) in parts {
                results.extend(r);
                stats.add(&st);
            }
        }
        let mut out = FeatureMap::zeros(out_dims)?;
        let (od, oh, ow) = (out_dims.depth, out_dims.height, out_dims.width);
        for (i, buf) in results {
            let it = &items[i];
            let t = &tiles[it.tile];
            let v = t.volume();
            let rows: Box<dyn Iterator<Item = &Row>> = match it.row {
                Some(r) => Box::new(std::iter::once(&self.rows[r])),
                None => Box::new(self.rows.iter()),
            };
            let base_pos = it.row.map_or(0, |r| self.rows[r].pos);
            for row in rows {
                for (fi, &f) in row.filters.iter().enumerate() {
                    let bias = T::of_f64(spec.bias_at(f));
                    let src = &buf[(row.pos - base_pos + fi) * v..(row.pos - base_pos + fi + 1) * v];
                    let mut s = 0;
                    for z in t.start[0]..t.start[0] + t.size[0] {
                        for y in t.start[1]..t.start[1] + t.size[1] {
                            let o = (((it.b * self.dims.m + f) * od + z) * oh + y) * ow + t.start[2];
                            let dst = &mut out.data_mut()[o..o + t.size[2]];
                            for (d, &x) in dst.iter_mut().zip(&src[s..s + t.size[2]]) {
                                *d = x + bias;
                            }
                            s += t.size[2];
                        }
                    }
                }
            }
        }
        stats.wall_time = start.elapsed();
        Ok((out, stats))
    }
}

#[derive(Clone, Copy, Debug)]
struct Item {
    b: usize,
    tile: usize,
    row: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Tile {
    start: [usize; 3],
    size: [usize; 3],
}

impl Tile {
    fn volume(&self) -> usize {
        self.size[0] * self.size[1] * self.size[2]
    }
}

/// Per-axis packing geometry. Along an axis with stride `s` and kernel `K`
/// the packed halo of a `T`-wide tile holds `(T - 1) * min(s, K) + K`
/// elements; when `s > K` the unused gaps between taps are skipped.
struct TileGeometry {
    stride: [usize; 3],
    pad: [usize; 3],
    kernel: [usize; 3],
    eff: [usize; 3],
    extent: [usize; 3],
    channels: usize,
    tile: [usize; 3],
}

impl TileGeometry {
    fn new(input: &FeatureDims, k: &KernelDims, spec: &ConvSpec, tile: [usize; 3]) -> Self {
        let kernel = [k.kd, k.kh, k.kw];
        let eff = [0, 1, 2].map(|i| spec.stride[i].min(kernel[i]));
        Self {
            stride: spec.stride,
            pad: spec.padding,
            kernel,
            eff,
            extent: input.extents(),
            channels: input.channels,
            tile,
        }
    }

    fn tiles(&self, ext: [usize; 3]) -> Vec<Tile> {
        let mut v = Vec::new();
        for z in (0..ext[0]).step_by(self.tile[0]) {
            for y in (0..ext[1]).step_by(self.tile[1]) {
                for x in (0..ext[2]).step_by(self.tile[2]) {
                    let start = [z, y, x];
                    let size = [0, 1, 2].map(|i| self.tile[i].min(ext[i] - start[i]));
                    v.push(Tile { start, size });
                }
            }
        }
        v
    }

    fn packed_len(&self, size: usize, axis: usize) -> usize {
        (size - 1) * self.eff[axis] + self.kernel[axis]
    }

    /// Input coordinate of packed element `a` for a tile starting at output `t0`.
    fn coord(&self, axis: usize, t0: usize, a: usize) -> Option<usize> {
        let (s, k, e) = (self.stride[axis], self.kernel[axis], self.eff[axis]);
        let raw = if s <= k {
            (t0 * s + a) as isize
        } else {
            ((t0 + a / e) * s + a % e) as isize
        } - self.pad[axis] as isize;
        (raw >= 0 && (raw as usize) < self.extent[axis]).then_some(raw as usize)
    }
}

#[derive(Default)]
struct Workspace<T> {
    packed: Vec<T>,
    acc: Vec<T>,
    col: Vec<T>,
    coords: [Vec<Option<usize>>; 3],
}

struct Ctx<'a, T> {
    layer: &'a PreparedLayer<T>,
    input: &'a FeatureMap<T>,
    geo: &'a TileGeometry,
    tiles: &'a [Tile],
    schedule: &'a Schedule,
    instrumented: bool,
}

impl<T: Real> Ctx<'_, T> {
    fn run(&self, it: &Item, ws: &mut Workspace<T>, stats: &mut ExecStats) -> Vec<T> {
        let t = self.tiles[it.tile];
        let pk = self.pack(it.b, &t, ws, stats);
        let v = t.volume();
        let rows: &[Row] = match it.row {
            Some(r) => std::slice::from_ref(&self.layer.rows[r]),
            None => &self.layer.rows,
        };
        let nf: usize = rows.iter().map(|r| r.filters.len()).sum();
        let mut out = vec![T::zero(); nf * v];
        let mut at = 0;
        for row in rows {
            let r = row.filters.len();
            ws.acc.clear();
            ws.acc.resize(r * v, T::zero());
            match self.schedule.inner {
                InnerOrder::LocationOuter => self.location_outer(row, &t, pk, ws),
                InnerOrder::SpatialOuter => self.spatial_outer(row, &t, pk, ws),
            }
            out[at * v..(at + r) * v].copy_from_slice(&ws.acc);
            at += r;
            if self.instrumented {
                for e in &row.entries {
                    stats.multiply_accumulates += (r * e.cn * v) as u64;
                    stats.weight_bytes_read += (r * e.cn * std::mem::size_of::<T>()) as u64;
                }
                stats.output_elements_written += (r * v) as u64;
            }
        }
        out
    }

    /// Packs the halo of tile `t` for all channels; returns the packed extents.
    fn pack(&self, b: usize, t: &Tile, ws: &mut Workspace<T>, stats: &mut ExecStats) -> [usize; 3] {
        let g = self.geo;
        let pk = [0, 1, 2].map(|i| g.packed_len(t.size[i], i));
        for i in 0..3 {
            ws.coords[i].clear();
            ws.coords[i].extend((0..pk[i]).map(|a| g.coord(i, t.start[i], a)));
        }
        let plane = pk[0] * pk[1] * pk[2];
        ws.packed.clear();
        ws.packed.resize(g.channels * plane, T::zero());
        let id = self.input.dims();
        let data = self.input.data();
        let mut inside = 0u64;
        for c in 0..g.channels {
            let cbase = (b * id.channels + c) * id.spatial();
            for (az, cz) in ws.coords[0].iter().enumerate() {
                let Some(z) = *cz else { continue };
                for (ay, cy) in ws.coords[1].iter().enumerate() {
                    let Some(y) = *cy else { continue };
                    let src = cbase + (z * id.height + y) * id.width;
                    let dst = c * plane + (az * pk[1] + ay) * pk[2];
                    for (ax, cx) in ws.coords[2].iter().enumerate() {
                        if let Some(x) = *cx {
                            ws.packed[dst + ax] = data[src + x];
                            inside += 1;
                        }
                    }
                }
            }
        }
        if self.instrumented {
            stats.input_elements_read += inside;
        }
        pk
    }

    fn location_outer(&self, row: &Row, t: &Tile, pk: [usize; 3], ws: &mut Workspace<T>) {
        let g = self.geo;
        let v = t.volume();
        let plane = pk[0] * pk[1] * pk[2];
        let r = row.filters.len();
        let u = pow2_at_most(self.schedule.unroll.min(r.max(1))).min(8);
        ws.col.resize(v, T::zero());
        for e in &row.entries {
            for c in 0..e.cn {
                let base = (e.c0 + c) * plane;
                let mut i = 0;
                for tz in 0..t.size[0] {
                    for ty in 0..t.size[1] {
                        let o = base + ((tz * g.eff[0] + e.d) * pk[1] + ty * g.eff[1] + e.h) * pk[2] + e.w;
                        if g.eff[2] == 1 {
                            ws.col[i..i + t.size[2]].copy_from_slice(&ws.packed[o..o + t.size[2]]);
                        } else {
                            for tx in 0..t.size[2] {
                                ws.col[i + tx] = ws.packed[o + tx * g.eff[2]];
                            }
                        }
                        i += t.size[2];
                    }
                }
                let wblk = &self.layer.weights[e.w_off..e.w_off + r * e.cn];
                let mut f = 0;
                while f + u <= r {
                    match u {
                        8 => kernel::<T, 8>(&mut ws.acc, v, f, wblk, e.cn, c, &ws.col),
                        4 => kernel::<T, 4>(&mut ws.acc, v, f, wblk, e.cn, c, &ws.col),
                        2 => kernel::<T, 2>(&mut ws.acc, v, f, wblk, e.cn, c, &ws.col),
                        _ => kernel::<T, 1>(&mut ws.acc, v, f, wblk, e.cn, c, &ws.col),
                    }
                    f += u;
                }
                while f < r {
                    kernel::<T, 1>(&mut ws.acc, v, f, wblk, e.cn, c, &ws.col);
                    f += 1;
                }
            }
        }
    }

    fn spatial_outer(&self, row: &Row, t: &Tile, pk: [usize; 3], ws: &mut Workspace<T>) {
        let g = self.geo;
        let v = t.volume();
        let plane = pk[0] * pk[1] * pk[2];
        let r = row.filters.len();
        let mut pos = 0;
        for tz in 0..t.size[0] {
            for ty in 0..t.size[1] {
                for tx in 0..t.size[2] {
                    for e in &row.entries {
                        let o = ((tz * g.eff[0] + e.d) * pk[1] + ty * g.eff[1] + e.h) * pk[2] + tx * g.eff[2] + e.w;
                        let wblk = &self.layer.weights[e.w_off..e.w_off + r * e.cn];
                        for c in 0..e.cn {
                            let x = ws.packed[(e.c0 + c) * plane + o];
                            for f in 0..r {
                                ws.acc[f * v + pos] += wblk[f * e.cn + c] * x;
                            }
                        }
                    }
                    pos += 1;
                }
            }
        }
    }
}

/// `acc[f0 + u][:] += w[f0 + u][c] * col[:]` for `u < U`, one pass over `col`.
#[inline(always)]
fn kernel<T: Real, const U: usize>(acc: &mut [T], v: usize, f0: usize, wblk: &[T], cn: usize, c: usize, col: &[T]) {
    let w: [T; U] = std::array::from_fn(|u| wblk[(f0 + u) * cn + c]);
    let block = &mut acc[f0 * v..(f0 + U) * v];
    let col = &col[..v];
    if U == 1 {
        for (a, &x) in block.iter_mut().zip(col) {
            *a += w[0] * x;
        }
        return;
    }
    for (pos, &x) in col.iter().enumerate() {
        for u in 0..U {
            block[u * v + pos] += w[u] * x;
        }
    }
}

/// Sparse convolution with instrumentation; outputs use original filter order.
pub fn conv3d_sparse<T: Real>(
    input: &FeatureMap<T>,
    store: &CompactWeightStore,
    spec: &ConvSpec,
    schedule: &Schedule,
) -> Result<(FeatureMap<T>, ExecStats)> {
    check_store(input, store)?;
    PreparedLayer::new(store)?.execute(input, spec, schedule, ExecMode::Instrumented)
}

/// Sparse convolution over a Vanilla store (one entry per kept group).
pub fn conv3d_sparse_vanilla<T: Real>(
    input: &FeatureMap<T>,
    store: &CompactWeightStore,
    spec: &ConvSpec,
    schedule: &Schedule,
) -> Result<(FeatureMap<T>, ExecStats)> {
    if store.scheme != Scheme::Vanilla {
        return Err(invalid(format!("expected a vanilla store, got {}", store.scheme)));
    }
    conv3d_sparse(input, store, spec, schedule)
}

fn check_store<T: Real>(input: &FeatureMap<T>, store: &CompactWeightStore) -> Result<()> {
    if input.dims().channels != store.dims.n {
        return Err(shape_err(format!(
            "input has {} channels, store expects {}",
            input.dims().channels,
            store.dims.n
        )));
    }
    Ok(())
}

/// Wall-clock statistics of repeated executions, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: Vec<f64>,
    pub warmup: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: Vec<f64>, warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("at least one measurement required"));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        Ok(Self {
            mean: samples.iter().sum::<f64>() / n as f64,
            median,
            min: sorted[0],
            max: sorted[n - 1],
            samples,
            warmup,
        })
    }
}

pub const DEFAULT_WARMUP: usize = 3;

/// Deterministic uniform `[-1, 1)` input.
pub fn random_input(dims: FeatureDims, seed: u64) -> Result<FeatureMap<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(dims, (0..dims.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// Times `repeats` runs of `f` after `warmup` untimed runs.
pub fn time_repeats(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    if repeats == 0 {
        return Err(invalid("repeats must be >= 1"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    LatencyStats::from_samples(samples, warmup)
}

/// Latency of one layer on a fixed random input (32-bit fast path).
pub fn bench(input_dims: FeatureDims, store: &CompactWeightStore, spec: &ConvSpec, schedule: &Schedule, repeats: usize) -> Result<LatencyStats> {
    bench_with_warmup(input_dims, store, spec, schedule, repeats, DEFAULT_WARMUP)
}

pub fn bench_with_warmup(
    input_dims: FeatureDims,
    store: &CompactWeightStore,
    spec: &ConvSpec,
    schedule: &Schedule,
    repeats: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    let input = random_input(input_dims, 0x1234)?;
    check_store(&input, store)?;
    let layer = PreparedLayer::<f32>::new(store)?;
    time_repeats(warmup, repeats, || layer.execute(&input, spec, schedule, ExecMode::Fast).map(|_| ()))
}

/// One compiled conv layer of a network: store, conv spec (with bias) and
/// whether a ReLU follows.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLayer {
    pub store: CompactWeightStore,
    pub spec: ConvSpec,
    pub relu: bool,
}

/// The conv stack of a model in compiled form, with its per-sample input
/// shape `(channels, depth, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input: [usize; 4],
    pub layers: Vec<CompiledLayer>,
}

impl Network {
    pub fn input_dims(&self, batch: usize) -> FeatureDims {
        let [c, d, h, w] = self.input;
        FeatureDims::new(batch, c, d, h, w)
    }

    /// Input dims of every layer for a batch.
    pub fn layer_inputs(&self, batch: usize) -> Result<Vec<FeatureDims>> {
        let mut d = self.input_dims(batch);
        let mut v = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            v.push(d);
            d = l.spec.output_dims(&d, &l.store.dims)?;
        }
        Ok(v)
    }

    /// Default schedule of every layer.
    pub fn default_schedules(&self, batch: usize, threads: usize) -> Result<Vec<Schedule>> {
        self.layer_inputs(batch)?
            .iter()
            .zip(&self.layers)
            .map(|(d, l)| Ok(crate::compile::default_schedule(&l.store, &l.spec.output_dims(d, &l.store.dims)?, threads)))
            .collect()
    }
}

/// Compiles the conv layers of `model` under `masks` (one per conv layer).
/// Every layer is followed by a ReLU, as in the model.
pub fn compile_network(model: &crate::train::ToyModel, masks: &[crate::sparsity::GroupMask], reorder: bool) -> Result<Network> {
    if masks.len() != model.convs().len() {
        return Err(shape_err(format!("{} masks for {} conv layers", masks.len(), model.convs().len())));
    }
    let layers = model
        .convs()
        .iter()
        .zip(masks)
        .map(|(c, m)| {
            Ok(CompiledLayer {
                store: crate::compile::compile_layer(&c.weights, m, reorder)?,
                spec: c.spec(),
                relu: true,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Network { input: model.arch().input, layers })
}

/// A conv stack ready to run.
pub struct PreparedNetwork<T> {
    layers: Vec<(PreparedLayer<T>, ConvSpec, bool)>,
}

impl<T: Real> PreparedNetwork<T> {
    pub fn new(layers: &[CompiledLayer]) -> Result<Self> {
        Ok(Self {
            layers: layers
                .iter()
                .map(|l| Ok((PreparedLayer::new(&l.store)?, l.spec.clone(), l.relu)))
                .collect::<Result<_>>()?,
        })
    }

    /// Output dims of every layer for `input`.
    pub fn output_dims(&self, input: FeatureDims) -> Result<Vec<FeatureDims>> {
        let mut d = input;
        let mut out = Vec::new();
        for (l, spec, _) in &self.layers {
            d = spec.output_dims(&d, &l.dims)?;
            out.push(d);
        }
        Ok(out)
    }

    pub fn run(&self, input: &FeatureMap<T>, schedules: &[Schedule], mode: ExecMode) -> Result<(FeatureMap<T>, Vec<ExecStats>)> {
        if schedules.len() != self.layers.len() {
            return Err(shape_err(format!("{} schedules for {} layers", schedules.len(), self.layers.len())));
        }
        let mut x = input.clone();
        let mut stats = Vec::with_capacity(self.layers.len());
        for ((layer, spec, relu), s) in self.layers.iter().zip(schedules) {
            if x.dims().channels != layer.dims.n {
                return Err(shape_err(format!("layer expects {} channels, got {}", layer.dims.n, x.dims().channels)));
            }
            let (mut y, st) = layer.execute(&x, spec, s, mode)?;
            if *relu {
                for v in y.data_mut() {
                    *v = v.max(T::zero());
                }
            }
            stats.push(st);
            x = y;
        }
        Ok((x, stats))
    }
}

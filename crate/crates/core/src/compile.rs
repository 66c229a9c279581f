//! Offline compilation of a pruned layer: hierarchical weight reorder (HWR),
//! compact weight storage (CWS) and execution schedules.
//!
//! Rows are kernel-group rows (`g_M` consecutive filters sharing one pruning
//! pattern). HWR permutes whole rows so that rows with similar kept-location
//! patterns are adjacent, and stores every row's kept locations in one
//! canonical `(d, h, w, q)` order.
//!
//! CWS byte layout (little-endian):
//!
//! ```text
//! magic  "CWS3"            4 bytes
//! version u16, endian u8 (1 = little), scheme u8
//! M, N, K_h, K_w, K_d, g_M, g_N      u32 each
//! reorder  u16[M]          stored filter position -> original filter
//! offsets  u32[P + 1]      per stored row, CSR-style
//! index    [u8; 4][L]      [d, h, w, q] per kept entry
//! weights  f32[..]         per entry: rows x group channels (vanilla: x K_d K_h K_w)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::sparsity::{GroupMask, Scheme};
use crate::tensor::{partition, FeatureDims, GroupPartition, KernelDims, Real, WeightTensor5D};

pub const CWS_MAGIC: [u8; 4] = *b"CWS3";
pub const CWS_VERSION: u16 = 1;
pub const CWS_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 7 * 4;
const INDEX_LIMIT: usize = 255;
const FILTER_LIMIT: usize = 65535;

/// One kept entry of a row. For vanilla stores `d = h = w = 0` and the entry
/// covers every kernel location of the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Loc {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub q: usize,
}

/// Converts a mask into the form the store holds: KGS or Vanilla. Filter
/// masks become KGS masks over `1 x min(4, N)` groups.
pub fn storage_mask(mask: &GroupMask) -> Result<GroupMask> {
    match mask.scheme {
        Scheme::Kgs | Scheme::Vanilla => Ok(mask.clone()),
        Scheme::Filter => {
            let dims = mask.dims();
            let part = partition(dims, 1, dims.n.min(4))?;
            Ok(GroupMask::new(Scheme::Filter, part, mask.keep.clone())?.to_kgs())
        }
    }
}

/// Kept entries of every (original) row, unsorted.
fn row_entries(mask: &GroupMask) -> Vec<Vec<Loc>> {
    let part = &mask.partition;
    let k = part.dims;
    let ks = part.kernel_volume();
    let mut rows = vec![Vec::new(); part.p];
    for (p, row) in rows.iter_mut().enumerate() {
        for q in 0..part.q {
            match mask.scheme {
                Scheme::Vanilla => {
                    if mask.keep[p * part.q + q] {
                        row.push(Loc { d: 0, h: 0, w: 0, q });
                    }
                }
                _ => {
                    for h in 0..k.kh {
                        for w in 0..k.kw {
                            for d in 0..k.kd {
                                let loc = k.location(h, w, d);
                                if mask.keep[(p * part.q + q) * ks + loc] {
                                    row.push(Loc { d, h, w, q });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    rows
}

/// Number of kept entries at identical positions; `a` and `b` must be sorted.
pub fn filter_similarity(a: &[Loc], b: &[Loc]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Sum of similarities of consecutive rows in `order`.
pub fn adjacent_similarity(patterns: &[Vec<Loc>], order: &[usize]) -> usize {
    order
        .windows(2)
        .map(|w| filter_similarity(&patterns[w[0]], &patterns[w[1]]))
        .sum()
}

/// Row permutation plus the per-row entry order used by the store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorderPlan {
    pub dims: KernelDims,
    pub g_m: usize,
    /// Stored row -> original row.
    pub row_perm: Vec<usize>,
    /// Stored filter position -> original filter (the reorder array).
    pub filter_perm: Vec<usize>,
    /// Kept entries of each stored row, in storage order.
    pub row_locations: Vec<Vec<Loc>>,
}

impl ReorderPlan {
    fn from_rows(part: &GroupPartition, row_perm: Vec<usize>, rows: Vec<Vec<Loc>>) -> Self {
        let filter_perm = row_perm.iter().flat_map(|&p| part.filters(p)).collect();
        let mut rows = rows.into_iter().map(Some).collect::<Vec<_>>();
        let row_locations = row_perm.iter().map(|&p| rows[p].take().expect("permutation")).collect();
        Self {
            dims: part.dims,
            g_m: part.g_m,
            row_perm,
            filter_perm,
            row_locations,
        }
    }

    /// Identity row order with entries in the natural `(q, h, w, d)` order.
    pub fn natural(mask: &GroupMask) -> Result<Self> {
        let mask = storage_mask(mask)?;
        let rows = row_entries(&mask);
        Ok(Self::from_rows(&mask.partition, (0..mask.partition.p).collect(), rows))
    }

    /// Original filter -> stored position.
    pub fn inverse_filter_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.filter_perm.len()];
        for (pos, &f) in self.filter_perm.iter().enumerate() {
            inv[f] = pos;
        }
        inv
    }

    pub fn is_identity(&self) -> bool {
        self.row_perm.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Greedy HWR. Seeds with the row holding the most kept entries, then keeps
/// appending the unplaced row most similar to the last placed one (ties:
/// lowest row index). Falls back to the identity order when that has a
/// strictly larger adjacent-similarity sum.
pub fn hwr_reorder(mask: &GroupMask) -> Result<ReorderPlan> {
    let mask = storage_mask(mask)?;
    let mut rows = row_entries(&mask);
    for r in &mut rows {
        r.sort();
    }
    let p = rows.len();
    let mut placed = vec![false; p];
    let mut order = Vec::with_capacity(p);
    if p > 0 {
        let seed = (0..p).max_by(|&a, &b| rows[a].len().cmp(&rows[b].len()).then(b.cmp(&a))).expect("p > 0");
        order.push(seed);
        placed[seed] = true;
        while order.len() < p {
            let last = *order.last().expect("non-empty");
            let next = (0..p)
                .filter(|&r| !placed[r])
                .max_by(|&a, &b| {
                    filter_similarity(&rows[last], &rows[a])
                        .cmp(&filter_similarity(&rows[last], &rows[b]))
                        .then(b.cmp(&a))
                })
                .expect("unplaced row exists");
            placed[next] = true;
            order.push(next);
        }
    }
    let identity: Vec<usize> = (0..p).collect();
    if adjacent_similarity(&rows, &identity) > adjacent_similarity(&rows, &order) {
        order = identity;
    }
    Ok(ReorderPlan::from_rows(&mask.partition, order, rows))
}

/// KGS or Vanilla weights in compact form.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactWeightStore {
    /// `Kgs` (one entry per kept location) or `Vanilla` (one entry per kept group).
    pub scheme: Scheme,
    pub dims: KernelDims,
    pub g_m: usize,
    pub g_n: usize,
    pub reorder: Vec<u16>,
    pub offsets: Vec<u32>,
    /// `[d, h, w, q]`
    pub index: Vec<[u8; 4]>,
    pub weights: Vec<f32>,
}

fn check_limit(name: &'static str, value: usize, limit: usize) -> Result<()> {
    if value > limit {
        return Err(Error::DimensionLimit { name, value, limit });
    }
    Ok(())
}

/// Encodes `weights` under `mask` with the row/entry order of `plan`.
pub fn cws_encode<T: Real>(weights: &WeightTensor5D<T>, mask: &GroupMask, plan: &ReorderPlan) -> Result<CompactWeightStore> {
    let mask = storage_mask(mask)?;
    let part = mask.partition;
    let k = weights.dims();
    if mask.dims() != k || plan.dims != k || plan.g_m != part.g_m {
        return Err(shape_err("weights, mask and plan disagree on dims"));
    }
    check_limit("K_d", k.kd, INDEX_LIMIT)?;
    check_limit("K_h", k.kh, INDEX_LIMIT)?;
    check_limit("K_w", k.kw, INDEX_LIMIT)?;
    check_limit("ceil(N / g_N)", part.q, INDEX_LIMIT)?;
    check_limit("M", k.m, FILTER_LIMIT)?;
    if plan.row_perm.len() != part.p || plan.row_locations.len() != part.p {
        return Err(shape_err("plan row count does not match the partition"));
    }
    let mut expected = row_entries(&mask);
    for (r, &p) in plan.row_perm.iter().enumerate() {
        let mut got = plan.row_locations[r].clone();
        got.sort();
        expected[p].sort();
        if got != expected[p] {
            return Err(invalid(format!("plan row {r} does not list the kept entries of row {p}")));
        }
    }
    let mut offsets = vec![0u32];
    let mut index = Vec::new();
    let mut data = Vec::new();
    for (r, &p) in plan.row_perm.iter().enumerate() {
        for loc in &plan.row_locations[r] {
            index.push([loc.d as u8, loc.h as u8, loc.w as u8, loc.q as u8]);
            match mask.scheme {
                Scheme::Vanilla => {
                    for d in 0..k.kd {
                        for h in 0..k.kh {
                            for w in 0..k.kw {
                                for f in part.filters(p) {
                                    for c in part.channels(loc.q) {
                                        data.push(weights.get(f, c, h, w, d).as_f64() as f32);
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {
                    for f in part.filters(p) {
                        for c in part.channels(loc.q) {
                            data.push(weights.get(f, c, loc.h, loc.w, loc.d).as_f64() as f32);
                        }
                    }
                }
            }
        }
        offsets.push(index.len() as u32);
    }
    Ok(CompactWeightStore {
        scheme: mask.scheme,
        dims: k,
        g_m: part.g_m,
        g_n: part.g_n,
        reorder: plan.filter_perm.iter().map(|&f| f as u16).collect(),
        offsets,
        index,
        weights: data,
    })
}

/// Reconstructs the masked weights (original filter order), the mask and the plan.
pub fn cws_decode(store: &CompactWeightStore) -> Result<(WeightTensor5D<f32>, GroupMask, ReorderPlan)> {
    // validation is shared with the byte decoder
    let bytes = store.to_bytes();
    CompactWeightStore::from_bytes(&bytes)?;
    let part = store.partition()?;
    let k = store.dims;
    let ks = k.kernel_volume();
    let row_perm = store.row_perm()?;
    let mut w = WeightTensor5D::<f32>::zeros(k, 0)?;
    let units = match store.scheme {
        Scheme::Vanilla => part.num_groups(),
        _ => part.num_groups() * ks,
    };
    let mut keep = vec![false; units];
    let mut row_locations = Vec::with_capacity(part.p);
    let mut cursor = 0usize;
    for (r, &p) in row_perm.iter().enumerate() {
        let mut locs = Vec::new();
        for e in store.offsets[r] as usize..store.offsets[r + 1] as usize {
            let [d, h, ww, q] = store.index[e].map(|b| b as usize);
            let loc = Loc { d, h, w: ww, q };
            locs.push(loc);
            match store.scheme {
                Scheme::Vanilla => {
                    keep[p * part.q + q] = true;
                    for d in 0..k.kd {
                        for h in 0..k.kh {
                            for x in 0..k.kw {
                                for f in part.filters(p) {
                                    for c in part.channels(q) {
                                        w.data_mut()[k.index(f, c, h, x, d)] = store.weights[cursor];
                                        cursor += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {
                    keep[(p * part.q + q) * ks + k.location(h, ww, d)] = true;
                    for f in part.filters(p) {
                        for c in part.channels(q) {
                            w.data_mut()[k.index(f, c, h, ww, d)] = store.weights[cursor];
                            cursor += 1;
                        }
                    }
                }
            }
        }
        row_locations.push(locs);
    }
    let mask = GroupMask::new(store.scheme, part, keep)?;
    // from_rows expects rows indexed by original row
    let mut by_orig = vec![Vec::new(); part.p];
    for (&p, locs) in row_perm.iter().zip(row_locations) {
        by_orig[p] = locs;
    }
    let plan = ReorderPlan::from_rows(&part, row_perm, by_orig);
    Ok((w, mask, plan))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

impl CompactWeightStore {
    pub fn partition(&self) -> Result<GroupPartition> {
        partition(self.dims, self.g_m, self.g_n)
    }

    /// Weight values held by one entry of a row of `rows` filters over channel group `q`.
    pub fn entry_len(&self, part: &GroupPartition, p: usize, q: usize) -> usize {
        let base = part.filters(p).len() * part.channels(q).len();
        match self.scheme {
            Scheme::Vanilla => base * self.dims.kernel_volume(),
            _ => base,
        }
    }

    /// Stored row -> original row.
    pub fn row_perm(&self) -> Result<Vec<usize>> {
        let part = self.partition()?;
        let mut perm = Vec::with_capacity(part.p);
        let mut pos = 0;
        while pos < self.reorder.len() {
            let p = self.reorder[pos] as usize / self.g_m;
            perm.push(p);
            pos += part.filters(p).len();
        }
        Ok(perm)
    }

    /// Total kept weights (counting every weight of a kept vanilla group).
    pub fn kept_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn kept_entries(&self) -> usize {
        self.index.len()
    }

    pub fn byte_len(&self) -> usize {
        CWS_HEADER_LEN + 2 * self.reorder.len() + 4 * self.offsets.len() + 4 * self.index.len() + 4 * self.weights.len()
    }

    /// Size of the same layer in a CSR-style layout carrying the same header
    /// and reorder array: `(M + 1)` u32 row pointers plus an f32 value and a
    /// u32 column index per kept weight.
    pub fn csr_style_bytes(&self) -> usize {
        CWS_HEADER_LEN + 2 * self.reorder.len() + 4 * (self.dims.m + 1) + 8 * self.weights.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&CWS_MAGIC);
        out.extend_from_slice(&CWS_VERSION.to_le_bytes());
        out.push(1);
        out.push(self.scheme.code());
        let k = self.dims;
        for v in [k.m, k.n, k.kh, k.kw, k.kd, self.g_m, self.g_n] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &r in &self.reorder {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for &o in &self.offsets {
            out.extend_from_slice(&o.to_le_bytes());
        }
        for idx in &self.index {
            out.extend_from_slice(idx);
        }
        for &w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses and validates a store; errors carry the byte offset of the
    /// first inconsistency.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4, "magic")? != CWS_MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = rd.u16("version")?;
        if version != CWS_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let endian = rd.take(1, "endian flag")?[0];
        if endian != 1 {
            return Err(format_err(6, format!("unsupported endian flag {endian}")));
        }
        let scheme = match Scheme::from_code(rd.take(1, "scheme")?[0]) {
            Some(s @ (Scheme::Kgs | Scheme::Vanilla)) => s,
            _ => return Err(format_err(7, "scheme must be kgs or vanilla")),
        };
        let mut hdr = [0usize; 7];
        for (i, v) in hdr.iter_mut().enumerate() {
            *v = rd.u32("header")? as usize;
            if *v == 0 {
                return Err(format_err(8 + 4 * i, "zero dimension in header"));
            }
        }
        let [m, n, kh, kw, kd, g_m, g_n] = hdr;
        let dims = KernelDims::new(m, n, kh, kw, kd);
        let part = partition(dims, g_m, g_n).map_err(|e| format_err(8, e.to_string()))?;
        for (i, (v, lim)) in [(m, FILTER_LIMIT), (kh, INDEX_LIMIT), (kw, INDEX_LIMIT), (kd, INDEX_LIMIT)].into_iter().enumerate() {
            if v > lim {
                let off = [8, 16, 20, 24][i];
                return Err(format_err(off, format!("dimension {v} exceeds {lim}")));
            }
        }
        if part.q > INDEX_LIMIT {
            return Err(format_err(12, "channel-group count exceeds 255"));
        }
        let reorder_start = rd.pos;
        let mut reorder = Vec::with_capacity(m);
        for _ in 0..m {
            reorder.push(rd.u16("reorder array")?);
        }
        // the reorder array must list original rows as consecutive blocks
        let mut seen_row = vec![false; part.p];
        let mut pos = 0;
        while pos < m {
            let off = reorder_start + 2 * pos;
            let f = reorder[pos] as usize;
            if f >= m {
                return Err(format_err(off, format!("filter {f} out of range")));
            }
            let p = f / g_m;
            if f != part.filters(p).start || seen_row[p] {
                return Err(format_err(off, format!("filter {f} does not start an unused row")));
            }
            seen_row[p] = true;
            for (i, expect) in part.filters(p).enumerate() {
                if pos + i >= m || reorder[pos + i] as usize != expect {
                    return Err(format_err(reorder_start + 2 * (pos + i).min(m), "row filters not consecutive"));
                }
            }
            pos += part.filters(p).len();
        }
        let row_perm: Vec<usize> = {
            let mut v = Vec::new();
            let mut pos = 0;
            while pos < m {
                let p = reorder[pos] as usize / g_m;
                v.push(p);
                pos += part.filters(p).len();
            }
            v
        };
        let offsets_start = rd.pos;
        let mut offsets = Vec::with_capacity(part.p + 1);
        for i in 0..=part.p {
            let o = rd.u32("offset array")?;
            if i == 0 && o != 0 {
                return Err(format_err(offsets_start, "first offset must be 0"));
            }
            if i > 0 && o < offsets[i - 1] {
                return Err(format_err(offsets_start + 4 * i, "offsets decrease"));
            }
            offsets.push(o);
        }
        let entries = *offsets.last().expect("non-empty") as usize;
        let index_start = rd.pos;
        let raw = rd.take(4 * entries, "index array")?;
        let mut index = Vec::with_capacity(entries);
        let mut weight_count = 0usize;
        let bounds = match scheme {
            Scheme::Vanilla => [1, 1, 1, part.q],
            _ => [kd, kh, kw, part.q],
        };
        for (r, &p) in row_perm.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for e in offsets[r] as usize..offsets[r + 1] as usize {
                let b: [u8; 4] = raw[4 * e..4 * e + 4].try_into().expect("4 bytes");
                for j in 0..4 {
                    if b[j] as usize >= bounds[j] {
                        return Err(format_err(index_start + 4 * e + j, format!("index byte {} >= bound {}", b[j], bounds[j])));
                    }
                }
                if !seen.insert(b) {
                    return Err(format_err(index_start + 4 * e, "duplicate entry within a row"));
                }
                let base = part.filters(p).len() * part.channels(b[3] as usize).len();
                weight_count += match scheme {
                    Scheme::Vanilla => base * dims.kernel_volume(),
                    _ => base,
                };
                index.push(b);
            }
        }
        let raw = rd.take(4 * weight_count, "weight array")?;
        let weights = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if rd.pos != bytes.len() {
            return Err(format_err(rd.pos, format!("{} trailing bytes after the weight array", bytes.len() - rd.pos)));
        }
        Ok(Self {
            scheme,
            dims,
            g_m,
            g_n,
            reorder,
            offsets,
            index,
            weights,
        })
    }
}

/// Which loop sits outermost: output tiles (input halo packed once per tile)
/// or filter-group rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Traversal {
    TileMajor,
    RowMajor,
}

/// Order of the two loops inside a (tile, row) block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InnerOrder {
    /// Kept locations outside, output positions inside.
    LocationOuter,
    /// Output positions outside, kept locations inside.
    SpatialOuter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    /// Output tile `(depth, height, width)`.
    pub tile: [usize; 3],
    /// Filters per micro-kernel step.
    pub unroll: usize,
    pub traversal: Traversal,
    pub inner: InnerOrder,
    pub threads: usize,
}

pub const UNROLLS: [usize; 4] = [1, 2, 4, 8];

impl Schedule {
    /// Legality against the output extents `(D, H, W)` and row size `g_M`.
    pub fn validate(&self, out_extents: [usize; 3], g_m: usize) -> Result<()> {
        for (i, (&t, &e)) in self.tile.iter().zip(&out_extents).enumerate() {
            if t == 0 || t > e {
                return Err(Error::Schedule(format!("tile[{i}] = {t} outside [1, {e}]")));
            }
        }
        if !UNROLLS.contains(&self.unroll) {
            return Err(Error::Schedule(format!("unroll {} not in {{1, 2, 4, 8}}", self.unroll)));
        }
        if self.unroll > g_m {
            return Err(Error::Schedule(format!("unroll {} exceeds g_M = {g_m}", self.unroll)));
        }
        if self.threads == 0 {
            return Err(Error::Schedule("thread count must be >= 1".into()));
        }
        Ok(())
    }

    /// No tiling: one tile covering the whole output.
    pub fn untiled(out_extents: [usize; 3], threads: usize) -> Self {
        Self {
            tile: out_extents,
            unroll: 1,
            traversal: Traversal::TileMajor,
            inner: InnerOrder::LocationOuter,
            threads,
        }
    }
}

/// Starting schedule: tiles of up to `4 x 8 x 8` (powers of two capped at
/// the extents), the widest unroll not above `g_M`, tile-major traversal.
pub fn default_schedule(store: &CompactWeightStore, output: &FeatureDims, threads: usize) -> Schedule {
    let caps = [4, 8, 8];
    let ext = output.extents();
    let tile = [0, 1, 2].map(|i| pow2_at_most(ext[i].min(caps[i])).max(1));
    let unroll = *UNROLLS.iter().rev().find(|&&u| u <= store.g_m.min(4)).expect("1 always fits");
    Schedule {
        tile,
        unroll,
        traversal: Traversal::TileMajor,
        inner: InnerOrder::LocationOuter,
        threads: threads.max(1),
    }
}

pub(crate) fn pow2_at_most(v: usize) -> usize {
    if v == 0 {
        0
    } else {
        1 << (usize::BITS - 1 - v.leading_zeros())
    }
}

/// HWR (or natural order when `reorder` is false) followed by CWS encoding.
pub fn compile_layer<T: Real>(weights: &WeightTensor5D<T>, mask: &GroupMask, reorder: bool) -> Result<CompactWeightStore> {
    let plan = if reorder { hwr_reorder(mask)? } else { ReorderPlan::natural(mask)? };
    cws_encode(weights, mask, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::apply_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(rng: &mut ChaCha8Rng, dims: KernelDims) -> WeightTensor5D<f64> {
        WeightTensor5D::new(dims, (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect(), 0).unwrap()
    }

    /// Masks of one-location-per-row layers: each filter row `p` keeps the
    /// listed `(h, w)` cells of a 3x3 section.
    fn section_mask(rows: &[&[usize]]) -> GroupMask {
        let dims = KernelDims::new(rows.len(), 1, 3, 3, 1);
        let part = partition(dims, 1, 1).unwrap();
        let mut keep = vec![false; dims.m * 9];
        for (p, cells) in rows.iter().enumerate() {
            for &c in *cells {
                keep[p * 9 + c] = true;
            }
        }
        GroupMask::new(Scheme::Kgs, part, keep).unwrap()
    }

    fn sorted_rows(mask: &GroupMask) -> Vec<Vec<Loc>> {
        let mut rows = row_entries(mask);
        rows.iter_mut().for_each(|r| r.sort());
        rows
    }

    #[test]
    fn similarity_examples() {
        let m = section_mask(&[&[0, 1, 2, 4], &[4, 5, 7], &[0, 1, 2, 8], &[3, 6]]);
        let rows = sorted_rows(&m);
        assert_eq!(filter_similarity(&rows[0], &rows[0]), 4);
        assert_eq!(filter_similarity(&rows[0], &rows[3]), 0);
        assert_eq!(filter_similarity(&rows[0], &rows[2]), 3);
        assert_eq!(filter_similarity(&rows[0], &rows[1]), 1);
        assert_eq!(filter_similarity(&rows[1], &rows[2]), filter_similarity(&rows[2], &rows[1]));
        let plan = hwr_reorder(&m).unwrap();
        let pos0 = plan.row_perm.iter().position(|&r| r == 0).unwrap();
        let pos2 = plan.row_perm.iter().position(|&r| r == 2).unwrap();
        assert_eq!(pos0.abs_diff(pos2), 1);
    }

    #[test]
    fn dense_mask_gives_identity() {
        let dims = KernelDims::new(12, 8, 3, 3, 3);
        let part = partition(dims, 4, 4).unwrap();
        let plan = hwr_reorder(&GroupMask::all(Scheme::Kgs, part, true)).unwrap();
        assert!(plan.is_identity());
        assert_eq!(plan.filter_perm, (0..12).collect::<Vec<_>>());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identical_pair_becomes_adjacent() {
        // rows 0 and 3 identical; 1 and 2 disjoint from them and from each other
        let m = section_mask(&[&[0, 1, 2], &[3, 4], &[6, 7], &[0, 1, 2]]);
        let rows = sorted_rows(&m);
        let plan = hwr_reorder(&m).unwrap();
        let best = permutations(4).iter().map(|o| adjacent_similarity(&rows, o)).max().unwrap();
        assert_eq!(adjacent_similarity(&rows, &plan.row_perm), best);
        let pos0 = plan.row_perm.iter().position(|&r| r == 0).unwrap();
        let pos3 = plan.row_perm.iter().position(|&r| r == 3).unwrap();
        assert_eq!(pos0.abs_diff(pos3), 1);
    }

    #[test]
    fn hwr_never_loses_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let dims = KernelDims::new(rng.random_range(1..20), rng.random_range(1..9), 3, 3, rng.random_range(1..4));
            let part = partition(dims, rng.random_range(1..5), rng.random_range(1..5)).unwrap();
            let scheme = if rng.random_bool(0.5) { Scheme::Kgs } else { Scheme::Vanilla };
            let n = crate::sparsity::unit_count(scheme, &part);
            let mask = GroupMask::new(scheme, part, (0..n).map(|_| rng.random_bool(0.4)).collect()).unwrap();
            let rows = sorted_rows(&mask);
            let plan = hwr_reorder(&mask).unwrap();
            let id: Vec<usize> = (0..part.p).collect();
            assert!(adjacent_similarity(&rows, &plan.row_perm) >= adjacent_similarity(&rows, &id));
            let inv = plan.inverse_filter_perm();
            for (pos, &f) in plan.filter_perm.iter().enumerate() {
                assert_eq!(inv[f], pos);
            }
        }
    }

    #[test]
    fn encode_examples() {
        let dims = KernelDims::new(4, 4, 3, 3, 3);
        let part = partition(dims, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&mut rng, dims);
        let empty = compile_layer(&w, &GroupMask::all(Scheme::Kgs, part, false), true).unwrap();
        assert!(empty.index.is_empty() && empty.weights.is_empty());
        assert!(empty.offsets.iter().all(|&o| o == 0));

        let mut keep = vec![false; 27];
        keep[0] = true;
        let one = compile_layer(&w, &GroupMask::new(Scheme::Kgs, part, keep).unwrap(), true).unwrap();
        assert_eq!(one.index, vec![[0, 0, 0, 0]]);
        assert_eq!(one.weights.len(), 16);
    }

    #[test]
    fn dimension_limits_are_named() {
        let dims = KernelDims::new(1, 1, 1, 1, 256);
        let part = partition(dims, 1, 1).unwrap();
        let w = WeightTensor5D::<f32>::zeros(dims, 0).unwrap();
        let err = compile_layer(&w, &GroupMask::all(Scheme::Kgs, part, true), false).unwrap_err();
        assert!(matches!(err, Error::DimensionLimit { name: "K_d", .. }), "{err}");
    }

    #[test]
    fn round_trip_small_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let dims = KernelDims::new(rng.random_range(1..14), rng.random_range(1..10), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let part = partition(dims, rng.random_range(1..6), rng.random_range(1..6)).unwrap();
            let scheme = Scheme::ALL[rng.random_range(0..3)];
            let n = crate::sparsity::unit_count(scheme, &part);
            let mask = GroupMask::new(scheme, part, (0..n).map(|_| rng.random_bool(0.5)).collect()).unwrap();
            let w = random_weights(&mut rng, dims).cast::<f32>();
            let store = compile_layer(&w, &mask, rng.random_bool(0.5)).unwrap();
            let bytes = store.to_bytes();
            assert_eq!(bytes.len(), store.byte_len());
            assert_eq!(CompactWeightStore::from_bytes(&bytes).unwrap(), store);
            let (dw, dmask, _) = cws_decode(&store).unwrap();
            let expect = apply_mask(&w, &mask).unwrap();
            assert!(dw.data().iter().zip(expect.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(dmask, storage_mask(&mask).unwrap());
        }
    }

    #[test]
    fn corrupt_bytes_report_offsets() {
        let dims = KernelDims::new(8, 8, 3, 3, 3);
        let part = partition(dims, 4, 4).unwrap();
        let w = WeightTensor5D::<f32>::zeros(dims, 0).unwrap();
        let store = compile_layer(&w, &GroupMask::all(Scheme::Kgs, part, true), true).unwrap();
        let bytes = store.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CompactWeightStore::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(CompactWeightStore::from_bytes(truncated), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        let idx0 = CWS_HEADER_LEN + 2 * 8 + 4 * 3;
        bad[idx0] = 9; // depth byte out of bounds
        match CompactWeightStore::from_bytes(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, idx0),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(CompactWeightStore::from_bytes(&trailing), Err(Error::Format { .. })));
    }

    #[test]
    fn default_schedule_examples() {
        let dims = KernelDims::new(8, 8, 3, 3, 3);
        let part = partition(dims, 4, 4).unwrap();
        let w = WeightTensor5D::<f32>::zeros(dims, 0).unwrap();
        let store = compile_layer(&w, &GroupMask::all(Scheme::Kgs, part, true), true).unwrap();
        let s = default_schedule(&store, &FeatureDims::new(1, 8, 1, 1, 1), 1);
        assert_eq!(s.tile, [1, 1, 1]);
        s.validate([1, 1, 1], 4).unwrap();
        let s = default_schedule(&store, &FeatureDims::new(1, 8, 16, 28, 28), 2);
        s.validate([16, 28, 28], 4).unwrap();
        assert!([1, 2, 4].contains(&s.unroll));
        assert!(Schedule { unroll: 8, ..s }.validate([16, 28, 28], 4).is_err());
        assert!(Schedule { tile: [32, 1, 1], ..s }.validate([16, 28, 28], 4).is_err());
    }

    #[test]
    fn cws_is_never_larger_than_csr_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let dims = KernelDims::new(rng.random_range(1..17), rng.random_range(1..17), 3, 3, rng.random_range(1..4));
            let part = partition(dims, rng.random_range(1..5), rng.random_range(1..5)).unwrap();
            let n = crate::sparsity::unit_count(Scheme::Kgs, &part);
            let mask = GroupMask::new(Scheme::Kgs, part, (0..n).map(|_| rng.random_bool(0.5)).collect()).unwrap();
            let store = compile_layer(&WeightTensor5D::<f32>::zeros(dims, 0).unwrap(), &mask, true).unwrap();
            assert!(store.byte_len() <= store.csr_style_bytes());
        }
    }
}

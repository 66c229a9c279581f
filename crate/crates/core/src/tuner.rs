//! Measured search over [`Schedule`] configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compile::{cws_decode, default_schedule, pow2_at_most, CompactWeightStore, InnerOrder, Schedule, Traversal, UNROLLS};
use crate::error::{invalid, Error, Result};
use crate::exec::{random_input, time_repeats, ExecMode, PreparedLayer, DEFAULT_WARMUP};
use crate::sparsity::apply_mask;
use crate::tensor::{conv3d_dense, max_rel_diff, ConvSpec, FeatureDims};

/// Spot-check tolerance against the 64-bit dense oracle.
pub const SPOT_CHECK_TOL: f64 = 1e-5;
/// Winners closer than this (relative median) are reported as ties.
pub const TIE_MARGIN: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSpace {
    /// Tile options per output axis `(depth, height, width)`.
    pub tiles: [Vec<usize>; 3],
    pub unrolls: Vec<usize>,
    pub orders: Vec<(Traversal, InnerOrder)>,
    pub threads: Vec<usize>,
    /// Maximum number of candidates.
    pub budget: usize,
    /// Seed of the subsampling when the space exceeds the budget.
    pub seed: u64,
    /// Always measured, in front of the enumerated candidates.
    pub include: Vec<Schedule>,
}

impl TuneSpace {
    /// Powers of two up to each extent, every legal unroll, all four loop
    /// orders, one thread count; the default schedule is always included.
    pub fn for_layer(store: &CompactWeightStore, output: &FeatureDims, threads: usize, budget: usize, seed: u64) -> Self {
        let ext = output.extents();
        let tiles = [0, 1, 2].map(|i| {
            let mut v: Vec<usize> = std::iter::successors(Some(1usize), |t| Some(t * 2)).take_while(|&t| t <= ext[i]).collect();
            if pow2_at_most(ext[i]) != ext[i] {
                v.push(ext[i]);
            }
            v
        });
        Self {
            tiles,
            unrolls: UNROLLS.iter().copied().filter(|&u| u <= store.g_m).collect(),
            orders: vec![
                (Traversal::TileMajor, InnerOrder::LocationOuter),
                (Traversal::TileMajor, InnerOrder::SpatialOuter),
                (Traversal::RowMajor, InnerOrder::LocationOuter),
                (Traversal::RowMajor, InnerOrder::SpatialOuter),
            ],
            threads: vec![threads.max(1)],
            budget,
            seed,
            include: vec![default_schedule(store, output, threads)],
        }
    }

    /// Full Cartesian product, in lexicographic order of the option lists.
    fn product(&self) -> Vec<Schedule> {
        let mut v = Vec::new();
        for &td in &self.tiles[0] {
            for &th in &self.tiles[1] {
                for &tw in &self.tiles[2] {
                    for &unroll in &self.unrolls {
                        for &(traversal, inner) in &self.orders {
                            for &threads in &self.threads {
                                v.push(Schedule { tile: [td, th, tw], unroll, traversal, inner, threads });
                            }
                        }
                    }
                }
            }
        }
        v
    }
}

/// Deterministic candidate list: `include` first, then the product (minus
/// duplicates), uniformly subsampled with `seed` down to the budget.
pub fn enumerate(space: &TuneSpace) -> Result<Vec<Schedule>> {
    if space.budget == 0 {
        return Err(invalid("tuning budget must be >= 1"));
    }
    let mut out: Vec<Schedule> = Vec::new();
    for s in &space.include {
        if !out.contains(s) {
            out.push(*s);
        }
    }
    out.truncate(space.budget);
    let rest: Vec<Schedule> = space.product().into_iter().filter(|s| !out.contains(s)).collect();
    if out.is_empty() && rest.is_empty() {
        return Err(invalid("tuning space is empty"));
    }
    let room = space.budget - out.len();
    if rest.len() <= room {
        out.extend(rest);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
        let mut pick = rand::seq::index::sample(&mut rng, rest.len(), room).into_vec();
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|i| rest[i]));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub schedule: Schedule,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub macs: u64,
    pub max_rel_err: f64,
    /// Set when the candidate was illegal, failed, or missed the spot-check.
    pub excluded: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub rows: Vec<TuneRow>,
    pub winner: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Row of the default schedule, when it was measured.
    pub default_row: Option<usize>,
    /// Rows within [`TIE_MARGIN`] of the winner's median (winner included).
    pub ties: Vec<usize>,
}

impl TuneReport {
    pub fn best(&self) -> &TuneRow {
        &self.rows[self.winner]
    }

    pub fn default_median(&self) -> Option<f64> {
        self.default_row.map(|r| self.rows[r].median)
    }

    /// Plain-text table, one line per candidate.
    pub fn render(&self) -> String {
        let mut s = format!("# warmup {} repeats {}\n", self.warmup, self.repeats);
        s.push_str("idx tile unroll traversal inner threads median_ms mean_ms macs rel_err status\n");
        for (i, r) in self.rows.iter().enumerate() {
            let mark = if i == self.winner {
                "winner"
            } else if self.ties.contains(&i) {
                "tie"
            } else if r.excluded.is_some() {
                "excluded"
            } else {
                "ok"
            };
            s.push_str(&format!(
                "{i} {:?} {} {:?} {:?} {} {:.4} {:.4} {} {:.2e} {mark}{}\n",
                r.schedule.tile,
                r.schedule.unroll,
                r.schedule.traversal,
                r.schedule.inner,
                r.schedule.threads,
                r.median * 1e3,
                r.mean * 1e3,
                r.macs,
                r.max_rel_err,
                r.excluded.as_deref().map(|e| format!(" ({e})")).unwrap_or_default(),
            ));
        }
        s
    }
}

/// Benchmarks every candidate (median of `repeats` after warm-up), checks
/// each output once against the dense oracle, returns the fastest survivor.
pub fn tune(store: &CompactWeightStore, spec: &ConvSpec, input_dims: FeatureDims, space: &TuneSpace, repeats: usize) -> Result<(Schedule, TuneReport)> {
    if repeats == 0 {
        return Err(invalid("repeats must be >= 1"));
    }
    let candidates = enumerate(space)?;
    let layer = PreparedLayer::<f32>::new(store)?;
    let out_dims = spec.output_dims(&input_dims, &store.dims)?;
    let input = random_input(input_dims, space.seed ^ 0x5eed)?;
    let (w, mask, _) = cws_decode(store)?;
    let oracle = conv3d_dense(&input.cast::<f64>(), &apply_mask(&w.cast::<f64>(), &mask)?, spec)?;
    let default = default_schedule(store, &out_dims, space.threads.first().copied().unwrap_or(1));
    let mut rows = Vec::with_capacity(candidates.len());
    for s in &candidates {
        let mut row = TuneRow {
            schedule: *s,
            median: f64::INFINITY,
            mean: f64::INFINITY,
            min: f64::INFINITY,
            macs: 0,
            max_rel_err: f64::NAN,
            excluded: None,
        };
        match layer.execute(&input, spec, s, ExecMode::Instrumented) {
            Err(e) => row.excluded = Some(e.to_string()),
            Ok((y, st)) => {
                row.macs = st.multiply_accumulates;
                row.max_rel_err = max_rel_diff(y.cast::<f64>().data(), oracle.data());
                if !(row.max_rel_err <= SPOT_CHECK_TOL) {
                    row.excluded = Some(format!("oracle mismatch {:.2e}", row.max_rel_err));
                } else {
                    let lat = time_repeats(DEFAULT_WARMUP, repeats, || layer.execute(&input, spec, s, ExecMode::Fast).map(|_| ()))?;
                    row.median = lat.median;
                    row.mean = lat.mean;
                    row.min = lat.min;
                }
            }
        }
        log::debug!("candidate {:?}: median {:.3e} s", s, row.median);
        rows.push(row);
    }
    let winner = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.excluded.is_none())
        .min_by(|a, b| a.1.median.total_cmp(&b.1.median))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Schedule("no candidate passed the oracle spot-check".into()))?;
    let best = rows[winner].median;
    let ties = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.excluded.is_none() && r.median <= best * (1.0 + TIE_MARGIN))
        .map(|(i, _)| i)
        .collect();
    let report = TuneReport {
        winner,
        warmup: DEFAULT_WARMUP,
        repeats,
        default_row: candidates.iter().position(|c| *c == default),
        ties,
        rows,
    };
    Ok((candidates[winner], report))
}

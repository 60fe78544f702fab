//! Structure discovery by metric maximisation over a grid of candidate flows.
//!
//! Events that no tracked structure claims are projected onto an `n x n`
//! array of candidate flows. Once the best candidate has stayed the same for
//! `p_stable` events, the events that project onto its high-contrast cells
//! are pulled out and re-projected on a finer array centred on the winner.
//! This repeats `depth_max` times. The result seeds a new track plane, and
//! the remaining events are projected again from scratch.
//!
//! Candidate flows are parameterised by the tilt of the projection axis away
//! from the time axis, per image axis: `v = v_ref * tan(theta)`. A finer level
//! tilts the parent's axis further, `v = v_ref * tan(atan(c / v_ref) + theta)`,
//! so the top level with `range = pi` spans all velocities.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;

use rustc_hash::FxHashSet;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::projection::{metric_binned, AccumulatorGrid, Cell, FlowVector, NEIGHBOURS_8};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPlaneConfig {
    /// Side of the candidate array.
    pub n: usize,
    /// Total tilt range of the top-level array, radians.
    pub range: f64,
    /// Events the argmax must survive before it is trusted.
    pub p_stable: usize,
    /// Range divisor per refinement level.
    pub q: f64,
    /// Number of refinement levels below the top array.
    pub depth_max: usize,
    /// Association threshold factor in `mu + w * sigma`.
    pub w: f64,
    /// Velocity at 45 degrees of tilt, px/s.
    pub v_ref: f64,
    /// Unclaimed events older than this are flushed, seconds.
    pub noise_lifespan: f64,
    /// Smallest associated set that may seed a track plane.
    pub min_assoc_events: usize,
    /// Relative lead a challenger needs to displace the current argmax.
    /// Mirror-symmetric structures produce near-tied pairs of cells that would
    /// otherwise trade places on every event.
    pub hysteresis: f64,
    /// Strongest top-level cells refined when the argmax settles; the
    /// refined flow that best sharpens all held events wins.
    pub seeds: usize,
}

impl Default for FlowPlaneConfig {
    fn default() -> Self {
        FlowPlaneConfig {
            n: 20,
            range: PI,
            p_stable: 500,
            q: 9.0,
            depth_max: 3,
            w: 2.0,
            v_ref: 100.0,
            noise_lifespan: 1.5,
            min_assoc_events: 50,
            seeds: 8,
            hysteresis: 0.02,
        }
    }
}

impl FlowPlaneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config { key: format!("flow_plane.{key}"), message: message.into() })
        };
        if self.n < 3 {
            return bad("n", "must be at least 3");
        }
        if !(self.range > 0.0 && self.range <= PI) {
            return bad("range", "must lie in (0, pi]");
        }
        if !(self.q > 1.0) {
            return bad("q", "must be greater than 1");
        }
        if !(self.w > 0.0) {
            return bad("w", "must be positive");
        }
        if !(self.v_ref > 0.0 && self.v_ref.is_finite()) {
            return bad("v_ref", "must be positive");
        }
        if !(self.noise_lifespan > 0.0) {
            return bad("noise_lifespan", "must be positive");
        }
        if !(self.hysteresis >= 0.0 && self.hysteresis.is_finite()) {
            return bad("hysteresis", "must be non-negative");
        }
        if self.seeds == 0 {
            return bad("seeds", "must be positive");
        }
        if self.p_stable == 0 {
            return bad("p_stable", "must be positive");
        }
        Ok(())
    }
}

/// Most events a refinement level projects.
const REFINE_SAMPLE: usize = 1500;

/// Share of the peak `|f|` a cell needs to seed [`extract_from_peak`].
pub const PEAK_FRACTION: f64 = 0.5;

/// Times a refinement window may slide after a maximum on its border.
const MAX_SLIDES: usize = 8;

/// Keeps composed tilts short of +/- pi/2 (infinite velocity).
const MAX_TILT: f64 = FRAC_PI_2 - 1e-4;

/// Tilts the axis of a flow component `center` by a further `theta`.
#[inline]
pub fn perturb(center: f64, theta: f64, v_ref: f64) -> f64 {
    if theta == 0.0 {
        return center;
    }
    let tilt = ((center / v_ref).atan() + theta).clamp(-MAX_TILT, MAX_TILT);
    v_ref * tilt.tan()
}

/// Cell-centred tilt of index `i` in an array of side `n` spanning `range`.
#[inline]
pub fn index_tilt(i: usize, n: usize, range: f64) -> f64 {
    range * ((i as f64 + 0.5) / n as f64 - 0.5)
}

/// Flow of cell `(i, j)`; `i` perturbs `v_u`, `j` perturbs `v_v`.
pub fn index_to_flow(i: usize, j: usize, n: usize, range: f64, center: FlowVector, v_ref: f64) -> FlowVector {
    FlowVector::new(
        perturb(center.v_u, index_tilt(i, n, range), v_ref),
        perturb(center.v_v, index_tilt(j, n, range), v_ref),
    )
}

/// An `n x n` array of accumulator grids, one per candidate flow.
#[derive(Debug, Clone)]
pub struct MetricArray {
    n: usize,
    range: f64,
    center: FlowVector,
    grids: Vec<AccumulatorGrid>,
}

impl MetricArray {
    pub fn new(n: usize, range: f64, center: FlowVector, v_ref: f64) -> Self {
        let mut grids = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                grids.push(AccumulatorGrid::new(index_to_flow(i, j, n, range, center, v_ref)));
            }
        }
        MetricArray { n, range, center, grids }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn center(&self) -> FlowVector {
        self.center
    }

    pub fn grid(&self, i: usize, j: usize) -> &AccumulatorGrid {
        &self.grids[j * self.n + i]
    }

    pub fn flow(&self, i: usize, j: usize) -> FlowVector {
        self.grid(i, j).flow()
    }

    pub fn metric(&self, i: usize, j: usize) -> i64 {
        self.grid(i, j).metric()
    }

    pub fn accumulate(&mut self, e: &Event) {
        for g in &mut self.grids {
            g.accumulate(e);
        }
    }

    pub fn retract(&mut self, e: &Event) -> Result<()> {
        for g in &mut self.grids {
            g.retract(e)?;
        }
        Ok(())
    }

    /// Index of the largest metric; ties go to the lowest `(j, i)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, g) in self.grids.iter().enumerate() {
            if g.metric() > self.grids[best].metric() {
                best = k;
            }
        }
        (best % self.n, best / self.n)
    }

    /// 8-neighbourhood maxima that rise at least `floor_fraction` of the way
    /// from the incoherent baseline to the global maximum. The baseline is the
    /// event count: the metric when no two events share a cell. Opposite
    /// polarities can cancel, so blurred projections sit at or below it.
    /// On plateaus the cell with the lowest `(j, i)` wins, as in
    /// [`argmax`](Self::argmax).
    pub fn local_maxima(&self, floor_fraction: f64) -> Vec<(usize, usize)> {
        let n = self.n as i64;
        let baseline = self.grids[0].event_count() as i64;
        let hi = self.grids.iter().map(|g| g.metric()).max().unwrap_or(0);
        if hi <= baseline {
            return Vec::new();
        }
        let floor = baseline as f64 + floor_fraction * (hi - baseline) as f64;
        let mut out = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let m = self.metric(i as usize, j as usize);
                if (m as f64) < floor {
                    continue;
                }
                let here = j * n + i;
                let is_max = NEIGHBOURS_8.iter().all(|&(di, dj)| {
                    let (a, b) = (i + di as i64, j + dj as i64);
                    if a < 0 || b < 0 || a >= n || b >= n {
                        return true;
                    }
                    let other = self.metric(a as usize, b as usize);
                    other < m || (other == m && b * n + a > here)
                });
                if is_max {
                    out.push((i as usize, j as usize));
                }
            }
        }
        out
    }

    /// Writes `i,j,v_u,v_v,m` rows.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "i,j,v_u,v_v,m")?;
        for j in 0..self.n {
            for i in 0..self.n {
                let g = self.grid(i, j);
                writeln!(sink, "{i},{j},{},{},{}", g.flow().v_u, g.flow().v_v, g.metric())?;
            }
        }
        Ok(())
    }
}

/// Events pulled out of a winning projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub events: Vec<Event>,
    /// Positions of `events` in the slice they were extracted from.
    pub indices: Vec<usize>,
    pub flow: FlowVector,
    /// Footprint cells in the winning grid's coordinates.
    pub footprint: Vec<Cell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationFailure {
    /// The grid has no cell with a non-zero sum.
    Blank,
    /// No cell rose above `mu + w * sigma`.
    NoSeeds,
}

/// Picks the events of the structure visible in `grid`.
///
/// Seeds are cells whose `|f|` exceeds `mu + w * sigma`, with statistics over
/// the cells whose sum is non-zero. The footprint is the 8-connected closure
/// of the seeds over non-zero cells. `events` must be exactly the events
/// accumulated in `grid`.
pub fn extract_associated(
    grid: &AccumulatorGrid,
    events: &[Event],
    w: f64,
) -> std::result::Result<AssociationResult, AssociationFailure> {
    let values: Vec<(Cell, f64)> = grid.nonzero_cells().map(|(c, f)| (c, f.unsigned_abs() as f64)).collect();
    if values.is_empty() {
        return Err(AssociationFailure::Blank);
    }
    let threshold = seed_threshold(values.iter().map(|v| v.1), w);
    let seeds: Vec<Cell> = values.iter().filter(|v| v.1 > threshold).map(|v| v.0).collect();
    if seeds.is_empty() {
        return Err(AssociationFailure::NoSeeds);
    }
    Ok(flood_from(grid, events, seeds))
}

/// Like [`extract_associated`], but seeded by the cells holding at least
/// [`PEAK_FRACTION`] of the largest `|f|`. A noiseless structure spread
/// evenly over its cells never clears `mu + w * sigma`; its sharpest cells
/// still mark it, while structures moving at other flows are smeared below
/// the cut.
pub fn extract_from_peak(
    grid: &AccumulatorGrid,
    events: &[Event],
) -> std::result::Result<AssociationResult, AssociationFailure> {
    let peak = grid.nonzero_cells().map(|(_, f)| f.unsigned_abs()).max().ok_or(AssociationFailure::Blank)?;
    let cut = PEAK_FRACTION * peak as f64;
    let seeds: Vec<Cell> = grid.nonzero_cells().filter(|(_, f)| f.unsigned_abs() as f64 >= cut).map(|(c, _)| c).collect();
    Ok(flood_from(grid, events, seeds))
}

/// 8-connected closure of `seeds` over the non-zero cells of `grid`, and
/// the events projecting into it.
fn flood_from(grid: &AccumulatorGrid, events: &[Event], mut seeds: Vec<Cell>) -> AssociationResult {
    seeds.sort_unstable();

    let mut footprint: FxHashSet<Cell> = FxHashSet::default();
    let mut stack = seeds;
    while let Some(c) = stack.pop() {
        if !footprint.insert(c) {
            continue;
        }
        for (dx, dy) in NEIGHBOURS_8 {
            let nb = (c.0 + dx, c.1 + dy);
            if !footprint.contains(&nb) && grid.value(nb) != 0 {
                stack.push(nb);
            }
        }
    }

    let mut assoc_events = Vec::new();
    let mut indices = Vec::new();
    for (k, e) in events.iter().enumerate() {
        if footprint.contains(&grid.cell_for(e)) {
            assoc_events.push(*e);
            indices.push(k);
        }
    }
    let mut footprint: Vec<Cell> = footprint.into_iter().collect();
    footprint.sort_unstable();
    AssociationResult { events: assoc_events, indices, flow: grid.flow(), footprint }
}

/// `mu + w * sigma` (population standard deviation).
pub fn seed_threshold(values: impl Iterator<Item = f64> + Clone, w: f64) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    mean + w * var.sqrt()
}

/// Projects `assoc.events` on a finer array centred on `assoc.flow`.
pub fn refine(assoc: &AssociationResult, range: f64, cfg: &FlowPlaneConfig) -> MetricArray {
    let mut child = MetricArray::new(cfg.n, range, assoc.flow, cfg.v_ref);
    for e in &assoc.events {
        child.accumulate(e);
    }
    child
}

/// A freshly discovered structure, handed to a new track plane.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSeed {
    /// Associated events in arrival order.
    pub events: Vec<Event>,
    pub flow: FlowVector,
    pub footprint: Vec<Cell>,
    /// Event count the top-level argmax needed before emission.
    pub events_to_stability: usize,
}

/// The initialisation stage.
#[derive(Debug, Clone)]
pub struct FlowPlane {
    cfg: FlowPlaneConfig,
    top: MetricArray,
    held: VecDeque<Event>,
    argmax: Option<(usize, usize)>,
    stable_run: usize,
    since_reset: usize,
}

impl FlowPlane {
    pub fn new(cfg: FlowPlaneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(FlowPlane {
            top: MetricArray::new(cfg.n, cfg.range, FlowVector::ZERO, cfg.v_ref),
            cfg,
            held: VecDeque::new(),
            argmax: None,
            stable_run: 0,
            since_reset: 0,
        })
    }

    pub fn config(&self) -> &FlowPlaneConfig {
        &self.cfg
    }

    pub fn metric_array(&self) -> &MetricArray {
        &self.top
    }

    /// Events currently projected, oldest first.
    pub fn held(&self) -> &VecDeque<Event> {
        &self.held
    }

    /// Current leader: the top-level argmax, held back by the hysteresis margin.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        self.argmax
    }

    /// Consecutive ingests the current argmax has survived.
    pub fn stable_run(&self) -> usize {
        self.stable_run
    }

    /// True once the argmax has held for `p_stable` consecutive events.
    pub fn stability_check(&self) -> bool {
        self.stable_run >= self.cfg.p_stable
    }

    /// Projects `e` onto every candidate and, if the argmax has settled,
    /// tries to extract a structure.
    pub fn ingest(&mut self, e: Event) -> Option<TrackSeed> {
        self.flush_noise(e.t);
        self.top.accumulate(&e);
        self.held.push_back(e);
        self.since_reset += 1;

        let best = self.leader();
        if self.argmax == Some(best) {
            self.stable_run += 1;
        } else {
            self.argmax = Some(best);
            self.stable_run = 1;
        }

        if self.stability_check() {
            return self.try_emit();
        }
        None
    }

    /// The argmax, unless the incumbent is within the hysteresis margin of it.
    fn leader(&self) -> (usize, usize) {
        let best = self.top.argmax();
        match self.argmax {
            Some((i, j))
                if self.top.metric(i, j) as f64 * (1.0 + self.cfg.hysteresis)
                    >= self.top.metric(best.0, best.1) as f64 =>
            {
                (i, j)
            }
            _ => best,
        }
    }

    /// Retracts every held event older than the noise lifespan. `now` is in
    /// microseconds. Returns the number removed.
    pub fn flush_noise(&mut self, now: u64) -> usize {
        let lifespan = (self.cfg.noise_lifespan * 1e6) as u64;
        let mut removed = 0;
        while let Some(front) = self.held.front() {
            if front.t + lifespan >= now {
                break;
            }
            let e = self.held.pop_front().expect("non-empty");
            self.top.retract(&e).expect("held events are accumulated in every grid");
            removed += 1;
        }
        if removed > 0 {
            let best = (!self.held.is_empty()).then(|| self.leader());
            if best != self.argmax {
                self.argmax = best;
                self.stable_run = 0;
            }
        }
        removed
    }

    /// Refines the settled argmax and the strongest other top-level cells,
    /// and keeps the refined flow with the highest metric over all held
    /// events.
    ///
    /// Each seed is refined over every held event (thinned by a stride that
    /// keeps the time span), not just its associated set: other structures
    /// only add a near-uniform blur to a narrow window, while the target
    /// sharpens at every level. Association happens on the seed's own
    /// top-level cell, whose blur keeps the structure's cells above the
    /// `mu + w * sigma` threshold.
    fn try_emit(&mut self) -> Option<TrackSeed> {
        let events: Vec<Event> = self.held.iter().copied().collect();
        let (i, j) = self.argmax?;
        let n = self.cfg.n;
        let mut seeds = vec![(i, j)];
        let mut ranked: Vec<(usize, usize)> = (0..n * n).map(|k| (k % n, k / n)).collect();
        ranked.sort_by_key(|&(a, b)| (std::cmp::Reverse(self.top.metric(a, b)), b, a));
        seeds.extend(ranked.into_iter().filter(|&c| c != (i, j)).take(self.cfg.seeds - 1));

        let mut scratch = Vec::with_capacity(events.len());
        let mut best: Option<(i64, AssociationResult)> = None;
        for (a, b) in seeds {
            let grid = self.top.grid(a, b);
            let r = match extract_associated(grid, &events, self.cfg.w) {
                Err(AssociationFailure::NoSeeds) => extract_from_peak(grid, &events),
                r => r,
            };
            let Ok(mut assoc) = r else { continue };
            if assoc.events.len() < self.cfg.min_assoc_events {
                continue;
            }
            let mut range = self.top.range();
            let mut flow = self.top.flow(a, b);
            for _ in 0..self.cfg.depth_max {
                range /= self.cfg.q;
                flow = self.refine_level(&events, flow, range, &mut scratch);
            }
            assoc.flow = flow;
            let score = metric_binned(&events, flow, events[0].t, 1.0, &mut scratch);
            if best.as_ref().map_or(true, |(m, _)| score > *m) {
                best = Some((score, assoc));
            }
        }
        let Some((_, assoc)) = best else {
            self.stable_run = 0;
            return None;
        };
        let taken: FxHashSet<usize> = assoc.indices.iter().copied().collect();
        let remaining: Vec<Event> = events
            .iter()
            .enumerate()
            .filter(|(k, _)| !taken.contains(k))
            .map(|(_, e)| *e)
            .collect();
        let events_to_stability = self.since_reset;
        self.reset_with(remaining);
        Some(TrackSeed { events: assoc.events, flow: assoc.flow, footprint: assoc.footprint, events_to_stability })
    }

    /// Best flow of an `n x n` window spanning `range` around `center`.
    ///
    /// The held events are thinned to [`REFINE_SAMPLE`] by a stride that
    /// keeps their time span `T`, and scored on bins as wide as the smear a
    /// cell step causes over `T`. The cell nearest the true flow then
    /// collapses its structure as well as any other cell does, so a coarse
    /// window cannot favour a flow just because it happens to lie on a sample
    /// point. A winner on the border slides the window onto itself, up to
    /// [`MAX_SLIDES`] times.
    fn refine_level(
        &self,
        events: &[Event],
        mut center: FlowVector,
        range: f64,
        scratch: &mut Vec<(u64, i64)>,
    ) -> FlowVector {
        let n = self.cfg.n;
        let (Some(first), Some(last)) = (events.first(), events.last()) else { return center };
        let stride = events.len().div_ceil(REFINE_SAMPLE).max(1);
        let sample: Vec<Event> = events.iter().step_by(stride).copied().collect();
        let span = (last.t - first.t) as f64 * 1e-6;
        for _ in 0..=MAX_SLIDES {
            let bin = (self.cell_step(center, range) * span).max(1.0);
            let (mut best, mut flow, mut at) = (i64::MIN, center, (0, 0));
            for cj in 0..n {
                for ci in 0..n {
                    let f = index_to_flow(ci, cj, n, range, center, self.cfg.v_ref);
                    let m = metric_binned(&sample, f, first.t, bin, scratch);
                    if m > best {
                        (best, flow, at) = (m, f, (ci, cj));
                    }
                }
            }
            center = flow;
            if at.0 != 0 && at.1 != 0 && at.0 != n - 1 && at.1 != n - 1 {
                break;
            }
        }
        center
    }

    /// Largest velocity step, px/s, between neighbouring cells of a window
    /// spanning `range` around `center`.
    fn cell_step(&self, center: FlowVector, range: f64) -> f64 {
        let dtheta = range / self.cfg.n as f64;
        let v_ref = self.cfg.v_ref;
        let slope = |c: f64| v_ref * (1.0 + (c / v_ref).powi(2));
        slope(center.v_u).max(slope(center.v_v)) * dtheta
    }

    /// Clears the array and re-projects `events`.
    pub fn reset_with(&mut self, events: Vec<Event>) {
        self.top = MetricArray::new(self.cfg.n, self.cfg.range, FlowVector::ZERO, self.cfg.v_ref);
        for e in &events {
            self.top.accumulate(e);
        }
        self.held = events.into();
        self.argmax = (!self.held.is_empty()).then(|| self.top.argmax());
        self.stable_run = 0;
        self.since_reset = self.held.len();
    }
}

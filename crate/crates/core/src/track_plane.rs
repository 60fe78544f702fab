//! Tracking a discovered structure.
//!
//! A track plane keeps an `m x m` array of projections around its current
//! flow estimate. Events whose center projection lands on one of the
//! structure's accumulator cells are associated with it; the array drifts
//! toward whichever perturbed projection collects the most hits.

use std::collections::VecDeque;
use std::io::Write;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::event::Event;
use crate::flow_plane::perturb;
use crate::projection::{metric_binned, AccumulatorGrid, Cell, FlowVector, NEIGHBOURS_8};

/// Bound on the refinement history, whatever the speed.
const HISTORY_CAP: usize = 20_000;

/// Associated events between refinement steps, at least.
const MIN_REFINE_EVENTS: usize = 16;

/// Displacement, in pixels over the history, a step must cause to be
/// resolvable.
const HALF_PIXEL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPlaneConfig {
    /// Side of the projection array. Odd, at least 3.
    pub m_grid: usize,
    /// Initial perturbation angle in radians.
    pub h0: f64,
    /// A projection wins once its hits exceed this fraction of `|A|`.
    pub hit_fraction: f64,
    /// Misses on a cell before it joins `A`.
    pub evolve_threshold: u32,
    /// Pixels the structure may travel before an event expires.
    pub lifetime_px: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Speed floor for the lifetime, px/s.
    pub v_floor: f64,
    /// Scale of the tan parameterisation, px/s.
    pub v_ref: f64,
    /// Expected events per accumulator cell per pixel travelled.
    pub rate_scale: f64,
    /// Pixels of travel kept for flow refinement; 0 disables it.
    pub history_px: f64,
    /// Relative metric gain a refinement move must show over the center.
    pub refine_margin: f64,
}

impl Default for TrackPlaneConfig {
    fn default() -> Self {
        TrackPlaneConfig {
            m_grid: 3,
            h0: 0.02f64.to_radians(),
            hit_fraction: 0.10,
            evolve_threshold: 3,
            lifetime_px: 3.0,
            h_min: 0.001f64.to_radians(),
            h_max: 5f64.to_radians(),
            v_floor: 1.0,
            v_ref: 100.0,
            rate_scale: 1.0,
            history_px: 10.0,
            refine_margin: 0.02,
        }
    }
}

impl TrackPlaneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: format!("track_plane.{key}"), message: message.into() });
        if self.m_grid < 3 || self.m_grid % 2 == 0 {
            return bad("m_grid", "must be odd and at least 3");
        }
        if !(self.hit_fraction > 0.0 && self.hit_fraction < 1.0) {
            return bad("hit_fraction", "must lie in (0, 1)");
        }
        if self.evolve_threshold == 0 {
            return bad("evolve_threshold", "must be positive");
        }
        if !(self.lifetime_px >= 1.0) {
            return bad("lifetime_px", "must be at least 1");
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_max && self.h_max < std::f64::consts::FRAC_PI_2) {
            return bad("h_min", "need 0 < h_min <= h_max < pi/2");
        }
        if !(self.h0 >= self.h_min && self.h0 <= self.h_max) {
            return bad("h0", "must lie within [h_min, h_max]");
        }
        if !(self.v_floor > 0.0) {
            return bad("v_floor", "must be positive");
        }
        if !(self.v_ref > 0.0) {
            return bad("v_ref", "must be positive");
        }
        if !(self.rate_scale > 0.0) {
            return bad("rate_scale", "must be positive");
        }
        if !(self.history_px >= 0.0 && self.history_px.is_finite()) {
            return bad("history_px", "must be finite and non-negative");
        }
        if !(self.refine_margin >= 0.0 && self.refine_margin.is_finite()) {
            return bad("refine_margin", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// Result of offering an event to a plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Hit,
    /// The center projection's cell for the rejected event.
    Miss(Cell),
}

impl MatchOutcome {
    pub fn is_hit(&self) -> bool {
        matches!(self, MatchOutcome::Hit)
    }
}

/// Accumulator cells placed in frame coordinates at some instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    /// Sorted by `(y, x)`.
    pub cells: Vec<Cell>,
    pub flow: FlowVector,
}

impl Footprint {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrackPlane {
    id: u32,
    cfg: TrackPlaneConfig,
    center: FlowVector,
    h: f64,
    t_ref: u64,
    /// Row-major, `j * m + i`; `i` perturbs `v_u`.
    grids: Vec<AccumulatorGrid>,
    /// Cells admitted through misses, with admission time.
    promoted: FxHashMap<Cell, u64>,
    /// Miss count and time of the latest miss.
    miss_counts: FxHashMap<Cell, (u32, u64)>,
    events: VecDeque<Event>,
    hits: Vec<usize>,
    hit_times: VecDeque<u64>,
    /// Associated events over `history_px` of travel.
    history: VecDeque<Event>,
    /// Pattern-search step for refinement, px/s.
    step: f64,
    since_refine: usize,
    refinements: usize,
    scratch: Vec<(u64, i64)>,
    birth: u64,
    last_activity: u64,
    recenters: usize,
}

impl TrackPlane {
    /// Starts tracking `events` (time ordered) at `flow`.
    pub fn new(id: u32, flow: FlowVector, events: Vec<Event>, cfg: TrackPlaneConfig) -> Result<Self> {
        cfg.validate()?;
        if !flow.is_finite() {
            return Err(Error::Consistency(format!("non-finite seed flow {flow}")));
        }
        let Some(last) = events.last() else {
            return Err(Error::Empty("track plane seed"));
        };
        crate::event::check_order(&events)?;
        let now = last.t;
        let birth = events[0].t;
        let m = cfg.m_grid;
        let mut plane = TrackPlane {
            id,
            center: flow,
            h: cfg.h0,
            t_ref: now,
            grids: Vec::new(),
            promoted: FxHashMap::default(),
            miss_counts: FxHashMap::default(),
            hit_times: events.iter().map(|e| e.t).collect(),
            history: events.iter().copied().collect(),
            step: 0.0,
            since_refine: 0,
            refinements: 0,
            scratch: Vec::new(),
            events: events.into(),
            hits: vec![0; m * m],
            birth,
            last_activity: now,
            recenters: 0,
            cfg,
        };
        plane.step = 0.02 * plane.speed();
        plane.rebuild_all();
        Ok(plane)
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn config(&self) -> &TrackPlaneConfig {
        &self.cfg
    }

    pub fn center_flow(&self) -> FlowVector {
        self.center
    }

    /// Current perturbation in radians.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn t_ref(&self) -> u64 {
        self.t_ref
    }

    pub fn birth(&self) -> u64 {
        self.birth
    }

    pub fn last_activity(&self) -> u64 {
        self.last_activity
    }

    pub fn recenters(&self) -> usize {
        self.recenters
    }

    /// Refinement steps taken so far, whether or not they moved the flow.
    pub fn refinements(&self) -> usize {
        self.refinements
    }

    /// Events kept for refinement, oldest first.
    pub fn history(&self) -> &VecDeque<Event> {
        &self.history
    }

    fn speed(&self) -> f64 {
        self.center.magnitude().max(self.cfg.v_floor)
    }

    /// Associated events, oldest first.
    pub fn events(&self) -> &VecDeque<Event> {
        &self.events
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn hits(&self) -> &[usize] {
        &self.hits
    }

    pub fn grid(&self, i: usize, j: usize) -> &AccumulatorGrid {
        &self.grids[j * self.cfg.m_grid + i]
    }

    fn center_index(&self) -> usize {
        let k = self.cfg.m_grid / 2;
        k * self.cfg.m_grid + k
    }

    pub fn center_grid(&self) -> &AccumulatorGrid {
        &self.grids[self.center_index()]
    }

    /// Flow of projection `(i, j)` under the current center and `h`.
    pub fn projection_flow(&self, i: usize, j: usize) -> FlowVector {
        let k = (self.cfg.m_grid / 2) as f64;
        FlowVector::new(
            perturb(self.center.v_u, (i as f64 - k) * self.h, self.cfg.v_ref),
            perturb(self.center.v_v, (j as f64 - k) * self.h, self.cfg.v_ref),
        )
    }

    /// Event lifetime in microseconds.
    pub fn lifetime_us(&self) -> u64 {
        (self.lifetime_secs() * 1e6).round() as u64
    }

    pub fn lifetime_secs(&self) -> f64 {
        self.cfg.lifetime_px / self.center.magnitude().max(self.cfg.v_floor)
    }

    /// Whether `cell` (center projection coordinates) belongs to `A`.
    pub fn contains(&self, cell: Cell) -> bool {
        self.center_grid().value(cell) != 0 || self.promoted.contains_key(&cell)
    }

    /// `|A|`.
    pub fn a_len(&self) -> usize {
        let center = self.center_grid();
        center.nonzero_len() + self.promoted.keys().filter(|c| center.value(**c) == 0).count()
    }

    /// `A` sorted by `(y, x)`.
    pub fn a_cells(&self) -> Vec<Cell> {
        let center = self.center_grid();
        let mut cells: Vec<Cell> = center
            .nonzero_cells()
            .map(|(c, _)| c)
            .chain(self.promoted.keys().copied().filter(|c| center.value(*c) == 0))
            .collect();
        cells.sort_unstable_by_key(|&(x, y)| (y, x));
        cells
    }

    pub fn miss_count(&self, cell: Cell) -> u32 {
        self.miss_counts.get(&cell).map_or(0, |m| m.0)
    }

    pub fn promoted_len(&self) -> usize {
        self.promoted.len()
    }

    /// Offers `e` to the plane.
    ///
    /// Every projection scores a hit when `e` lands on one of its non-zero
    /// cells, whether or not the center accepts it. The event is associated
    /// when its center cell is in `A`, or when it is the miss that promotes a
    /// cell bordering `A`.
    pub fn try_match(&mut self, e: &Event) -> MatchOutcome {
        let ci = self.center_index();
        for (k, g) in self.grids.iter().enumerate() {
            if k != ci && g.value(g.cell_for(e)) != 0 {
                self.hits[k] += 1;
            }
        }
        let cell = self.grids[ci].cell_for(e);
        if self.contains(cell) {
            self.hits[ci] += 1;
            self.associate(e);
            return MatchOutcome::Hit;
        }
        if !NEIGHBOURS_8.iter().any(|(dx, dy)| self.contains((cell.0 + dx, cell.1 + dy))) {
            return MatchOutcome::Miss(cell);
        }
        let lifetime = self.lifetime_us();
        let entry = self.miss_counts.entry(cell).or_insert((0, e.t));
        if entry.1 + lifetime < e.t {
            entry.0 = 0;
        }
        entry.0 += 1;
        entry.1 = e.t;
        if entry.0 >= self.cfg.evolve_threshold {
            self.miss_counts.remove(&cell);
            self.promoted.insert(cell, e.t);
            self.associate(e);
            return MatchOutcome::Hit;
        }
        MatchOutcome::Miss(cell)
    }

    fn associate(&mut self, e: &Event) {
        for g in &mut self.grids {
            g.accumulate(e);
        }
        self.events.push_back(*e);
        self.hit_times.push_back(e.t);
        self.last_activity = e.t;
        if self.cfg.history_px > 0.0 {
            self.history.push_back(*e);
            if self.history.len() > HISTORY_CAP {
                self.history.pop_front();
            }
            self.since_refine += 1;
            if self.since_refine >= self.a_len().max(MIN_REFINE_EVENTS) {
                self.since_refine = 0;
                self.refine();
            }
        }
    }

    /// One pattern-search step on the history: the 3 x 3 flows at `step`
    /// around the center are scored by the crisp metric, and a neighbour
    /// must beat the center by `refine_margin` to win. A move doubles the step and regenerates the grids; otherwise the
    /// step halves, down to the smallest change the history can resolve.
    pub fn refine(&mut self) -> bool {
        self.refinements += 1;
        let (Some(first), Some(last)) = (self.history.front(), self.history.back()) else { return false };
        let (t0, t1) = (first.t, last.t);
        let span = (t1 - t0) as f64 * 1e-6;
        if span <= 0.0 {
            return false;
        }
        let speed = self.speed();
        let center = self.center;
        let (lo, hi) = ((HALF_PIXEL / span).min(speed), (0.5 * speed).max(HALF_PIXEL / span));
        let step = self.step.clamp(lo, hi);
        let mut scratch = std::mem::take(&mut self.scratch);
        let history = &*self.history.make_contiguous();
        let bar = metric_binned(history, center, t1, 1.0, &mut scratch) as f64 * (1.0 + self.cfg.refine_margin);
        let mut best = (bar, center);
        for dj in [-1.0, 0.0, 1.0] {
            for di in [-1.0, 0.0, 1.0] {
                if di == 0.0 && dj == 0.0 {
                    continue;
                }
                let f = FlowVector::new(center.v_u + di * step, center.v_v + dj * step);
                let m = metric_binned(history, f, t1, 1.0, &mut scratch) as f64;
                if m > best.0 {
                    best = (m, f);
                }
            }
        }
        self.scratch = scratch;
        let moved = best.1 != self.center;
        self.step = if moved { 2.0 * step } else { 0.5 * step }.clamp(lo, hi);
        if moved {
            self.center = best.1;
            self.rebuild_all();
            self.hits.iter_mut().for_each(|h| *h = 0);
        }
        moved
    }

    /// Projection whose hits exceed `hit_fraction * |A|`, preferring the
    /// center and then the lowest index on ties.
    pub fn winner(&self) -> Option<usize> {
        let threshold = self.cfg.hit_fraction * self.a_len() as f64;
        let ci = self.center_index();
        let mut best = ci;
        for (k, &h) in self.hits.iter().enumerate() {
            if h > self.hits[best] {
                best = k;
            }
        }
        (self.hits[best] as f64 > threshold).then_some(best)
    }

    /// Moves the array onto the winning projection, if any. Returns whether
    /// a recenter happened.
    pub fn maybe_recenter(&mut self) -> bool {
        let Some(k) = self.winner() else { return false };
        let m = self.cfg.m_grid;
        let center_won = k == self.center_index();
        if !center_won {
            self.center = self.projection_flow(k % m, k / m);
        }
        self.adapt_perturbation(center_won);
        self.rebuild_all();
        self.hits.iter_mut().for_each(|h| *h = 0);
        self.recenters += 1;
        true
    }

    /// Halves `h` when the center won, doubles it otherwise, then clamps.
    pub fn adapt_perturbation(&mut self, winner_was_center: bool) -> f64 {
        let h = if winner_was_center { self.h / 2.0 } else { self.h * 2.0 };
        self.h = h.clamp(self.cfg.h_min, self.cfg.h_max);
        self.h
    }

    /// Re-projects all events around the current center, moving the
    /// reference time to the newest event. Promoted cells and misses are
    /// tied to the old projection and are dropped.
    fn rebuild_all(&mut self) {
        if let Some(last) = self.events.back() {
            self.t_ref = last.t;
        }
        self.promoted.clear();
        self.miss_counts.clear();
        let m = self.cfg.m_grid;
        self.grids = (0..m * m)
            .map(|k| {
                let mut g = AccumulatorGrid::with_t_ref(self.projection_flow(k % m, k / m), self.t_ref);
                for e in &self.events {
                    g.accumulate(e);
                }
                g
            })
            .collect();
    }

    /// Retracts every event older than the lifetime at `now` (microseconds)
    /// and drops promoted cells of the same age. Returns the events removed.
    pub fn expire_events(&mut self, now: u64) -> usize {
        let lifetime = self.lifetime_us();
        let mut removed = 0;
        while let Some(front) = self.events.front() {
            if front.t + lifetime >= now {
                break;
            }
            let e = self.events.pop_front().expect("non-empty");
            for g in &mut self.grids {
                g.retract(&e).expect("associated events are accumulated in every grid");
            }
            removed += 1;
        }
        self.promoted.retain(|_, t| *t + lifetime >= now);
        if self.miss_counts.len() > 64 + 4 * self.center_grid().nonzero_len() {
            self.miss_counts.retain(|_, (_, t)| *t + lifetime >= now);
        }
        let keep = 4 * lifetime;
        while self.hit_times.front().is_some_and(|t| t + keep < now) {
            self.hit_times.pop_front();
        }
        let span = (self.cfg.history_px / self.speed() * 1e6).round() as u64;
        while self.history.front().is_some_and(|e| e.t + span < now) {
            self.history.pop_front();
        }
        removed
    }

    /// Associated events within `window_secs` before `now`, relative to what
    /// `|A|` cells moving at the center flow should produce.
    pub fn expected_hit_fraction(&self, window_secs: f64, now: u64) -> f64 {
        let expected = self.cfg.rate_scale * self.a_len() as f64 * self.center.magnitude() * window_secs;
        if !(expected > 0.0) {
            return 0.0;
        }
        let since = now.saturating_sub((window_secs * 1e6).round() as u64);
        let observed = self.hit_times.iter().rev().take_while(|&&t| t >= since).count();
        observed as f64 / expected
    }

    /// `A` moved to where the structure sits at `now`.
    pub fn footprint(&self, now: u64) -> Footprint {
        let dt = (now as f64 - self.t_ref as f64) * 1e-6;
        let du = (self.center.v_u * dt).round() as i32;
        let dv = (self.center.v_v * dt).round() as i32;
        let mut cells: Vec<Cell> = self.a_cells().into_iter().map(|(x, y)| (x + du, y + dv)).collect();
        cells.sort_unstable_by_key(|&(x, y)| (y, x));
        Footprint { cells, flow: self.center }
    }

    /// Takes over `other`'s events. The flow becomes the event-count weighted
    /// mean and every grid is rebuilt; `self` keeps its id.
    pub fn absorb(&mut self, other: TrackPlane) {
        let (a, b) = (self.events.len() as f64, other.events.len() as f64);
        if a + b > 0.0 {
            self.center = FlowVector::new(
                (a * self.center.v_u + b * other.center.v_u) / (a + b),
                (a * self.center.v_v + b * other.center.v_v) / (a + b),
            );
        }
        self.events = merge_sorted(std::mem::take(&mut self.events), other.events, |e| e.t);
        self.hit_times = merge_sorted(std::mem::take(&mut self.hit_times), other.hit_times, |t| *t);
        self.history = merge_sorted(std::mem::take(&mut self.history), other.history, |e| e.t);
        self.birth = self.birth.min(other.birth);
        self.last_activity = self.last_activity.max(other.last_activity);
        self.hits.iter_mut().for_each(|h| *h = 0);
        self.rebuild_all();
    }

    /// CSV row `id,t,v_u,v_v,h,a,events`; `h` in degrees.
    pub fn write_snapshot_row<W: Write>(&self, now: u64, mut sink: W) -> Result<()> {
        writeln!(
            sink,
            "{},{},{},{},{},{},{}",
            self.id,
            now,
            self.center.v_u,
            self.center.v_v,
            self.h.to_degrees(),
            self.a_len(),
            self.events.len()
        )?;
        Ok(())
    }
}

pub const SNAPSHOT_HEADER: &str = "id,t,v_u,v_v,h,a,events";

fn merge_sorted<T, K: Ord>(a: VecDeque<T>, b: VecDeque<T>, key: impl Fn(&T) -> K) -> VecDeque<T> {
    let mut out = VecDeque::with_capacity(a.len() + b.len());
    let (mut a, mut b) = (a.into_iter().peekable(), b.into_iter().peekable());
    loop {
        let take_a = match (a.peek(), b.peek()) {
            (Some(x), Some(y)) => key(x) <= key(y),
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        out.push_back(if take_a { a.next() } else { b.next() }.expect("peeked"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{Polarity, SensorGeometry};
    use crate::projection::metric_bruteforce;
    use crate::synth::{generate_events, MotionModel, Shape, ShapeContour};
    use proptest::prelude::*;

    const G: SensorGeometry = SensorGeometry::DAVIS240;

    fn ev(u: u16, v: u16, t: u64, s: i64) -> Event {
        Event::new(u, v, t, Polarity::from_sign(s).unwrap())
    }

    fn hexagon_events(flow: FlowVector, secs: f64) -> Vec<Event> {
        let contour = ShapeContour::build(Shape::Hexagon { width: 65.0 }, G).unwrap();
        generate_events(&contour, (60.0, 90.0), MotionModel::Constant(flow), secs, G)
            .unwrap()
            .0
            .events
    }

    fn assert_consistent(p: &TrackPlane) {
        let m = p.config().m_grid;
        for j in 0..m {
            for i in 0..m {
                let g = p.grid(i, j);
                assert_eq!(g.metric(), metric_bruteforce(p.events(), g.flow(), Some(p.t_ref())));
            }
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrackPlaneConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.h0 - 0.02 * std::f64::consts::PI / 180.0).abs() < 1e-15);
        for bad in [
            TrackPlaneConfig { m_grid: 4, ..cfg.clone() },
            TrackPlaneConfig { m_grid: 1, ..cfg.clone() },
            TrackPlaneConfig { hit_fraction: 1.0, ..cfg.clone() },
            TrackPlaneConfig { lifetime_px: 0.5, ..cfg.clone() },
            TrackPlaneConfig { h0: 10f64.to_radians(), ..cfg.clone() },
            TrackPlaneConfig { history_px: -1.0, ..cfg.clone() },
            TrackPlaneConfig { refine_margin: f64::NAN, ..cfg.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
        assert!(matches!(
            TrackPlane::new(0, FlowVector::ZERO, vec![], cfg),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn lifetime_three_pixels() {
        let p = TrackPlane::new(0, FlowVector::new(58.0, 0.0), vec![ev(1, 1, 0, 1)], Default::default()).unwrap();
        let expected = 3.0 / 58.0;
        assert!((p.lifetime_secs() - expected).abs() < 1e-12);
        assert!((p.lifetime_secs() - 0.0517).abs() < 1e-4);
        let still = TrackPlane::new(0, FlowVector::new(0.2, 0.0), vec![ev(1, 1, 0, 1)], Default::default()).unwrap();
        assert_eq!(still.lifetime_secs(), 3.0);
    }

    #[test]
    fn perturbation_halves_and_doubles() {
        let cfg = TrackPlaneConfig::default();
        let mut p = TrackPlane::new(0, FlowVector::new(58.0, 0.0), vec![ev(1, 1, 0, 1)], cfg.clone()).unwrap();
        p.adapt_perturbation(true);
        p.adapt_perturbation(true);
        assert!((p.h() - cfg.h0 / 4.0).abs() < 1e-18);
        p.adapt_perturbation(false);
        p.adapt_perturbation(true);
        assert!((p.h() - cfg.h0 / 4.0).abs() < 1e-18);
        for _ in 0..40 {
            p.adapt_perturbation(true);
        }
        assert_eq!(p.h(), cfg.h_min);
        for _ in 0..40 {
            p.adapt_perturbation(false);
        }
        assert_eq!(p.h(), cfg.h_max);
    }

    #[test]
    fn projection_array_layout() {
        let p = TrackPlane::new(0, FlowVector::new(58.0, -10.0), vec![ev(1, 1, 0, 1)], Default::default()).unwrap();
        assert_eq!(p.projection_flow(1, 1), FlowVector::new(58.0, -10.0));
        let right = p.projection_flow(2, 1);
        let oracle = 100.0 * ((58.0f64 / 100.0).atan() + p.h()).tan();
        assert!((right.v_u - oracle).abs() < 1e-9);
        assert_eq!(right.v_v, -10.0);
        assert!(p.projection_flow(1, 0).v_v < -10.0);
    }

    #[test]
    fn hit_and_miss_on_single_cell() {
        let mut p = TrackPlane::new(3, FlowVector::ZERO, vec![ev(10, 10, 0, 1)], Default::default()).unwrap();
        assert_eq!(p.a_cells(), vec![(10, 10)]);
        assert!(p.try_match(&ev(10, 10, 5, 1)).is_hit());
        assert_eq!(p.try_match(&ev(50, 50, 6, 1)), MatchOutcome::Miss((50, 50)));
        assert_eq!(p.miss_count((50, 50)), 0, "far misses are not counted");
        assert_eq!(p.event_count(), 2);
    }

    #[test]
    fn misses_promote_adjacent_cell() {
        let mut p = TrackPlane::new(0, FlowVector::ZERO, vec![ev(10, 10, 0, 1)], Default::default()).unwrap();
        assert_eq!(p.try_match(&ev(11, 10, 1, 1)), MatchOutcome::Miss((11, 10)));
        assert_eq!(p.try_match(&ev(11, 10, 2, -1)), MatchOutcome::Miss((11, 10)));
        assert_eq!(p.miss_count((11, 10)), 2);
        assert!(p.try_match(&ev(11, 10, 3, 1)).is_hit());
        assert!(p.contains((11, 10)));
        assert_eq!(p.miss_count((11, 10)), 0);
        assert_eq!(p.a_len(), 2);
        // The new cell lets the contour keep growing.
        p.try_match(&ev(12, 10, 4, 1));
        assert_eq!(p.miss_count((12, 10)), 1);
    }

    #[test]
    fn cancelled_cell_leaves_a() {
        let mut p = TrackPlane::new(0, FlowVector::ZERO, vec![ev(4, 4, 0, 1)], Default::default()).unwrap();
        assert!(p.try_match(&ev(4, 4, 1, -1)).is_hit());
        assert_eq!(p.a_len(), 0);
        assert!(p.footprint(1).is_empty());
    }

    #[test]
    fn off_center_projection_wins_at_threshold() {
        // 100 cells in A; 11 hits on one projection beats 10% of |A|.
        let mut p = TrackPlane::new(0, FlowVector::new(58.0, 0.0), vec![ev(1, 1, 0, 1)], Default::default()).unwrap();
        let a = p.a_len();
        assert_eq!(a, 1);
        p.hits = vec![0; 9];
        p.hits[5] = 1;
        assert_eq!(p.winner(), Some(5));
        p.hits[4] = 1;
        assert_eq!(p.winner(), Some(4), "center wins ties");

        let events: Vec<Event> = (0..100).map(|k| ev(k, 0, 0, 1)).collect();
        let mut p = TrackPlane::new(0, FlowVector::ZERO, events, Default::default()).unwrap();
        assert_eq!(p.a_len(), 100);
        p.hits[2] = 10;
        assert_eq!(p.winner(), None);
        p.hits[2] = 11;
        assert_eq!(p.winner(), Some(2));
        let h0 = p.h();
        let target = p.projection_flow(2, 0);
        assert!(p.maybe_recenter());
        assert_eq!(p.center_flow(), target);
        assert_eq!(p.h(), 2.0 * h0);
        assert!(p.hits().iter().all(|&h| h == 0));
        assert_consistent(&p);
    }

    #[test]
    fn center_win_moves_reference_time() {
        let events: Vec<Event> = (0..100).map(|k| ev(k, 0, k as u64 * 10, 1)).collect();
        let mut p = TrackPlane::new(0, FlowVector::ZERO, events, TrackPlaneConfig { history_px: 0.0, ..Default::default() }).unwrap();
        p.associate(&ev(7, 3, 5_000, 1));
        p.hits[4] = 11;
        assert!(p.maybe_recenter());
        assert_eq!(p.t_ref(), 5_000);
        assert_eq!(p.center_flow(), FlowVector::ZERO);
        assert_consistent(&p);
    }

    #[test]
    fn refinement_recovers_a_poor_seed() {
        let flow = FlowVector::new(58.0, 0.0);
        let events = hexagon_events(flow, 0.6);
        let (seed, rest) = events.split_at(events.len() / 6);
        let mut p = TrackPlane::new(0, FlowVector::new(52.0, 4.0), seed.to_vec(), Default::default()).unwrap();
        for e in rest {
            p.expire_events(e.t);
            p.try_match(e);
            p.maybe_recenter();
        }
        assert!(p.refinements() > 0);
        let err = p.center_flow().distance(&flow);
        assert!(err < 0.05 * 58.0, "flow {} err {err}", p.center_flow());
        // The history covers `history_px` of travel and no more.
        let span = (p.history().back().unwrap().t - p.history().front().unwrap().t) as f64 * 1e-6;
        let limit = p.config().history_px / p.center_flow().magnitude();
        assert!(span <= limit + 1e-3 && span > 0.5 * limit, "span {span} limit {limit}");
        assert_consistent(&p);
    }

    #[test]
    fn refinement_can_be_disabled() {
        let flow = FlowVector::new(58.0, 0.0);
        let events = hexagon_events(flow, 0.3);
        let (seed, rest) = events.split_at(events.len() / 3);
        let start = FlowVector::new(55.0, 0.0);
        let cfg = TrackPlaneConfig { history_px: 0.0, ..Default::default() };
        let mut p = TrackPlane::new(0, start, seed.to_vec(), cfg).unwrap();
        for e in rest {
            p.expire_events(e.t);
            p.try_match(e);
            p.maybe_recenter();
        }
        assert_eq!(p.refinements(), 0);
        assert!(p.center_flow().distance(&start) < 1.0);
    }

    #[test]
    fn expiry_matches_bruteforce() {
        let flow = FlowVector::new(58.0, 0.0);
        let events = hexagon_events(flow, 0.3);
        let (seed, rest) = events.split_at(events.len() / 3);
        let mut p = TrackPlane::new(0, flow, seed.to_vec(), Default::default()).unwrap();
        let mut removed = 0;
        for e in rest {
            removed += p.expire_events(e.t);
            p.try_match(e);
            p.maybe_recenter();
        }
        assert!(removed > 0);
        let now = rest.last().unwrap().t;
        let lifetime = p.lifetime_us();
        assert!(p.events().iter().all(|e| e.t + lifetime >= now - 2_000));
        assert_consistent(&p);
    }

    #[test]
    fn tracks_hexagon_and_matches_its_events() {
        let flow = FlowVector::new(58.0, 0.0);
        let events = hexagon_events(flow, 0.5);
        let (seed, rest) = events.split_at(events.len() / 5);
        let start = FlowVector::new(56.0, 1.0);
        let mut p = TrackPlane::new(0, start, seed.to_vec(), Default::default()).unwrap();
        let mut hits = 0;
        for e in rest {
            p.expire_events(e.t);
            if p.try_match(e).is_hit() {
                hits += 1;
            }
            p.maybe_recenter();
        }
        let rate = hits as f64 / rest.len() as f64;
        assert!(rate > 0.9, "match rate {rate}");
        let err = p.center_flow().distance(&flow);
        assert!(err < 0.05 * 58.0, "flow {} err {err}", p.center_flow());
        assert!(p.recenters() > 0);
        assert_consistent(&p);
    }

    #[test]
    fn other_structure_rarely_matches() {
        let flow = FlowVector::new(58.0, 0.0);
        let own = hexagon_events(flow, 0.3);
        let contour = ShapeContour::build(Shape::Circle { radius: 20.0 }, G).unwrap();
        let other = generate_events(&contour, (180.0, 60.0), MotionModel::Constant(FlowVector::new(-58.0, 0.0)), 0.3, G)
            .unwrap()
            .0
            .events;
        let (seed, rest) = own.split_at(own.len() / 3);
        let mut p = TrackPlane::new(0, flow, seed.to_vec(), Default::default()).unwrap();
        let t0 = rest[0].t;
        let mut cross = 0;
        let mut offered = 0;
        let mut i = 0;
        for e in rest {
            while i < other.len() && other[i].t <= e.t {
                if other[i].t >= t0 {
                    offered += 1;
                    cross += p.try_match(&other[i]).is_hit() as usize;
                }
                i += 1;
            }
            p.expire_events(e.t);
            p.try_match(e);
            p.maybe_recenter();
        }
        assert!(offered > 100);
        assert!((cross as f64) < 0.1 * offered as f64, "{cross}/{offered}");
    }

    #[test]
    fn ideal_structure_hit_fraction_near_one() {
        let flow = FlowVector::new(58.0, 0.0);
        let events = hexagon_events(flow, 0.4);
        let (seed, rest) = events.split_at(events.len() / 4);
        let mut p = TrackPlane::new(0, flow, seed.to_vec(), Default::default()).unwrap();
        for e in rest {
            p.expire_events(e.t);
            p.try_match(e);
            p.maybe_recenter();
        }
        let now = rest.last().unwrap().t;
        let window = 2.0 * p.lifetime_secs();
        let f = p.expected_hit_fraction(window, now);
        assert!((0.7..=1.3).contains(&f), "fraction {f}");
        // Silence for a full lifetime drives it to zero.
        let later = now + 3 * p.lifetime_us();
        p.expire_events(later);
        assert_eq!(p.expected_hit_fraction(p.lifetime_secs(), later), 0.0);
        assert!(p.footprint(later).is_empty());
    }

    #[test]
    fn footprint_follows_motion() {
        let flow = FlowVector::new(50.0, 0.0);
        let p = TrackPlane::new(0, flow, vec![ev(10, 10, 1_000_000, 1)], Default::default()).unwrap();
        assert_eq!(p.footprint(1_000_000).cells, vec![(10, 10)]);
        assert_eq!(p.footprint(1_100_000).cells, vec![(15, 10)]);
    }

    #[test]
    fn absorb_weights_flow_by_events() {
        let cfg = TrackPlaneConfig::default();
        let a_events: Vec<Event> = (0..30).map(|k| ev(k, 5, k as u64 * 10, 1)).collect();
        let b_events: Vec<Event> = (0..10).map(|k| ev(k, 9, k as u64 * 10 + 5, 1)).collect();
        let mut a = TrackPlane::new(7, FlowVector::new(60.0, 0.0), a_events, cfg.clone()).unwrap();
        let b = TrackPlane::new(9, FlowVector::new(40.0, 4.0), b_events, cfg).unwrap();
        a.absorb(b);
        assert_eq!(a.id(), 7);
        assert_eq!(a.event_count(), 40);
        assert_eq!(a.center_flow(), FlowVector::new(55.0, 1.0));
        assert!(a.events().iter().zip(a.events().iter().skip(1)).all(|(x, y)| x.t <= y.t));
        assert_consistent(&a);
    }

    #[test]
    fn snapshot_row() {
        let p = TrackPlane::new(2, FlowVector::new(1.5, -2.0), vec![ev(1, 1, 0, 1)], Default::default()).unwrap();
        let mut out = Vec::new();
        p.write_snapshot_row(40, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "2,40,1.5,-2,0.02,1,1\n");
    }

    proptest! {
        #[test]
        fn grids_stay_consistent(
            raw in proptest::collection::vec((0u16..16, 0u16..16, 0u64..400, any::<bool>()), 1..150),
            vu in -80.0f64..80.0,
            vv in -80.0f64..80.0,
        ) {
            let mut t = 0;
            let events: Vec<Event> = raw
                .into_iter()
                .map(|(u, v, dt, on)| { t += dt * 100; Event::new(u, v, t, if on { Polarity::On } else { Polarity::Off }) })
                .collect();
            let (seed, rest) = events.split_at(1 + events.len() / 4);
            let mut p = TrackPlane::new(0, FlowVector::new(vu, vv), seed.to_vec(), Default::default()).unwrap();
            for e in rest {
                p.expire_events(e.t);
                p.try_match(e);
                p.maybe_recenter();
                let center = p.center_grid();
                prop_assert_eq!(center.metric(), metric_bruteforce(p.events(), center.flow(), Some(p.t_ref())));
                prop_assert!(p.h() >= p.config().h_min && p.h() <= p.config().h_max);
            }
            assert_consistent(&p);
        }
    }
}

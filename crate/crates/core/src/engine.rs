//! The full pipeline: track-plane matching with flow-plane fallback,
//! periodic merging and pruning.

use std::fmt;
use std::io::Write;


use crate::error::{Error, Result};
use crate::event::{Event, SensorGeometry};
use crate::flow_plane::{FlowPlane, FlowPlaneConfig};
use crate::projection::{Cell, FlowVector};
use crate::track_plane::{Footprint, TrackPlane, TrackPlaneConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub flow_plane: FlowPlaneConfig,
    pub track_plane: TrackPlaneConfig,
    /// Planes receiving less than this fraction of their expected events
    /// are removed.
    pub prune_fraction: f64,
    /// Largest relative flow difference for a merge.
    pub merge_flow_tol: f64,
    /// Footprint overlap (relative to the smaller plane) needed to merge.
    pub merge_overlap_tol: f64,
    /// Reach of the larger footprint when measuring overlap, as a fraction
    /// of its longest side; at least one cell.
    pub merge_reach: f64,
    /// Events between merge/prune sweeps.
    pub maintenance_period: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            flow_plane: FlowPlaneConfig::default(),
            track_plane: TrackPlaneConfig::default(),
            prune_fraction: 0.1,
            merge_flow_tol: 0.15,
            merge_overlap_tol: 0.25,
            merge_reach: 0.5,
            maintenance_period: 1000,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.flow_plane.validate()?;
        self.track_plane.validate()?;
        for (key, v) in [
            ("prune_fraction", self.prune_fraction),
            ("merge_flow_tol", self.merge_flow_tol),
            ("merge_overlap_tol", self.merge_overlap_tol),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config { key: key.into(), message: format!("{v} is not in (0, 1)") });
            }
        }
        if !(self.merge_reach >= 0.0 && self.merge_reach.is_finite()) {
            return Err(Error::Config { key: "merge_reach".into(), message: "must be finite and non-negative".into() });
        }
        if self.maintenance_period == 0 {
            return Err(Error::Config { key: "maintenance_period".into(), message: "must be positive".into() });
        }
        Ok(())
    }
}

/// Segment id and flow attached to an event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub segment: u32,
    pub flow: FlowVector,
}

/// An event with the plane that claimed it, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowLabeledEvent {
    pub event: Event,
    pub label: Option<Label>,
}

impl FlowLabeledEvent {
    pub fn unlabeled(event: Event) -> Self {
        FlowLabeledEvent { event, label: None }
    }

    pub fn segment(&self) -> Option<u32> {
        self.label.map(|l| l.segment)
    }

    pub fn flow(&self) -> Option<FlowVector> {
        self.label.map(|l| l.flow)
    }
}

impl fmt::Display for FlowLabeledEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label {
            Some(l) => write!(f, "{} {} {} {}", self.event, l.segment, l.flow.v_u, l.flow.v_v),
            None => write!(f, "{} -1 nan nan", self.event),
        }
    }
}

/// Writes one labeled record per line after a `geometry` header.
pub fn write_labeled<W: Write>(geometry: SensorGeometry, events: &[FlowLabeledEvent], mut sink: W) -> Result<()> {
    writeln!(sink, "geometry {} {}", geometry.width, geometry.height)?;
    for e in events {
        writeln!(sink, "{e}")?;
    }
    Ok(())
}

/// Flow of one plane at a maintenance sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSample {
    pub t: u64,
    pub id: u32,
    pub flow: FlowVector,
    pub a_len: usize,
    pub events: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineStats {
    pub events: usize,
    pub labeled: usize,
    pub planes_created: usize,
    pub planes_merged: usize,
    pub planes_pruned: usize,
    pub maintenance_sweeps: usize,
    pub history: Vec<PlaneSample>,
}

impl EngineStats {
    /// `key=value` lines; the history is summarised by its length.
    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "events={}", self.events)?;
        writeln!(sink, "labeled={}", self.labeled)?;
        writeln!(sink, "unlabeled={}", self.events - self.labeled)?;
        writeln!(sink, "planes_created={}", self.planes_created)?;
        writeln!(sink, "planes_merged={}", self.planes_merged)?;
        writeln!(sink, "planes_pruned={}", self.planes_pruned)?;
        writeln!(sink, "maintenance_sweeps={}", self.maintenance_sweeps)?;
        writeln!(sink, "history_samples={}", self.history.len())?;
        Ok(())
    }

    /// `t,id,v_u,v_v,a,events` rows.
    pub fn write_history_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "t,id,v_u,v_v,a,events")?;
        for s in &self.history {
            writeln!(sink, "{},{},{},{},{},{}", s.t, s.id, s.flow.v_u, s.flow.v_v, s.a_len, s.events)?;
        }
        Ok(())
    }
}

/// One row of [`Engine::snapshot`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSnapshot {
    pub id: u32,
    pub flow: FlowVector,
    pub footprint: Footprint,
    pub event_count: usize,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    flow_plane: FlowPlane,
    /// Oldest first; ids increase along the stack.
    planes: Vec<TrackPlane>,
    next_id: u32,
    last_t: Option<u64>,
    stats: EngineStats,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Engine {
            flow_plane: FlowPlane::new(cfg.flow_plane.clone())?,
            cfg,
            planes: Vec::new(),
            next_id: 0,
            last_t: None,
            stats: EngineStats::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn planes(&self) -> &[TrackPlane] {
        &self.planes
    }

    pub fn flow_plane(&self) -> &FlowPlane {
        &self.flow_plane
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    /// Routes one event and returns its label.
    pub fn process(&mut self, e: Event) -> Result<FlowLabeledEvent> {
        if let Some(prev) = self.last_t {
            if e.t < prev {
                return Err(Error::Ordering { index: self.stats.events, previous: prev, current: e.t });
            }
        }
        self.last_t = Some(e.t);
        self.stats.events += 1;

        let mut label = None;
        for plane in &mut self.planes {
            plane.expire_events(e.t);
        }
        for plane in &mut self.planes {
            let hit = plane.try_match(&e).is_hit();
            plane.maybe_recenter();
            if hit {
                label = Some(Label { segment: plane.id(), flow: plane.center_flow() });
                break;
            }
        }
        match label {
            Some(_) => self.stats.labeled += 1,
            None => {
                if let Some(seed) = self.flow_plane.ingest(e) {
                    let plane = TrackPlane::new(self.next_id, seed.flow, seed.events, self.cfg.track_plane.clone())?;
                    log::debug!("t={} new plane {} at {}", e.t, plane.id(), plane.center_flow());
                    self.next_id += 1;
                    self.planes.push(plane);
                    self.stats.planes_created += 1;
                }
            }
        }

        if self.stats.events % self.cfg.maintenance_period == 0 {
            self.maintain(e.t);
        }
        Ok(FlowLabeledEvent { event: e, label })
    }

    /// Processes a whole stream.
    pub fn run(&mut self, events: &[Event]) -> Result<Vec<FlowLabeledEvent>> {
        events.iter().map(|e| self.process(*e)).collect()
    }

    /// Merge then prune, recording a history sample per surviving plane.
    pub fn maintain(&mut self, now: u64) {
        self.try_merge_all(now);
        self.prune(now);
        self.stats.maintenance_sweeps += 1;
        for p in &self.planes {
            self.stats.history.push(PlaneSample {
                t: now,
                id: p.id(),
                flow: p.center_flow(),
                a_len: p.a_len(),
                events: p.event_count(),
            });
        }
    }

    /// Whether two planes describe the same structure.
    pub fn should_merge(&self, a: &TrackPlane, b: &TrackPlane, now: u64) -> bool {
        let (fa, fb) = (a.center_flow(), b.center_flow());
        let scale = fa.magnitude().max(fb.magnitude());
        if scale > 0.0 && fa.distance(&fb) / scale >= self.cfg.merge_flow_tol {
            return false;
        }
        footprint_overlap(&a.footprint(now), &b.footprint(now), self.cfg.merge_reach) > self.cfg.merge_overlap_tol
    }

    /// Merges plane pairs until none qualify; the older plane survives.
    pub fn try_merge_all(&mut self, now: u64) -> usize {
        let mut merged = 0;
        'scan: loop {
            for i in 0..self.planes.len() {
                for j in i + 1..self.planes.len() {
                    if self.should_merge(&self.planes[i], &self.planes[j], now) {
                        let younger = self.planes.remove(j);
                        log::debug!("t={now} merge plane {} into {}", younger.id(), self.planes[i].id());
                        self.planes[i].absorb(younger);
                        merged += 1;
                        continue 'scan;
                    }
                }
            }
            break;
        }
        self.stats.planes_merged += merged;
        merged
    }

    /// Drops planes past their grace lifetime whose event rate over two
    /// lifetimes is below `prune_fraction` of expectation.
    pub fn prune(&mut self, now: u64) -> usize {
        let before = self.planes.len();
        let threshold = self.cfg.prune_fraction;
        self.planes.retain(|p| {
            if now.saturating_sub(p.birth()) < p.lifetime_us() {
                return true;
            }
            let keep = p.expected_hit_fraction(2.0 * p.lifetime_secs(), now) >= threshold;
            if !keep {
                log::debug!("t={now} prune plane {} at {}", p.id(), p.center_flow());
            }
            keep
        });
        let removed = before - self.planes.len();
        self.stats.planes_pruned += removed;
        removed
    }

    /// Live planes sorted by id.
    pub fn snapshot(&self, now: u64) -> Vec<PlaneSnapshot> {
        let mut out: Vec<PlaneSnapshot> = self
            .planes
            .iter()
            .map(|p| PlaneSnapshot {
                id: p.id(),
                flow: p.center_flow(),
                footprint: p.footprint(now),
                event_count: p.event_count(),
            })
            .collect();
        out.sort_by_key(|s| s.id);
        out
    }

    /// `id,t,v_u,v_v,h,a,events` rows for every live plane.
    pub fn write_snapshot_csv<W: Write>(&self, now: u64, mut sink: W) -> Result<()> {
        writeln!(sink, "{}", crate::track_plane::SNAPSHOT_HEADER)?;
        for p in &self.planes {
            p.write_snapshot_row(now, &mut sink)?;
        }
        Ok(())
    }
}

/// Share of the smaller footprint lying within reach of the larger one. The
/// reach is `reach` times the larger footprint's longest bounding-box side,
/// in cells (Chebyshev distance), and never below one cell: the edges of one
/// object are footprints of their own when they enter the frame apart.
pub fn footprint_overlap(a: &Footprint, b: &Footprint, reach: f64) -> f64 {
    let (small, large) = if a.cells.len() <= b.cells.len() { (a, b) } else { (b, a) };
    if small.cells.is_empty() || large.cells.is_empty() {
        return 0.0;
    }
    let side = |f: fn(&Cell) -> i32| {
        let (lo, hi) = large.cells.iter().map(f).fold((i32::MAX, i32::MIN), |(l, h), x| (l.min(x), h.max(x)));
        hi - lo + 1
    };
    let extent = side(|c| c.0).max(side(|c| c.1));
    let r = ((reach * extent as f64).round() as i32).max(1);
    let shared = small
        .cells
        .iter()
        .filter(|&&(x, y)| large.cells.iter().any(|&(lx, ly)| (lx - x).abs() <= r && (ly - y).abs() <= r))
        .count();
    shared as f64 / small.cells.len() as f64
}

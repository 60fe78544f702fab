//! Projection of events along a candidate flow and the contrast metric.
//!
//! An event `(u, v, t)` projected along flow `(v_u, v_v)` lands on cell
//! `(round(u - v_u * dt), round(v - v_v * dt))` where `dt = t - t_ref`. The
//! accumulation image `f` is the signed polarity sum per cell and the metric
//! is `m = sum f^2`. Events that belong to a structure moving at the
//! candidate flow pile up on the same cells, so `m` peaks at the true flow.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`).

use std::fmt;
use std::io::Write;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::event::Event;

/// Image-plane velocity in pixels per second.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowVector {
    pub v_u: f64,
    pub v_v: f64,
}

impl FlowVector {
    pub const ZERO: FlowVector = FlowVector { v_u: 0.0, v_v: 0.0 };

    pub const fn new(v_u: f64, v_v: f64) -> Self {
        FlowVector { v_u, v_v }
    }

    pub fn magnitude(&self) -> f64 {
        self.v_u.hypot(self.v_v)
    }

    /// Direction in radians, `atan2(v_v, v_u)`.
    pub fn direction(&self) -> f64 {
        self.v_v.atan2(self.v_u)
    }

    pub fn is_finite(&self) -> bool {
        self.v_u.is_finite() && self.v_v.is_finite()
    }

    /// Principal axis `(v_u, v_v, 1)` of the space-time extrusion traced by a
    /// structure moving at this flow.
    pub fn principal_axis(&self) -> [f64; 3] {
        [self.v_u, self.v_v, 1.0]
    }

    pub fn distance(&self, other: &FlowVector) -> f64 {
        (self.v_u - other.v_u).hypot(self.v_v - other.v_v)
    }
}

impl fmt::Display for FlowVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.v_u, self.v_v)
    }
}

/// Integer cell on the projection plane. May lie outside the sensor.
pub type Cell = (i32, i32);

/// Projects `e` along `flow`, collapsing time relative to `t_ref` (microseconds).
#[inline]
pub fn project_event(e: &Event, flow: FlowVector, t_ref: u64) -> Cell {
    let dt = (e.t as i64 - t_ref as i64) as f64 * 1e-6;
    let x = e.u as f64 - flow.v_u * dt;
    let y = e.v as f64 - flow.v_v * dt;
    (x.round() as i32, y.round() as i32)
}

/// 8-neighbourhood offsets.
pub const NEIGHBOURS_8: [(i32, i32); 8] =
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Bin {
    sum: i32,
    count: u32,
}

/// Sparse accumulation image for one flow, with its metric kept up to date.
///
/// Each cell stores the signed polarity sum `f` and the number of events that
/// landed on it. A cell whose sum cancelled to zero is still *occupied*.
#[derive(Debug, Clone)]
pub struct AccumulatorGrid {
    flow: FlowVector,
    t_ref: Option<u64>,
    cells: FxHashMap<Cell, Bin>,
    metric: i64,
    events: usize,
    nonzero: usize,
}

impl AccumulatorGrid {
    pub fn new(flow: FlowVector) -> Self {
        AccumulatorGrid { flow, t_ref: None, cells: FxHashMap::default(), metric: 0, events: 0, nonzero: 0 }
    }

    /// A grid whose reference time is fixed up front.
    pub fn with_t_ref(flow: FlowVector, t_ref: u64) -> Self {
        AccumulatorGrid { t_ref: Some(t_ref), ..AccumulatorGrid::new(flow) }
    }

    pub fn flow(&self) -> FlowVector {
        self.flow
    }

    pub fn t_ref(&self) -> Option<u64> {
        self.t_ref
    }

    pub fn metric(&self) -> i64 {
        self.metric
    }

    /// Number of events currently accumulated.
    pub fn event_count(&self) -> usize {
        self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events == 0
    }

    /// Cell `e` would land on. Uses `e.t` as reference if none is set yet.
    #[inline]
    pub fn cell_for(&self, e: &Event) -> Cell {
        project_event(e, self.flow, self.t_ref.unwrap_or(e.t))
    }

    /// Signed sum `f` at `cell`.
    pub fn value(&self, cell: Cell) -> i32 {
        self.cells.get(&cell).map_or(0, |b| b.sum)
    }

    /// Whether any event currently sits on `cell`.
    #[inline]
    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.cells.contains_key(&cell)
    }

    /// Number of occupied cells.
    pub fn occupied_len(&self) -> usize {
        self.cells.len()
    }

    /// Number of cells with a non-zero signed sum.
    pub fn nonzero_len(&self) -> usize {
        self.nonzero
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells.keys().copied()
    }

    /// Cells with a non-zero signed sum, paired with that sum.
    pub fn nonzero_cells(&self) -> impl Iterator<Item = (Cell, i32)> + '_ {
        self.cells.iter().filter(|(_, b)| b.sum != 0).map(|(c, b)| (*c, b.sum))
    }

    /// Adds `e` and returns the metric change `2cs + s^2`.
    pub fn accumulate(&mut self, e: &Event) -> i64 {
        if self.t_ref.is_none() {
            self.t_ref = Some(e.t);
        }
        let cell = self.cell_for(e);
        let s = e.sign();
        let bin = self.cells.entry(cell).or_default();
        let c = bin.sum as i64;
        bin.sum += s;
        bin.count += 1;
        self.nonzero = self.nonzero + (bin.sum != 0) as usize - (c != 0) as usize;
        let delta = 2 * c * s as i64 + 1;
        self.metric += delta;
        self.events += 1;
        delta
    }

    /// Removes a previously accumulated `e`; exact inverse of [`accumulate`].
    ///
    /// [`accumulate`]: AccumulatorGrid::accumulate
    pub fn retract(&mut self, e: &Event) -> Result<i64> {
        let cell = self.cell_for(e);
        let Some(bin) = self.cells.get_mut(&cell) else {
            return Err(Error::Consistency(format!(
                "retracting event at t={} from empty cell {cell:?}",
                e.t
            )));
        };
        let s = e.sign();
        let c = bin.sum as i64;
        bin.sum -= s;
        bin.count -= 1;
        self.nonzero = self.nonzero + (bin.sum != 0) as usize - (c != 0) as usize;
        if bin.count == 0 {
            if bin.sum != 0 {
                return Err(Error::Consistency(format!("cell {cell:?} emptied with residual sum {}", bin.sum)));
            }
            self.cells.remove(&cell);
        }
        let delta = -2 * c * s as i64 + 1;
        self.metric += delta;
        self.events -= 1;
        Ok(delta)
    }

    /// Drops all events, keeping the flow. The reference time is cleared.
    pub fn clear(&mut self) {
        self.cells.clear();
        self.metric = 0;
        self.events = 0;
        self.nonzero = 0;
        self.t_ref = None;
    }

    /// Writes `x,y,f` rows sorted by cell.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut rows: Vec<(Cell, i32)> = self.cells.iter().map(|(c, b)| (*c, b.sum)).collect();
        rows.sort_unstable_by_key(|&((x, y), _)| (y, x));
        writeln!(sink, "x,y,f")?;
        for ((x, y), f) in rows {
            writeln!(sink, "{x},{y},{f}")?;
        }
        Ok(())
    }
}

/// Rebuilds `f` from scratch and returns `sum f^2`.
///
/// This is the reference the incremental [`AccumulatorGrid`] is checked
/// against. `t_ref` defaults to the first event's timestamp.
pub fn metric_bruteforce<'a, I>(events: I, flow: FlowVector, t_ref: Option<u64>) -> i64
where
    I: IntoIterator<Item = &'a Event>,
{
    let mut iter = events.into_iter().peekable();
    let Some(first) = iter.peek() else { return 0 };
    let t_ref = t_ref.unwrap_or(first.t);
    let mut image: std::collections::BTreeMap<Cell, i64> = std::collections::BTreeMap::new();
    for e in iter {
        *image.entry(project_event(e, flow, t_ref)).or_insert(0) += e.sign() as i64;
    }
    image.values().map(|f| f * f).sum()
}

/// `sum f^2` of `events` projected along `flow` onto square bins of side
/// `bin` pixels, by sorting packed bins instead of hashing. With `bin == 1.0`
/// this is the plain metric. Faster than an [`AccumulatorGrid`] when only
/// the metric of a fixed event set is needed; `scratch` is reused between
/// calls.
pub fn metric_binned(events: &[Event], flow: FlowVector, t_ref: u64, bin: f64, scratch: &mut Vec<(u64, i64)>) -> i64 {
    scratch.clear();
    scratch.extend(events.iter().map(|e| {
        let dt = (e.t as i64 - t_ref as i64) as f64 * 1e-6;
        let x = ((e.u as f64 - flow.v_u * dt) / bin).round() as i32;
        let y = ((e.v as f64 - flow.v_v * dt) / bin).round() as i32;
        (((x as u32 as u64) << 32) | y as u32 as u64, e.sign() as i64)
    }));
    scratch.sort_unstable_by_key(|p| p.0);
    let mut total = 0;
    let mut k = 0;
    while k < scratch.len() {
        let key = scratch[k].0;
        let mut f = 0;
        while k < scratch.len() && scratch[k].0 == key {
            f += scratch[k].1;
            k += 1;
        }
        total += f * f;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Polarity;
    use proptest::prelude::*;

    fn ev(u: u16, v: u16, t: u64, s: i64) -> Event {
        Event::new(u, v, t, Polarity::from_sign(s).unwrap())
    }

    #[test]
    fn projection_examples() {
        let e = ev(10, 5, 500_000, 1);
        assert_eq!(project_event(&e, FlowVector::new(4.0, -2.0), 0), (8, 6));
        assert_eq!(project_event(&e, FlowVector::ZERO, 0), (10, 5));
        // 10 - 1.5 = 8.5 rounds away from zero.
        assert_eq!(project_event(&e, FlowVector::new(3.0, 0.0), 0), (9, 5));
        // Negative half-values round away from zero as well.
        let e = ev(0, 0, 500_000, 1);
        assert_eq!(project_event(&e, FlowVector::new(3.0, 5.0), 0), (-2, -3));
    }

    #[test]
    fn accumulate_deltas() {
        let f = FlowVector::ZERO;
        let mut g = AccumulatorGrid::new(f);
        assert_eq!(g.accumulate(&ev(1, 1, 0, 1)), 1);
        assert_eq!(g.value((1, 1)), 1);
        g.accumulate(&ev(1, 1, 0, 1));
        assert_eq!(g.accumulate(&ev(1, 1, 0, 1)), 5);
        assert_eq!(g.value((1, 1)), 3);

        let mut g = AccumulatorGrid::new(f);
        g.accumulate(&ev(0, 0, 0, 1));
        g.accumulate(&ev(0, 0, 0, 1));
        assert_eq!(g.accumulate(&ev(0, 0, 0, -1)), -3);
        assert_eq!(g.value((0, 0)), 1);
    }

    #[test]
    fn retract_inverse_and_errors() {
        let mut g = AccumulatorGrid::new(FlowVector::new(7.0, -3.0));
        let a = ev(4, 4, 100, 1);
        g.accumulate(&ev(4, 4, 100, -1));
        let before = (g.metric(), g.value(g.cell_for(&a)));
        g.accumulate(&a);
        g.retract(&a).unwrap();
        assert_eq!((g.metric(), g.value(g.cell_for(&a))), before);

        let mut g = AccumulatorGrid::new(FlowVector::ZERO);
        for _ in 0..3 {
            g.accumulate(&ev(2, 2, 0, 1));
        }
        assert_eq!(g.retract(&ev(2, 2, 0, 1)).unwrap(), -5);
        assert!(matches!(g.retract(&ev(9, 9, 0, 1)), Err(Error::Consistency(_))));
    }

    #[test]
    fn cancelled_cell_stays_occupied() {
        let mut g = AccumulatorGrid::new(FlowVector::ZERO);
        g.accumulate(&ev(3, 3, 0, 1));
        g.accumulate(&ev(3, 3, 0, -1));
        assert_eq!(g.metric(), 0);
        assert!(g.is_occupied((3, 3)));
        assert_eq!(g.nonzero_cells().count(), 0);
        g.retract(&ev(3, 3, 0, -1)).unwrap();
        g.retract(&ev(3, 3, 0, 1)).unwrap();
        assert!(!g.is_occupied((3, 3)));
        assert!(g.is_empty());
    }

    #[test]
    fn bruteforce_hand_sum() {
        let events = [ev(0, 0, 7, 1), ev(0, 0, 7, 1), ev(1, 0, 7, -1)];
        assert_eq!(metric_bruteforce(&events, FlowVector::ZERO, None), 5);
        assert_eq!(metric_bruteforce(&[], FlowVector::new(1.0, 1.0), None), 0);
    }

    #[test]
    fn wide_bins_pool_neighbours() {
        // 0/2 -> 0, 1/2 = 0.5 -> 1, 2/2 -> 1, 5/2 = 2.5 -> 3.
        let events = [ev(0, 0, 0, 1), ev(1, 0, 0, 1), ev(2, 0, 0, 1), ev(5, 0, 0, -1)];
        let mut scratch = Vec::new();
        assert_eq!(metric_binned(&events, FlowVector::ZERO, 0, 2.0, &mut scratch), 1 + 4 + 1);
        assert_eq!(metric_binned(&events, FlowVector::ZERO, 0, 1.0, &mut scratch), 4);
        assert_eq!(metric_binned(&[], FlowVector::ZERO, 0, 1.0, &mut scratch), 0);
    }

    #[test]
    fn csv_dump_sorted() {
        let mut g = AccumulatorGrid::new(FlowVector::ZERO);
        g.accumulate(&ev(2, 1, 0, -1));
        g.accumulate(&ev(1, 1, 0, 1));
        g.accumulate(&ev(5, 0, 0, 1));
        let mut out = Vec::new();
        g.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "x,y,f\n5,0,1\n1,1,1\n2,1,-1\n");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Add(Event),
        RetractOldest,
        RetractNewest,
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (0u16..20, 0u16..20, 0u64..2_000_000, any::<bool>())
            .prop_map(|(u, v, t, on)| Event::new(u, v, t, if on { Polarity::On } else { Polarity::Off }))
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => arb_event().prop_map(Op::Add),
            1 => Just(Op::RetractOldest),
            1 => Just(Op::RetractNewest),
        ]
    }

    proptest! {
        #[test]
        fn incremental_matches_bruteforce(
            ops in proptest::collection::vec(arb_op(), 1..200),
            vu in -300.0f64..300.0,
            vv in -300.0f64..300.0,
        ) {
            let flow = FlowVector::new(vu, vv);
            let mut grid = AccumulatorGrid::with_t_ref(flow, 1_000_000);
            let mut held: std::collections::VecDeque<Event> = Default::default();
            for op in ops {
                match op {
                    Op::Add(e) => { grid.accumulate(&e); held.push_back(e); }
                    Op::RetractOldest => if let Some(e) = held.pop_front() { grid.retract(&e).unwrap(); },
                    Op::RetractNewest => if let Some(e) = held.pop_back() { grid.retract(&e).unwrap(); },
                }
                prop_assert_eq!(grid.metric(), metric_bruteforce(&held, flow, Some(1_000_000)));
                prop_assert_eq!(grid.event_count(), held.len());
                prop_assert_eq!(grid.nonzero_len(), grid.nonzero_cells().count());
            }
            if held.is_empty() {
                prop_assert_eq!(grid.metric(), 0);
            }
        }

        #[test]
        fn unit_bins_match_bruteforce(
            events in proptest::collection::vec(arb_event(), 0..150),
            vu in -300.0f64..300.0,
            vv in -300.0f64..300.0,
            t_ref in 0u64..5_000_000,
        ) {
            let flow = FlowVector::new(vu, vv);
            let mut scratch = Vec::new();
            prop_assert_eq!(metric_binned(&events, flow, t_ref, 1.0, &mut scratch), metric_bruteforce(&events, flow, Some(t_ref)));
        }

        #[test]
        fn zero_flow_is_identity(e in arb_event(), t_ref in 0u64..5_000_000) {
            prop_assert_eq!(project_event(&e, FlowVector::ZERO, t_ref), (e.u as i32, e.v as i32));
        }
    }
}

//! Local Lucas-Kanade flow from timestamp-surface gradients.
//!
//! Each polarity keeps the latest timestamp per pixel. Around an event, the
//! central-difference gradients `g` of that surface satisfy `g . v = 1` for
//! the local velocity `v`; the window's least-squares solution is the
//! estimate.

use crate::error::{Error, Result};
use crate::eval::FlowRecord;
use crate::event::{Event, Polarity, SensorGeometry};
use crate::projection::FlowVector;

#[derive(Debug, Clone, PartialEq)]
pub struct LkConfig {
    /// Half-width of the square window; 3 gives 7x7.
    pub window: usize,
    /// Fewest pixels with a valid gradient for a solution.
    pub min_valid: usize,
    /// Below this ratio of eigenvalues only the normal component is solved.
    pub eigen_ratio_floor: f64,
    /// Below this largest eigenvalue (s^2/px^2) nothing is solved.
    pub eigen_floor: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        LkConfig { window: 3, min_valid: 10, eigen_ratio_floor: 0.05, eigen_floor: 1e-12 }
    }
}

impl LkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: format!("lk.{key}"), message: message.into() });
        if self.window == 0 {
            return bad("window", "must be at least 1");
        }
        if self.min_valid == 0 {
            return bad("min_valid", "must be positive");
        }
        if !(self.eigen_ratio_floor >= 0.0 && self.eigen_ratio_floor < 1.0) {
            return bad("eigen_ratio_floor", "must lie in [0, 1)");
        }
        if !(self.eigen_floor > 0.0) {
            return bad("eigen_floor", "must be positive");
        }
        Ok(())
    }
}

/// Outcome of one local fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LkFlow {
    /// Both components constrained.
    Full(FlowVector),
    /// Only the component along the dominant gradient was observable.
    Normal(FlowVector),
    Unsolvable,
}

impl LkFlow {
    pub fn flow(&self) -> Option<FlowVector> {
        match *self {
            LkFlow::Full(v) | LkFlow::Normal(v) => Some(v),
            LkFlow::Unsolvable => None,
        }
    }
}

/// Latest timestamp per pixel and polarity, in seconds.
#[derive(Debug, Clone)]
pub struct TimestampSurface {
    geometry: SensorGeometry,
    /// NaN marks pixels never touched.
    planes: [Vec<f64>; 2],
}

impl TimestampSurface {
    pub fn new(geometry: SensorGeometry) -> Self {
        let n = geometry.pixel_count();
        TimestampSurface { geometry, planes: [vec![f64::NAN; n], vec![f64::NAN; n]] }
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    fn index(&self, u: usize, v: usize) -> usize {
        v * self.geometry.width as usize + u
    }

    pub fn update(&mut self, e: &Event) -> Result<()> {
        if !self.geometry.contains(e.u, e.v) {
            return Err(Error::Geometry(format!(
                "event ({}, {}) outside {}x{} sensor",
                e.u, e.v, self.geometry.width, self.geometry.height
            )));
        }
        let k = self.index(e.u as usize, e.v as usize);
        self.planes[e.polarity.index()][k] = e.t_secs();
        Ok(())
    }

    /// Sets a value directly, for analytic surfaces.
    pub fn set(&mut self, polarity: Polarity, u: u16, v: u16, t_secs: f64) {
        let k = self.index(u as usize, v as usize);
        self.planes[polarity.index()][k] = t_secs;
    }

    pub fn get(&self, polarity: Polarity, u: i64, v: i64) -> Option<f64> {
        if !self.geometry.contains_i(u, v) {
            return None;
        }
        let t = self.planes[polarity.index()][self.index(u as usize, v as usize)];
        (!t.is_nan()).then_some(t)
    }

    /// Pixels ever set for `polarity`.
    pub fn valid_count(&self, polarity: Polarity) -> usize {
        self.planes[polarity.index()].iter().filter(|t| !t.is_nan()).count()
    }

    fn gradient(&self, p: Polarity, u: i64, v: i64) -> Option<(f64, f64)> {
        let d = |a: Option<f64>, b: Option<f64>| Some((a? - b?) / 2.0);
        let gx = d(self.get(p, u + 1, v), self.get(p, u - 1, v))?;
        let gy = d(self.get(p, u, v + 1), self.get(p, u, v - 1))?;
        Some((gx, gy))
    }

    /// Fits the window around `(u, v)` on `polarity`'s surface.
    pub fn flow_at(&self, polarity: Polarity, u: u16, v: u16, cfg: &LkConfig) -> LkFlow {
        let r = cfg.window as i64;
        let (mut a, mut b, mut c, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut valid = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let Some((gx, gy)) = self.gradient(polarity, u as i64 + dx, v as i64 + dy) else { continue };
                a += gx * gx;
                b += gx * gy;
                c += gy * gy;
                bx += gx;
                by += gy;
                valid += 1;
            }
        }
        if valid < cfg.min_valid {
            return LkFlow::Unsolvable;
        }
        solve(a, b, c, bx, by, cfg)
    }
}

/// Least squares for `[a b; b c] v = (bx, by)`.
fn solve(a: f64, b: f64, c: f64, bx: f64, by: f64, cfg: &LkConfig) -> LkFlow {
    let half_trace = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let (l1, l2) = (half_trace + disc, half_trace - disc);
    if !(l1 > cfg.eigen_floor) {
        return LkFlow::Unsolvable;
    }
    if l2 > cfg.eigen_ratio_floor * l1 {
        let det = a * c - b * b;
        let v = FlowVector::new((c * bx - b * by) / det, (a * by - b * bx) / det);
        return if v.is_finite() { LkFlow::Full(v) } else { LkFlow::Unsolvable };
    }
    // Dominant eigenvector; only the velocity along it is observable.
    let (ex, ey) = if b.abs() > 1e-300 {
        let (x, y) = (b, l1 - a);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let k = (ex * bx + ey * by) / l1;
    LkFlow::Normal(FlowVector::new(k * ex, k * ey))
}

/// Streams events through a surface and fits each one after inserting it.
#[derive(Debug, Clone)]
pub struct LkEstimator {
    cfg: LkConfig,
    surface: TimestampSurface,
}

impl LkEstimator {
    pub fn new(geometry: SensorGeometry, cfg: LkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LkEstimator { cfg, surface: TimestampSurface::new(geometry) })
    }

    pub fn surface(&self) -> &TimestampSurface {
        &self.surface
    }

    pub fn process(&mut self, e: &Event) -> Result<LkFlow> {
        self.surface.update(e)?;
        Ok(self.surface.flow_at(e.polarity, e.u, e.v, &self.cfg))
    }

    /// Flow records for a stream; the segment is always absent.
    pub fn run(&mut self, events: &[Event]) -> Result<Vec<FlowRecord>> {
        events
            .iter()
            .map(|e| Ok(FlowRecord { event: *e, segment: None, flow: self.process(e)?.flow() }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::magnitude_pct_error;
    use crate::synth::{generate_events, MotionModel, Shape, ShapeContour};

    const G: SensorGeometry = SensorGeometry::DAVIS240;

    fn planar(g: SensorGeometry, f: impl Fn(f64, f64) -> f64) -> TimestampSurface {
        let mut s = TimestampSurface::new(g);
        for v in 0..g.height {
            for u in 0..g.width {
                s.set(Polarity::On, u, v, f(u as f64, v as f64));
            }
        }
        s
    }

    #[test]
    fn surface_updates() {
        let mut s = TimestampSurface::new(G);
        s.update(&Event::new(5, 6, 1_000, Polarity::On)).unwrap();
        assert_eq!(s.valid_count(Polarity::On), 1);
        assert_eq!(s.valid_count(Polarity::Off), 0);
        s.update(&Event::new(5, 6, 2_500, Polarity::On)).unwrap();
        assert_eq!(s.get(Polarity::On, 5, 6), Some(0.0025));
        assert!(s.update(&Event::new(240, 0, 0, Polarity::On)).is_err());
    }

    #[test]
    fn exact_plane_recovers_inverse_slope() {
        let g = SensorGeometry::new(20, 20).unwrap();
        let s = planar(g, |x, _| x / 100.0);
        // A pure x-ramp has no y gradient: only the normal component exists.
        let LkFlow::Normal(v) = s.flow_at(Polarity::On, 10, 10, &LkConfig::default()) else { panic!() };
        assert!((v.v_u - 100.0).abs() < 1e-9 && v.v_v.abs() < 1e-9, "{v}");

        // Timestamps of a point moving at (vx, vy) seen by a 2-D texture.
        let s = planar(g, |x, y| x / 80.0 + y / 40.0 + 0.1 * (x * y) / 1000.0);
        match s.flow_at(Polarity::On, 10, 10, &LkConfig { eigen_ratio_floor: 0.0, ..Default::default() }) {
            LkFlow::Full(v) => {
                let (gx, gy) = (1.0 / 80.0 + 1e-4 * 10.0, 1.0 / 40.0 + 1e-4 * 10.0);
                assert!((gx * v.v_u + gy * v.v_v - 1.0).abs() < 0.01, "{v}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plane_fit_oracle_within_one_percent() {
        // Any planar surface t = a x + b y gives the normal flow
        // (a, b) / (a^2 + b^2).
        let g = SensorGeometry::new(20, 20).unwrap();
        for (a, b) in [(0.01, 0.0), (0.004, 0.003), (-0.02, 0.01)] {
            let s = planar(g, |x, y| 1.0 + a * x + b * y);
            let v = s.flow_at(Polarity::On, 9, 9, &LkConfig::default()).flow().unwrap();
            let n = a * a + b * b;
            let (ou, ov) = (a / n, b / n);
            assert!((v.v_u - ou).abs() <= 0.01 * ou.hypot(ov) && (v.v_v - ov).abs() <= 0.01 * ou.hypot(ov));
        }
    }

    #[test]
    fn flat_surface_is_unsolvable() {
        let g = SensorGeometry::new(20, 20).unwrap();
        let s = planar(g, |_, _| 0.5);
        assert_eq!(s.flow_at(Polarity::On, 10, 10, &LkConfig::default()), LkFlow::Unsolvable);
        let empty = TimestampSurface::new(g);
        assert_eq!(empty.flow_at(Polarity::On, 10, 10, &LkConfig::default()), LkFlow::Unsolvable);
    }

    #[test]
    fn straight_edge_gives_normal_flow() {
        // A long bar at 45 degrees moving right: only the component along
        // the edge normal is visible, 1/sqrt(2) of the true speed.
        let contour = ShapeContour::build(Shape::Bar { length: 120.0, thickness: 6.0 }, G)
            .unwrap()
            .rotated(std::f64::consts::FRAC_PI_4);
        let truth = FlowVector::new(58.0, 0.0);
        let (stream, _) = generate_events(&contour, (80.0, 90.0), MotionModel::Constant(truth), 1.0, G).unwrap();
        let mut lk = LkEstimator::new(G, LkConfig::default()).unwrap();
        let out = lk.run(&stream.events).unwrap();
        let mids: Vec<f64> = out
            .iter()
            .filter(|r| r.event.t > 200_000)
            .filter_map(|r| r.flow)
            .map(|f| magnitude_pct_error(f, truth).unwrap())
            .collect();
        assert!(mids.len() > 1000);
        let med = crate::eval::median(&mids);
        assert!((-35.0..=-20.0).contains(&med), "median magnitude error {med}");
        let normal = out.iter().filter_map(|r| r.flow).filter(|f| (f.v_u.abs() - f.v_v.abs()).abs() < 0.2 * f.magnitude()).count();
        assert!(normal as f64 > 0.5 * out.len() as f64);
    }
}

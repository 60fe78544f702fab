//! Synthetic event streams with analytic ground-truth flow.
//!
//! A shape is a set of contour points sampled at most half a pixel apart,
//! each with an outward normal. The points move under a [`MotionModel`]. The
//! simulated sensor is ideal and noiseless: a pixel fires when the contour
//! starts to occupy it. The event carries the time the contour point crossed
//! into that pixel. Its polarity is `+1` on the leading side of the motion
//! (normal pointing along the velocity) and `-1` on the trailing side.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity, SensorGeometry};
use crate::projection::FlowVector;

/// Maximum spacing between neighbouring contour points, in pixels.
pub const CONTOUR_SPACING: f64 = 0.5;

/// Fractional part of the golden ratio.
const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Largest displacement of any contour point per simulation step, in pixels.
const MAX_STEP_PX: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Circle { radius: f64 },
    /// Regular hexagon; `width` is the vertex-to-vertex extent.
    Hexagon { width: f64 },
    Rectangle { width: f64, height: f64 },
    /// Vertical bar.
    Bar { length: f64, thickness: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourPoint {
    /// Position relative to the shape centre.
    pub pos: (f64, f64),
    /// Unit outward normal.
    pub normal: (f64, f64),
}

/// Edge points of a shape, centred on the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeContour {
    points: Vec<ContourPoint>,
}

impl ShapeContour {
    /// Samples the edges of `shape`. The shape must fit inside `geometry`.
    pub fn build(shape: Shape, geometry: SensorGeometry) -> Result<Self> {
        let dims = match shape {
            Shape::Circle { radius } => vec![radius],
            Shape::Hexagon { width } => vec![width],
            Shape::Rectangle { width, height } => vec![width, height],
            Shape::Bar { length, thickness } => vec![length, thickness],
        };
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Geometry(format!("shape dimensions must be positive: {shape:?}")));
        }
        let points = match shape {
            Shape::Circle { radius } => circle(radius),
            Shape::Hexagon { width } => {
                let r = width / 2.0;
                let vertices: Vec<(f64, f64)> = (0..6)
                    .map(|k| {
                        let a = k as f64 * PI / 3.0;
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                polygon(&vertices)
            }
            Shape::Rectangle { width, height } => rectangle(width, height),
            Shape::Bar { length, thickness } => rectangle(thickness, length),
        };
        let contour = ShapeContour { points };
        let (w, h) = contour.extent();
        if w >= geometry.width as f64 || h >= geometry.height as f64 {
            return Err(Error::Geometry(format!(
                "{shape:?} spans {w:.1}x{h:.1} px, larger than the {}x{} sensor",
                geometry.width, geometry.height
            )));
        }
        Ok(contour)
    }

    /// Builds a contour from explicit points.
    pub fn from_points(points: Vec<ContourPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("contour has no points"));
        }
        Ok(ShapeContour { points })
    }

    pub fn points(&self) -> &[ContourPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rotates the contour about its centre by `angle` radians.
    pub fn rotated(mut self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let rot = |(x, y): (f64, f64)| (c * x - s * y, s * x + c * y);
        for p in &mut self.points {
            p.pos = rot(p.pos);
            p.normal = rot(p.normal);
        }
        self
    }

    /// Bounding-box width and height.
    pub fn extent(&self) -> (f64, f64) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &self.points {
            x0 = x0.min(p.pos.0);
            x1 = x1.max(p.pos.0);
            y0 = y0.min(p.pos.1);
            y1 = y1.max(p.pos.1);
        }
        (x1 - x0, y1 - y0)
    }

    /// Largest distance between any two points.
    pub fn max_pairwise_extent(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max((a.pos.0 - b.pos.0).hypot(a.pos.1 - b.pos.1));
            }
        }
        best
    }

    /// Leading (`On`) / trailing (`Off`) assignment for a given velocity.
    pub fn polarity_map(&self, velocity: FlowVector) -> Vec<Polarity> {
        self.points
            .iter()
            .map(|p| leading_polarity(p.normal, velocity))
            .collect()
    }
}

fn leading_polarity(normal: (f64, f64), velocity: FlowVector) -> Polarity {
    if normal.0 * velocity.v_u + normal.1 * velocity.v_v >= 0.0 {
        Polarity::On
    } else {
        Polarity::Off
    }
}

fn circle(radius: f64) -> Vec<ContourPoint> {
    let n = (2.0 * PI * radius / CONTOUR_SPACING).ceil().max(3.0) as usize;
    (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            let (s, c) = a.sin_cos();
            ContourPoint { pos: (radius * c, radius * s), normal: (c, s) }
        })
        .collect()
}

fn rectangle(width: f64, height: f64) -> Vec<ContourPoint> {
    let (hw, hh) = (width / 2.0, height / 2.0);
    polygon(&[(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)])
}

/// Samples a closed polygon. Each point carries its edge's outward normal.
///
/// Points sit one per stratum of half the spacing, at a golden-ratio offset
/// inside it; the first stratum of each edge keeps its vertex. Evenly spaced points on a slanted edge would form a lattice
/// with a few sub-pixel phases, so whole rows of a projection would land
/// exactly on a rounding boundary; a real edge is continuous and has no such
/// lattice.
fn polygon(vertices: &[(f64, f64)]) -> Vec<ContourPoint> {
    let n = vertices.len() as f64;
    let centroid = vertices.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0 / n, acc.1 + v.1 / n));
    let mut points = Vec::new();
    for (k, &a) in vertices.iter().enumerate() {
        let b = vertices[(k + 1) % vertices.len()];
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        let mut normal = (dy / len, -dx / len);
        let mid = ((a.0 + b.0) / 2.0 - centroid.0, (a.1 + b.1) / 2.0 - centroid.1);
        if normal.0 * mid.0 + normal.1 * mid.1 < 0.0 {
            normal = (-normal.0, -normal.1);
        }
        let segments = (2.0 * len / CONTOUR_SPACING - 1e-9).ceil().max(1.0) as usize;
        for s in 0..segments {
            let jitter = (s as f64 * GOLDEN).fract();
            let f = (s as f64 + jitter) / segments as f64;
            points.push(ContourPoint { pos: (a.0 + f * dx, a.1 + f * dy), normal });
        }
    }
    points
}

/// Ideal lossless pendulum seen side-on; the image motion is horizontal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    /// Length in metres.
    pub length: f64,
    /// Release angle in radians.
    pub theta_max: f64,
    /// Gravitational acceleration in m/s^2.
    pub g: f64,
    pub pixels_per_meter: f64,
    /// Phase offset in radians; zero puts the velocity peak at `t = 0`.
    pub phase: f64,
}

impl Pendulum {
    /// Peak image speed the default scale maps to, px/s.
    pub const DEFAULT_PEAK_PX: f64 = 200.0;

    /// Pendulum with the default pixel scale (peak flow of 200 px/s).
    pub fn new(length: f64, theta_max: f64, g: f64) -> Result<Self> {
        let mut p = Pendulum { length, theta_max, g, pixels_per_meter: 1.0, phase: 0.0 };
        p.validate()?;
        p.pixels_per_meter = Self::DEFAULT_PEAK_PX / p.v_max();
        Ok(p)
    }

    /// L = 0.72 m released from 23 degrees under g = 9.82 m/s^2.
    pub fn reference() -> Self {
        Pendulum::new(0.72, 23f64.to_radians(), 9.82).expect("valid constants")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config { key: "pendulum".into(), message: m.into() });
        if !(self.length > 0.0) {
            return bad("length must be positive");
        }
        if !(self.theta_max > 0.0 && self.theta_max < PI / 2.0) {
            return bad("theta_max must lie in (0, pi/2)");
        }
        if !(self.g > 0.0 && self.pixels_per_meter > 0.0) {
            return bad("g and pixels_per_meter must be positive");
        }
        Ok(())
    }

    /// Peak bob speed, `sqrt(2 g L (1 - cos theta_max))`, in m/s.
    pub fn v_max(&self) -> f64 {
        (2.0 * self.g * self.length * (1.0 - self.theta_max.cos())).sqrt()
    }

    /// Small-angle period `2 pi sqrt(L / g)`, in seconds.
    pub fn period(&self) -> f64 {
        2.0 * PI * (self.length / self.g).sqrt()
    }

    /// Peak image speed in px/s.
    pub fn peak_flow(&self) -> f64 {
        self.pixels_per_meter * self.v_max()
    }

    fn omega(&self) -> f64 {
        2.0 * PI / self.period()
    }

    /// Signed horizontal image velocity at `t`, px/s.
    pub fn velocity(&self, t: f64) -> f64 {
        self.peak_flow() * (self.omega() * t + self.phase).cos()
    }

    /// Horizontal image displacement since `t = 0`, px.
    pub fn displacement(&self, t: f64) -> f64 {
        let amp = self.peak_flow() / self.omega();
        amp * ((self.omega() * t + self.phase).sin() - self.phase.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionModel {
    Constant(FlowVector),
    Pendulum(Pendulum),
    /// Rigid rotation about `center` (frame coordinates) at `omega` rad/s.
    Rotation { center: (f64, f64), omega: f64 },
}

impl MotionModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            MotionModel::Constant(v) if !v.is_finite() => Err(Error::Config {
                key: "velocity".into(),
                message: "flow must be finite".into(),
            }),
            MotionModel::Constant(_) => Ok(()),
            MotionModel::Pendulum(p) => p.validate(),
            MotionModel::Rotation { omega, .. } if *omega == 0.0 || !omega.is_finite() => Err(Error::Config {
                key: "omega".into(),
                message: "rotation rate must be finite and non-zero".into(),
            }),
            MotionModel::Rotation { .. } => Ok(()),
        }
    }

    /// Structure-level flow at `t` seconds. A rotation has no single image
    /// velocity; it reports the (zero) flow of its centre.
    pub fn flow_at(&self, t: f64) -> FlowVector {
        match self {
            MotionModel::Constant(v) => *v,
            MotionModel::Pendulum(p) => FlowVector::new(p.velocity(t), 0.0),
            MotionModel::Rotation { .. } => FlowVector::ZERO,
        }
    }

    /// Position at `t` of a point that started at `p0` (frame coordinates).
    pub fn position(&self, p0: (f64, f64), t: f64) -> (f64, f64) {
        match self {
            MotionModel::Constant(v) => (p0.0 + v.v_u * t, p0.1 + v.v_v * t),
            MotionModel::Pendulum(p) => (p0.0 + p.displacement(t), p0.1),
            MotionModel::Rotation { center, omega } => {
                let (s, c) = (omega * t).sin_cos();
                let (dx, dy) = (p0.0 - center.0, p0.1 - center.1);
                (center.0 + c * dx - s * dy, center.1 + s * dx + c * dy)
            }
        }
    }

    /// Velocity at `t` of a point that started at `p0`.
    pub fn velocity_at(&self, p0: (f64, f64), t: f64) -> FlowVector {
        match self {
            MotionModel::Rotation { center, omega } => {
                let p = self.position(p0, t);
                FlowVector::new(-omega * (p.1 - center.1), omega * (p.0 - center.0))
            }
            _ => self.flow_at(t),
        }
    }

    fn rotate_normal(&self, n: (f64, f64), t: f64) -> (f64, f64) {
        match self {
            MotionModel::Rotation { omega, .. } => {
                let (s, c) = (omega * t).sin_cos();
                (c * n.0 - s * n.1, s * n.0 + c * n.1)
            }
            _ => n,
        }
    }
}

/// Ground-truth flow for a scene.
///
/// Each event of the generated stream has a matching label (same index)
/// holding its structure and the velocity of the contour point that fired.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub models: Vec<MotionModel>,
    pub labels: Vec<GtLabel>,
    pub duration: f64,
    /// Some contour point left the sensor during the interval.
    pub clipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtLabel {
    /// `None` for background noise.
    pub structure: Option<u32>,
    pub flow: FlowVector,
}

impl GroundTruth {
    pub fn structure_count(&self) -> usize {
        self.models.len()
    }

    /// Flow of `structure` at `t` seconds.
    pub fn flow_at(&self, structure: usize, t: f64) -> Option<FlowVector> {
        self.models.get(structure).map(|m| m.flow_at(t))
    }

    /// Pairs each label with its event's timestamp.
    pub fn records(&self, events: &[Event]) -> Result<Vec<GtRecord>> {
        if events.len() != self.labels.len() {
            return Err(Error::Consistency(format!(
                "{} events but {} ground-truth labels",
                events.len(),
                self.labels.len()
            )));
        }
        Ok(events
            .iter()
            .zip(&self.labels)
            .map(|(e, l)| GtRecord { t: e.t, flow: l.flow, structure: l.structure })
            .collect())
    }

    /// Writes one `t v_u v_v structure_id` line per event (`-1` for noise).
    pub fn write<W: Write>(&self, events: &[Event], mut sink: W) -> Result<()> {
        if events.len() != self.labels.len() {
            return Err(Error::Consistency(format!(
                "{} events but {} ground-truth labels",
                events.len(),
                self.labels.len()
            )));
        }
        writeln!(sink, "# t v_u v_v structure_id")?;
        for (e, l) in events.iter().zip(&self.labels) {
            let id = l.structure.map_or(-1, |s| s as i64);
            writeln!(sink, "{} {} {} {}", e.t, l.flow.v_u, l.flow.v_v, id)?;
        }
        Ok(())
    }
}

/// One line of a ground-truth sidecar file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRecord {
    pub t: u64,
    pub flow: FlowVector,
    pub structure: Option<u32>,
}

/// Reads a sidecar written by [`GroundTruth::write`].
pub fn read_ground_truth<R: BufRead>(source: R) -> Result<Vec<GtRecord>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let err = |column: usize, message: String| Error::Parse { line: idx + 1, column, message };
        if fields.len() != 4 {
            return Err(err(1, format!("expected 4 fields, found {}", fields.len())));
        }
        let t = fields[0].parse::<u64>().map_err(|e| err(1, e.to_string()))?;
        let vu = fields[1].parse::<f64>().map_err(|e| err(2, e.to_string()))?;
        let vv = fields[2].parse::<f64>().map_err(|e| err(3, e.to_string()))?;
        let id = fields[3].parse::<i64>().map_err(|e| err(4, e.to_string()))?;
        out.push(GtRecord {
            t,
            flow: FlowVector::new(vu, vv),
            structure: u32::try_from(id).ok(),
        });
    }
    Ok(out)
}

/// A contour placed at `origin` (frame coordinates) and set in motion.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub contour: ShapeContour,
    pub origin: (f64, f64),
    pub motion: MotionModel,
}

impl SceneObject {
    pub fn new(contour: ShapeContour, origin: (f64, f64), motion: MotionModel) -> Self {
        SceneObject { contour, origin, motion }
    }

    fn start(&self, i: usize) -> (f64, f64) {
        let p = self.contour.points[i].pos;
        (self.origin.0 + p.0, self.origin.1 + p.1)
    }

    fn max_speed(&self) -> f64 {
        match self.motion {
            MotionModel::Constant(v) => v.magnitude(),
            MotionModel::Pendulum(p) => p.peak_flow(),
            MotionModel::Rotation { center, omega } => {
                let r = (0..self.contour.len())
                    .map(|i| {
                        let p = self.start(i);
                        (p.0 - center.0).hypot(p.1 - center.1)
                    })
                    .fold(0.0, f64::max);
                omega.abs() * r
            }
        }
    }
}

/// Sensor-model knobs. The defaults give the ideal sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise {
    /// Uniform background events per second over the whole array.
    pub noise_rate: f64,
    /// Uniform timestamp jitter of up to +/- this many microseconds.
    pub jitter_us: u64,
    /// Events closer than this to the previous one at the same pixel are dropped.
    pub refractory_us: u64,
    pub seed: u64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise { noise_rate: 0.0, jitter_us: 0, refractory_us: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub noise: SensorNoise,
}

impl Scene {
    pub fn new(objects: Vec<SceneObject>) -> Self {
        Scene { objects, noise: SensorNoise::default() }
    }

    pub fn with_noise(mut self, noise: SensorNoise) -> Self {
        self.noise = noise;
        self
    }

    /// Simulates the scene for `duration` seconds.
    pub fn generate(&self, duration: f64, geometry: SensorGeometry) -> Result<(EventStream, GroundTruth)> {
        if !(duration >= 0.0 && duration.is_finite()) {
            return Err(Error::Config { key: "duration".into(), message: format!("invalid duration {duration}") });
        }
        let mut tagged: Vec<(Event, GtLabel)> = Vec::new();
        let mut clipped = false;
        for (id, obj) in self.objects.iter().enumerate() {
            obj.motion.validate()?;
            let (events, clip) = object_events(obj, duration, geometry, id as u32);
            if events.is_empty() {
                log::warn!("structure {id} produced no events over {duration} s");
            }
            clipped |= clip;
            tagged.extend(events);
        }
        if clipped {
            log::warn!("part of the scene left the {}x{} sensor", geometry.width, geometry.height);
        }

        let duration_us = (duration * 1e6).round() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed);
        if self.noise.noise_rate > 0.0 {
            let count = (self.noise.noise_rate * duration).round() as usize;
            for _ in 0..count {
                let e = Event::new(
                    rng.gen_range(0..geometry.width),
                    rng.gen_range(0..geometry.height),
                    rng.gen_range(0..=duration_us),
                    if rng.gen_bool(0.5) { Polarity::On } else { Polarity::Off },
                );
                tagged.push((e, GtLabel { structure: None, flow: FlowVector::ZERO }));
            }
        }
        if self.noise.jitter_us > 0 {
            let j = self.noise.jitter_us as i64;
            for (e, _) in &mut tagged {
                let t = e.t as i64 + rng.gen_range(-j..=j);
                e.t = t.clamp(0, duration_us as i64) as u64;
            }
        }

        tagged.sort_by_key(|(e, l)| (e.t, l.structure.map_or(u32::MAX, |s| s), e.v, e.u, e.polarity));

        if self.noise.refractory_us > 0 {
            let mut last: FxHashMap<(u16, u16), u64> = FxHashMap::default();
            tagged.retain(|(e, _)| match last.get(&(e.u, e.v)) {
                Some(&prev) if e.t - prev < self.noise.refractory_us => false,
                _ => {
                    last.insert((e.u, e.v), e.t);
                    true
                }
            });
        }

        let (events, labels): (Vec<Event>, Vec<GtLabel>) = tagged.into_iter().unzip();
        let stream = EventStream { geometry, events };
        let gt = GroundTruth {
            models: self.objects.iter().map(|o| o.motion).collect(),
            labels,
            duration,
            clipped,
        };
        Ok((stream, gt))
    }
}

/// Single-structure convenience wrapper around [`Scene::generate`].
pub fn generate_events(
    contour: &ShapeContour,
    origin: (f64, f64),
    model: MotionModel,
    duration: f64,
    geometry: SensorGeometry,
) -> Result<(EventStream, GroundTruth)> {
    Scene::new(vec![SceneObject::new(contour.clone(), origin, model)]).generate(duration, geometry)
}

type Pixel = (i64, i64);

#[inline]
fn pixel_of(p: (f64, f64)) -> Pixel {
    (p.0.floor() as i64, p.1.floor() as i64)
}

/// Steps the object through time and fires a pixel whenever contour points of
/// one polarity newly occupy it. Leading and trailing edges are tracked
/// separately so both sides of a thin object fire. Returns the events and
/// whether any fell off-sensor.
fn object_events(
    obj: &SceneObject,
    duration: f64,
    geometry: SensorGeometry,
    structure: u32,
) -> (Vec<(Event, GtLabel)>, bool) {
    type Key = (Pixel, Polarity);

    let speed = obj.max_speed();
    if speed <= 0.0 || duration <= 0.0 || obj.contour.is_empty() {
        return (Vec::new(), false);
    }
    let steps = (duration * speed / MAX_STEP_PX).ceil().max(1.0) as usize;
    let dt = duration / steps as f64;
    let starts: Vec<(f64, f64)> = (0..obj.contour.len()).map(|i| obj.start(i)).collect();
    let polarity_at = |i: usize, t: f64| {
        let normal = obj.motion.rotate_normal(obj.contour.points[i].normal, t);
        leading_polarity(normal, obj.motion.velocity_at(starts[i], t))
    };

    let mut current: Vec<Key> = starts
        .iter()
        .enumerate()
        .map(|(i, &p)| (pixel_of(p), polarity_at(i, 0.0)))
        .collect();
    let mut occupancy: FxHashMap<Key, u32> = FxHashMap::default();
    for key in &current {
        *occupancy.entry(*key).or_insert(0) += 1;
    }

    let duration_us = (duration * 1e6).round() as u64;
    let mut out = Vec::new();
    let mut clipped = false;
    let mut changed: Vec<(usize, Pixel)> = Vec::new();
    let mut vacated: FxHashSet<Key> = FxHashSet::default();
    // key -> (crossing time, contour point)
    let mut entered: FxHashMap<Key, (f64, usize)> = FxHashMap::default();

    for k in 1..=steps {
        let t0 = (k - 1) as f64 * dt;
        let t1 = if k == steps { duration } else { k as f64 * dt };
        changed.clear();
        for (i, &p0) in starts.iter().enumerate() {
            let px = pixel_of(obj.motion.position(p0, t1));
            if px != current[i].0 {
                changed.push((i, px));
            }
        }
        if changed.is_empty() {
            continue;
        }
        vacated.clear();
        for &(i, _) in &changed {
            let old = current[i];
            if let Some(c) = occupancy.get_mut(&old) {
                *c -= 1;
                if *c == 0 {
                    occupancy.remove(&old);
                }
            }
            vacated.insert(old);
        }
        entered.clear();
        for &(i, px) in &changed {
            let key = (px, polarity_at(i, t1));
            let count = occupancy.entry(key).or_insert(0);
            let fresh = *count == 0 && !vacated.contains(&key);
            *count += 1;
            if fresh || entered.contains_key(&key) {
                let tc = crossing_time(&obj.motion, starts[i], current[i].0, t0, t1);
                let slot = entered.entry(key).or_insert((tc, i));
                if tc < slot.0 {
                    *slot = (tc, i);
                }
            }
            current[i] = key;
        }
        let mut fired: Vec<(Key, (f64, usize))> = entered.drain().collect();
        fired.sort_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)));
        for (((u, v), polarity), (tc, i)) in fired {
            if !geometry.contains_i(u, v) {
                clipped = true;
                continue;
            }
            let t_us = ((tc * 1e6).round() as u64).min(duration_us);
            out.push((
                Event::new(u as u16, v as u16, t_us, polarity),
                GtLabel { structure: Some(structure), flow: obj.motion.velocity_at(starts[i], tc) },
            ));
        }
    }
    (out, clipped)
}

/// Earliest time in `(t0, t1]` at which the point leaves pixel `from`.
fn crossing_time(model: &MotionModel, p0: (f64, f64), from: Pixel, t0: f64, t1: f64) -> f64 {
    let (mut lo, mut hi) = (t0, t1);
    for _ in 0..40 {
        if hi - lo < 1e-8 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if pixel_of(model.position(p0, mid)) == from {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

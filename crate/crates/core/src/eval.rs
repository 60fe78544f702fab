//! Error metrics against ground truth and their summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::engine::FlowLabeledEvent;
use crate::error::{Error, Result, UndefinedReason};
use crate::event::{parse_err, Event, Fields, SensorGeometry};
use crate::projection::FlowVector;
use crate::synth::{GtRecord, Pendulum};

/// Error of one labeled event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowError {
    /// Signed, percent of the true magnitude.
    pub magnitude_pct: f64,
    /// Unsigned, `[0, 180]`.
    pub angle_deg: f64,
    /// Seconds.
    pub t: f64,
    pub segment: Option<u32>,
}

/// `100 (|est| - |gt|) / |gt|`.
pub fn magnitude_pct_error(est: FlowVector, gt: FlowVector) -> Result<f64> {
    let g = gt.magnitude();
    if g == 0.0 {
        return Err(Error::Undefined(UndefinedReason::ZeroGroundTruth));
    }
    Ok(100.0 * (est.magnitude() - g) / g)
}

/// Unsigned angle between the two vectors in degrees.
pub fn angle_error(est: FlowVector, gt: FlowVector) -> Result<f64> {
    if gt.magnitude() == 0.0 {
        return Err(Error::Undefined(UndefinedReason::ZeroGroundTruth));
    }
    if est.magnitude() == 0.0 {
        return Err(Error::Undefined(UndefinedReason::ZeroEstimate));
    }
    let cross = est.v_u * gt.v_v - est.v_v * gt.v_u;
    let dot = est.v_u * gt.v_u + est.v_v * gt.v_v;
    Ok(cross.atan2(dot).abs().to_degrees())
}

/// Image speed of a target moving at `v_r` m/s across a field of view
/// `w_fov` metres wide imaged onto `w_c` pixels.
pub fn robot_gt(w_c: f64, v_r: f64, w_fov: f64) -> f64 {
    w_c * v_r / w_fov
}

/// Image speed of the pendulum bob at `t` seconds.
pub fn pendulum_gt(p: &Pendulum, t: f64) -> f64 {
    p.peak_flow() * (2.0 * std::f64::consts::PI * t / p.period() + p.phase).cos().abs()
}

/// One line of a flow file: `t u v s segment v_u v_v`.
///
/// Engine output carries a flow exactly when it carries a segment; the LK
/// baseline writes segment `-1` with a flow, or `nan nan` when it has none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowRecord {
    pub event: Event,
    pub segment: Option<u32>,
    pub flow: Option<FlowVector>,
}

impl From<&FlowLabeledEvent> for FlowRecord {
    fn from(l: &FlowLabeledEvent) -> Self {
        FlowRecord { event: l.event, segment: l.segment(), flow: l.flow() }
    }
}

impl FlowRecord {
    pub fn decode(record: &str, line: usize, geometry: SensorGeometry) -> Result<Self> {
        let mut fields = Fields::new(record);
        for name in ["timestamp", "u", "v"] {
            fields.next_field(line, name)?;
        }
        let (sc, s) = fields.next_field(line, "polarity")?;
        let event = Event::decode(&record[..sc - 1 + s.len()], line, geometry)?;
        let (col, seg) = fields.next_field(line, "segment")?;
        let segment = match seg.parse::<i64>() {
            Ok(-1) => None,
            Ok(id) if (0..=u32::MAX as i64).contains(&id) => Some(id as u32),
            _ => return Err(parse_err(line, col, format!("segment `{seg}` must be -1 or a non-negative id"))),
        };
        let mut float = |name: &str| -> Result<f64> {
            let (col, x) = fields.next_field(line, name)?;
            x.parse::<f64>().map_err(|e| parse_err(line, col, format!("{name} `{x}`: {e}")))
        };
        let (v_u, v_v) = (float("v_u")?, float("v_v")?);
        if let Some((col, extra)) = fields.next() {
            return Err(parse_err(line, col, format!("unexpected trailing field `{extra}`")));
        }
        let flow = FlowVector::new(v_u, v_v);
        Ok(FlowRecord { event, segment, flow: flow.is_finite().then_some(flow) })
    }
}

impl fmt::Display for FlowRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seg = self.segment.map_or(-1, |s| s as i64);
        match self.flow {
            Some(v) => write!(f, "{} {} {} {}", self.event, seg, v.v_u, v.v_v),
            None => write!(f, "{} {} nan nan", self.event, seg),
        }
    }
}

/// Writes records after a `geometry` header.
pub fn write_flow_records<W: Write>(geometry: SensorGeometry, records: &[FlowRecord], mut sink: W) -> Result<()> {
    writeln!(sink, "geometry {} {}", geometry.width, geometry.height)?;
    for r in records {
        writeln!(sink, "{r}")?;
    }
    Ok(())
}

/// Reads a flow file. A `geometry W H` header overrides `geometry`.
pub fn read_flow_records<R: BufRead>(source: R, geometry: SensorGeometry) -> Result<(SensorGeometry, Vec<FlowRecord>)> {
    let mut geometry = geometry;
    let mut out: Vec<FlowRecord> = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        if out.is_empty() && body.starts_with("geometry") {
            geometry = crate::event::EventStream::read(body.as_bytes(), geometry)?.geometry;
            continue;
        }
        let rec = FlowRecord::decode(body, idx + 1, geometry)?;
        if let Some(prev) = out.last() {
            if rec.event.t < prev.event.t {
                return Err(Error::Ordering { index: out.len(), previous: prev.event.t, current: rec.event.t });
            }
        }
        out.push(rec);
    }
    Ok((geometry, out))
}

/// Per-event errors of a labeled run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub errors: Vec<FlowError>,
    /// Events considered (at or after the start time).
    pub total: usize,
    pub labeled: usize,
    /// Labeled events whose error is undefined (noise or zero flow).
    pub undefined: usize,
}

impl Evaluation {
    /// Fraction of considered events that carry a label.
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.labeled as f64 / self.total as f64
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.magnitude_pct).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.errors.iter().map(|e| e.angle_deg).collect()
    }
}

/// Compares each record carrying a flow, at or after `since_us`, with its
/// ground truth. `gt` must line up with `records` one to one.
pub fn evaluate(records: &[FlowRecord], gt: &[GtRecord], since_us: u64) -> Result<Evaluation> {
    if records.len() != gt.len() {
        return Err(Error::Consistency(format!("{} flow records but {} ground-truth records", records.len(), gt.len())));
    }
    let mut out = Evaluation::default();
    for (k, (l, g)) in records.iter().zip(gt).enumerate() {
        if l.event.t != g.t {
            return Err(Error::Consistency(format!("record {k}: event at {} but ground truth at {}", l.event.t, g.t)));
        }
        if l.event.t < since_us {
            continue;
        }
        out.total += 1;
        let Some(flow) = l.flow else { continue };
        out.labeled += 1;
        if g.structure.is_none() {
            out.undefined += 1;
            continue;
        }
        match (magnitude_pct_error(flow, g.flow), angle_error(flow, g.flow)) {
            (Ok(magnitude_pct), Ok(angle_deg)) => out.errors.push(FlowError {
                magnitude_pct,
                angle_deg,
                t: l.event.t_secs(),
                segment: l.segment,
            }),
            _ => out.undefined += 1,
        }
    }
    Ok(out)
}

/// Counts of `(segment, structure)` pairs over labeled events.
pub fn confusion(labeled: &[FlowRecord], gt: &[GtRecord]) -> BTreeMap<(u32, Option<u32>), usize> {
    let mut out = BTreeMap::new();
    for (l, g) in labeled.iter().zip(gt) {
        if let Some(seg) = l.segment {
            *out.entry((seg, g.structure)).or_insert(0) += 1;
        }
    }
    out
}

/// Share of structure events labeled with a segment that belongs mostly to a
/// different structure. Noise events are ignored.
pub fn cross_label_rate(labeled: &[FlowRecord], gt: &[GtRecord]) -> f64 {
    let table = confusion(labeled, gt);
    let mut owner: BTreeMap<u32, (usize, Option<u32>)> = BTreeMap::new();
    for (&(seg, structure), &n) in &table {
        if structure.is_some() {
            let best = owner.entry(seg).or_insert((0, None));
            if n > best.0 {
                *best = (n, structure);
            }
        }
    }
    let (mut cross, mut total) = (0, 0);
    for (&(seg, structure), &n) in &table {
        if structure.is_none() {
            continue;
        }
        total += n;
        if owner.get(&seg).map(|o| o.1) != Some(structure) {
            cross += n;
        }
    }
    if total == 0 {
        0.0
    } else {
        cross as f64 / total as f64
    }
}

/// Pearson correlation of two equally long series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Consistency(format!("series lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Empty("correlation needs two samples"));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(UndefinedReason::ZeroEstimate));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Fixed-width histogram; bin `k` covers `[origin + k w, origin + (k+1) w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub origin: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(Error::Config { key: "bin_width".into(), message: "must be positive".into() });
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Empty("histogram of no finite values"));
        }
        let origin = (lo / bin_width).floor() * bin_width;
        let bins = ((hi - origin) / bin_width).floor() as usize + 1;
        let mut counts = vec![0; bins];
        for v in values {
            let k = (((v - origin) / bin_width).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { bin_width, origin, counts })
    }

    /// `lo,hi,count` rows.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "lo,hi,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            let lo = self.origin + k as f64 * self.bin_width;
            writeln!(sink, "{},{},{}", lo, lo + self.bin_width, c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub histogram: Histogram,
}

impl Summary {
    pub fn write<W: Write>(&self, prefix: &str, mut sink: W) -> Result<()> {
        writeln!(sink, "{prefix}_count={}", self.count)?;
        writeln!(sink, "{prefix}_mean={}", self.mean)?;
        writeln!(sink, "{prefix}_median={}", self.median)?;
        writeln!(sink, "{prefix}_std={}", self.std_dev)?;
        Ok(())
    }
}

pub fn summarize(values: &[f64], bin_width: f64) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("no errors to summarise"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        count: values.len(),
        mean,
        median: median(values),
        std_dev: var.sqrt(),
        histogram: Histogram::build(values, bin_width)?,
    })
}

/// Middle value; the mean of the two middle values for even lengths.
/// NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

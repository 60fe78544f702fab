//! PPM frames of labeled events.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use sofas::eval::FlowRecord;
use sofas::{FlowVector, SensorGeometry};

/// Pixels hit by events without a flow.
pub const UNLABELED: [u8; 3] = [96, 96, 96];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    /// Hue from direction, saturation from magnitude.
    Flow,
    /// One hue per segment id.
    Segment,
}

impl FromStr for ColorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flow" => Ok(ColorMode::Flow),
            "segment" => Ok(ColorMode::Segment),
            _ => Err(format!("unknown color mode `{s}` (flow or segment)")),
        }
    }
}

impl fmt::Display for ColorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorMode::Flow => "flow",
            ColorMode::Segment => "segment",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub frame_us: u64,
    /// Magnitude at which saturation tops out, px/s.
    pub v_sat: f64,
    pub mode: ColorMode,
}

/// `h` in degrees, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |k: f64| ((k + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Color wheel: hue is the flow direction, saturation its magnitude over
/// `v_sat` (clamped to 1).
pub fn flow_color(flow: FlowVector, v_sat: f64) -> [u8; 3] {
    let hue = flow.v_v.atan2(flow.v_u).to_degrees();
    let sat = (flow.magnitude() / v_sat).min(1.0);
    hsv_to_rgb(hue, sat, 1.0)
}

/// Hues spaced by the golden angle so neighbouring ids differ.
pub fn segment_color(id: u32) -> [u8; 3] {
    hsv_to_rgb(id as f64 * 137.507_764, 0.85, 1.0)
}

pub fn record_color(r: &FlowRecord, cfg: &RenderConfig) -> [u8; 3] {
    match (cfg.mode, r.segment, r.flow) {
        (ColorMode::Segment, Some(id), _) => segment_color(id),
        (ColorMode::Flow, _, Some(f)) => flow_color(f, cfg.v_sat),
        _ => UNLABELED,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub start_us: u64,
    pub width: u16,
    pub height: u16,
    pub pixels: Vec<[u8; 3]>,
}

impl Frame {
    fn blank(index: usize, start_us: u64, g: SensorGeometry) -> Self {
        Frame { index, start_us, width: g.width, height: g.height, pixels: vec![[0; 3]; g.pixel_count()] }
    }

    #[cfg(test)]
    pub fn pixel(&self, u: u16, v: u16) -> [u8; 3] {
        self.pixels[v as usize * self.width as usize + u as usize]
    }

    /// Binary `P6`.
    pub fn write_ppm<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        write!(sink, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        sink.write_all(&bytes)
    }
}

/// Cuts the records into frames of `cfg.frame_us` and hands each to `sink`,
/// empty intervals included. The newest event at a pixel sets its color.
/// No records give no frames.
pub fn render<E>(
    geometry: SensorGeometry,
    records: &[FlowRecord],
    cfg: &RenderConfig,
    mut sink: impl FnMut(Frame) -> Result<(), E>,
) -> Result<usize, E> {
    let (Some(first), Some(last)) = (records.first(), records.last()) else { return Ok(0) };
    let k0 = first.event.t / cfg.frame_us;
    let k1 = last.event.t / cfg.frame_us;
    let mut rest = records;
    for k in k0..=k1 {
        let index = (k - k0) as usize;
        let end = (k + 1) * cfg.frame_us;
        let n = rest.partition_point(|r| r.event.t < end);
        let mut frame = Frame::blank(index, k * cfg.frame_us, geometry);
        for r in &rest[..n] {
            frame.pixels[r.event.v as usize * geometry.width as usize + r.event.u as usize] = record_color(r, cfg);
        }
        rest = &rest[n..];
        sink(frame)?;
    }
    Ok((k1 - k0 + 1) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sofas::{Event, Polarity};

    const CFG: RenderConfig = RenderConfig { frame_us: 1000, v_sat: 100.0, mode: ColorMode::Flow };

    fn rec(t: u64, u: u16, flow: Option<(f64, f64)>, segment: Option<u32>) -> FlowRecord {
        FlowRecord {
            event: Event::new(u, 0, t, Polarity::On),
            segment,
            flow: flow.map(|(a, b)| FlowVector::new(a, b)),
        }
    }

    #[test]
    fn primary_hues() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv_to_rgb(-120.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv_to_rgb(77.0, 0.0, 1.0), [255, 255, 255]);
    }

    #[test]
    fn saturation_follows_magnitude_up_to_the_clamp() {
        assert_eq!(flow_color(FlowVector::new(100.0, 0.0), 100.0), [255, 0, 0]);
        assert_eq!(flow_color(FlowVector::new(400.0, 0.0), 100.0), [255, 0, 0]);
        assert_eq!(flow_color(FlowVector::new(50.0, 0.0), 100.0), [255, 128, 128]);
        assert_eq!(flow_color(FlowVector::ZERO, 100.0), [255, 255, 255]);
        assert_eq!(flow_color(FlowVector::new(0.0, 100.0), 100.0), hsv_to_rgb(90.0, 1.0, 1.0));
    }

    #[test]
    fn empty_input_gives_no_frames() {
        let n = render(SensorGeometry::DAVIS240, &[], &CFG, |_| Err("called")).unwrap();
        assert_eq!(n, 0);
    }

    #[test]
    fn frames_cover_every_interval() {
        let g = SensorGeometry::new(4, 1).unwrap();
        let records = [rec(1500, 0, Some((100.0, 0.0)), Some(0)), rec(1900, 1, None, None), rec(3200, 2, None, None)];
        let mut frames = Vec::new();
        let n = render(g, &records, &CFG, |f| {
            frames.push(f);
            Ok::<_, ()>(())
        })
        .unwrap();
        assert_eq!(n, 3);
        assert_eq!(frames.iter().map(|f| f.start_us).collect::<Vec<_>>(), [1000, 2000, 3000]);
        assert_eq!(frames[0].pixel(0, 0), [255, 0, 0]);
        assert_eq!(frames[0].pixel(1, 0), UNLABELED);
        assert!(frames[1].pixels.iter().all(|p| *p == [0; 3]));
        assert_eq!(frames[2].pixel(2, 0), UNLABELED);
    }

    #[test]
    fn segment_mode_colors_by_id() {
        let cfg = RenderConfig { mode: ColorMode::Segment, ..CFG };
        assert_eq!(record_color(&rec(0, 0, Some((1.0, 0.0)), Some(3)), &cfg), segment_color(3));
        assert_eq!(record_color(&rec(0, 0, Some((1.0, 0.0)), None), &cfg), UNLABELED);
        assert_ne!(segment_color(0), segment_color(1));
    }

    #[test]
    fn ppm_layout() {
        let mut f = Frame::blank(0, 0, SensorGeometry::new(2, 1).unwrap());
        f.pixels[1] = [1, 2, 3];
        let mut out = Vec::new();
        f.write_ppm(&mut out).unwrap();
        assert_eq!(out, b"P6\n2 1\n255\n\x00\x00\x00\x01\x02\x03");
    }
}

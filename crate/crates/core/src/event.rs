//! Event representation and the plain-text stream format.
//!
//! One event per line, `t u v s`, with `t` in microseconds and `s` either `1`
//! or `-1`. Lines starting with `#` are comments. The first non-comment line
//! may declare the sensor size as `geometry W H`.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Sign of the intensity change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    /// Intensity decrease, `-1`.
    Off,
    /// Intensity increase, `+1`.
    On,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> i32 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    /// Index into per-polarity tables (`Off` = 0, `On` = 1).
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Polarity::Off => 0,
            Polarity::On => 1,
        }
    }
}

/// A single DVS event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Pixel column.
    pub u: u16,
    /// Pixel row.
    pub v: u16,
    /// Timestamp in microseconds.
    pub t: u64,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(u: u16, v: u16, t: u64, polarity: Polarity) -> Self {
        Event { u, v, t, polarity }
    }

    /// Timestamp in seconds.
    #[inline]
    pub fn t_secs(&self) -> f64 {
        self.t as f64 * 1e-6
    }

    #[inline]
    pub fn sign(&self) -> i32 {
        self.polarity.sign()
    }

    /// Parses one `t u v s` record. `line` is only used for error messages.
    pub fn decode(record: &str, line: usize, geometry: SensorGeometry) -> Result<Event> {
        let mut fields = Fields::new(record);
        let (col, t) = fields.next_field(line, "timestamp")?;
        let t = t.parse::<u64>().map_err(|e| parse_err(line, col, format!("timestamp `{t}`: {e}")))?;
        let (col, u) = fields.next_field(line, "u")?;
        let u = u.parse::<u16>().map_err(|e| parse_err(line, col, format!("u `{u}`: {e}")))?;
        let (col, v) = fields.next_field(line, "v")?;
        let v = v.parse::<u16>().map_err(|e| parse_err(line, col, format!("v `{v}`: {e}")))?;
        let (col, s) = fields.next_field(line, "polarity")?;
        let polarity = s
            .parse::<i64>()
            .ok()
            .and_then(Polarity::from_sign)
            .ok_or_else(|| parse_err(line, col, format!("invalid polarity `{s}`, expected 1 or -1")))?;
        if let Some((col, extra)) = fields.next() {
            return Err(parse_err(line, col, format!("unexpected trailing field `{extra}`")));
        }
        if !geometry.contains(u, v) {
            return Err(Error::Geometry(format!(
                "line {line}: event ({u}, {v}) outside {}x{} sensor",
                geometry.width, geometry.height
            )));
        }
        Ok(Event { u, v, t, polarity })
    }

    /// Formats the event as a `t u v s` record (no trailing newline).
    pub fn encode(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.t, self.u, self.v, self.sign())
    }
}

pub(crate) fn parse_err(line: usize, column: usize, message: String) -> Error {
    Error::Parse { line, column, message }
}

/// Whitespace-separated fields with their 1-based column.
pub(crate) struct Fields<'a> {
    rest: &'a str,
    offset: usize,
}

impl<'a> Fields<'a> {
    pub(crate) fn new(s: &'a str) -> Self {
        Fields { rest: s, offset: 0 }
    }

    pub(crate) fn next_field(&mut self, line: usize, name: &str) -> Result<(usize, &'a str)> {
        let end_col = self.offset + self.rest.len() + 1;
        self.next()
            .ok_or_else(|| parse_err(line, end_col, format!("missing field `{name}`")))
    }
}

impl<'a> Iterator for Fields<'a> {
    type Item = (usize, &'a str);

    fn next(&mut self) -> Option<Self::Item> {
        let trimmed = self.rest.trim_start();
        self.offset += self.rest.len() - trimmed.len();
        if trimmed.is_empty() {
            self.rest = trimmed;
            return None;
        }
        let len = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
        let column = self.offset + 1;
        let (field, rest) = trimmed.split_at(len);
        self.offset += len;
        self.rest = rest;
        Some((column, field))
    }
}

/// Sensor array size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorGeometry {
    pub width: u16,
    pub height: u16,
}

impl SensorGeometry {
    /// DAVIS-240C sized array.
    pub const DAVIS240: SensorGeometry = SensorGeometry { width: 240, height: 180 };

    pub fn new(width: u16, height: u16) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!("sensor size must be positive, got {width}x{height}")));
        }
        Ok(SensorGeometry { width, height })
    }

    #[inline]
    pub fn contains(&self, u: u16, v: u16) -> bool {
        u < self.width && v < self.height
    }

    /// Whether an integer pixel (possibly negative) lies on the array.
    #[inline]
    pub fn contains_i(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && u < self.width as i64 && v < self.height as i64
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for SensorGeometry {
    fn default() -> Self {
        SensorGeometry::DAVIS240
    }
}

/// A time-ordered sequence of events from one sensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    pub geometry: SensorGeometry,
    pub events: Vec<Event>,
}

impl EventStream {
    /// Builds a stream, rejecting timestamp regressions.
    pub fn new(geometry: SensorGeometry, events: Vec<Event>) -> Result<Self> {
        check_order(&events)?;
        for e in &events {
            if !geometry.contains(e.u, e.v) {
                return Err(Error::Geometry(format!(
                    "event ({}, {}) outside {}x{} sensor",
                    e.u, e.v, geometry.width, geometry.height
                )));
            }
        }
        Ok(EventStream { geometry, events })
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        EventStream { geometry, events: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Reads a text stream. A `geometry W H` header overrides `geometry`.
    pub fn read<R: BufRead>(source: R, geometry: SensorGeometry) -> Result<Self> {
        let mut geometry = geometry;
        let mut events: Vec<Event> = Vec::new();
        let mut seen_record = false;
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            if !seen_record && body.starts_with("geometry") {
                geometry = parse_geometry(body, line_no)?;
                seen_record = true;
                continue;
            }
            seen_record = true;
            let e = Event::decode(body, line_no, geometry)?;
            if let Some(prev) = events.last() {
                if e.t < prev.t {
                    return Err(Error::Ordering { index: events.len(), previous: prev.t, current: e.t });
                }
            }
            events.push(e);
        }
        Ok(EventStream { geometry, events })
    }

    /// Writes the header line followed by one record per event.
    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "geometry {} {}", self.geometry.width, self.geometry.height)?;
        for e in &self.events {
            writeln!(sink, "{e}")?;
        }
        Ok(())
    }
}

fn parse_geometry(body: &str, line: usize) -> Result<SensorGeometry> {
    let mut fields = Fields::new(body);
    fields.next();
    let (col, w) = fields.next_field(line, "width")?;
    let w = w.parse::<u16>().map_err(|e| parse_err(line, col, format!("width `{w}`: {e}")))?;
    let (col, h) = fields.next_field(line, "height")?;
    let h = h.parse::<u16>().map_err(|e| parse_err(line, col, format!("height `{h}`: {e}")))?;
    SensorGeometry::new(w, h)
}

/// Fails with the index of the first event whose timestamp goes backwards.
pub fn check_order(events: &[Event]) -> Result<()> {
    for (i, pair) in events.windows(2).enumerate() {
        if pair[1].t < pair[0].t {
            return Err(Error::Ordering { index: i + 1, previous: pair[0].t, current: pair[1].t });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const G: SensorGeometry = SensorGeometry::DAVIS240;

    #[test]
    fn decode_examples() {
        assert_eq!(Event::decode("1000 10 5 1", 1, G).unwrap(), Event::new(10, 5, 1000, Polarity::On));
        assert_eq!(Event::decode("0 0 0 -1", 1, G).unwrap(), Event::new(0, 0, 0, Polarity::Off));
    }

    #[test]
    fn decode_rejects_bad_polarity() {
        match Event::decode("1000 10 5 2", 7, G) {
            Err(Error::Parse { line, column, message }) => {
                assert_eq!(line, 7);
                assert_eq!(column, 11);
                assert!(message.contains("polarity"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn decode_reports_column_of_bad_field() {
        match Event::decode("12  x 5 1", 3, G) {
            Err(Error::Parse { line: 3, column: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Event::decode("12 4 5", 1, G), Err(Error::Parse { .. })));
        assert!(matches!(Event::decode("12 4 5 1 9", 1, G), Err(Error::Parse { .. })));
        assert!(matches!(Event::decode("-3 4 5 1", 1, G), Err(Error::Parse { .. })));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        assert!(matches!(Event::decode("5 240 0 1", 1, G), Err(Error::Geometry(_))));
        assert!(matches!(Event::decode("5 0 180 1", 1, G), Err(Error::Geometry(_))));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(Event::new(10, 5, 1000, Polarity::On).encode(), "1000 10 5 1");
        assert_eq!(Event::new(0, 0, 0, Polarity::Off).encode(), "0 0 0 -1");
    }

    #[test]
    fn load_in_order() {
        let s = EventStream::read("1 0 0 1\n2 1 1 -1\n3 2 2 1\n".as_bytes(), G).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.events[2].t, 3);
    }

    #[test]
    fn load_rejects_regression() {
        let err = EventStream::read("5 0 0 1\n4 0 0 1\n".as_bytes(), G).unwrap_err();
        assert!(matches!(err, Error::Ordering { index: 1, previous: 5, current: 4 }), "{err:?}");
    }

    #[test]
    fn load_empty_and_comments() {
        assert!(EventStream::read("".as_bytes(), G).unwrap().is_empty());
        let s = EventStream::read("# hi\ngeometry 32 16\n\n# x\n9 31 15 -1\n".as_bytes(), G).unwrap();
        assert_eq!(s.geometry, SensorGeometry { width: 32, height: 16 });
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn geometry_must_be_positive() {
        assert!(SensorGeometry::new(0, 10).is_err());
        assert_eq!(SensorGeometry::default(), SensorGeometry { width: 240, height: 180 });
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (0u16..240, 0u16..180, any::<u64>(), any::<bool>()).prop_map(|(u, v, t, on)| {
            Event::new(u, v, t, if on { Polarity::On } else { Polarity::Off })
        })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(e in arb_event()) {
            prop_assert_eq!(Event::decode(&e.encode(), 1, G).unwrap(), e);
        }

        #[test]
        fn stream_round_trip_preserves_order(mut ts in proptest::collection::vec(0u64..1_000_000, 0..50)) {
            ts.sort_unstable();
            let events: Vec<Event> = ts.iter().enumerate()
                .map(|(i, &t)| Event::new((i % 240) as u16, (i % 180) as u16, t, Polarity::On))
                .collect();
            let stream = EventStream::new(G, events).unwrap();
            let mut buf = Vec::new();
            stream.write(&mut buf).unwrap();
            let back = EventStream::read(buf.as_slice(), SensorGeometry::new(1, 1).unwrap()).unwrap();
            prop_assert_eq!(back, stream);
        }
    }
}

pub mod baseline_lk;
pub mod engine;
pub mod error;
pub mod eval;
pub mod event;
pub mod flow_plane;
pub mod projection;
pub mod synth;
pub mod track_plane;

pub use error::{Error, Result};
pub use event::{Event, EventStream, Polarity, SensorGeometry};
pub use projection::{AccumulatorGrid, Cell, FlowVector};

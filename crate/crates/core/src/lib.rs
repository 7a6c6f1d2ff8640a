//! Algorithmic core of the rare-object self-training pipeline.
//!
//! Everything here is `no_std` + `alloc`: detection geometry and NMS,
//! label-augmented pseudo-labelling over a pluggable scoring backend,
//! instance compositing, the edge presence filter and event logic, the
//! trainable toy detector, metrics, and the sans-IO wire protocol.
//! File formats, sockets, the simulator and the CLI live in the `rads` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod cloud;
pub mod detector;
pub mod edge;
pub mod eval;
pub mod geom;
pub mod label;
pub mod math;
pub mod raster;
pub mod synth;
pub mod wire;

pub use geom::{BBox, ImageDims, ScoredBox};

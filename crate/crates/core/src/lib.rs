//! Moving-average PV ramp-rate smoothing with a hybrid-storage plant, a
//! framed plant/controller bus, and ramp-rate metrics.
//!
//! Layering, bottom-up: [`domain`] (series, scenario, battery parameters),
//! [`ramp`] (ramp rates, compliance, histograms), [`controller`] (the
//! smoothing algorithm), [`plant`] (battery and supply), [`bus`] (frames,
//! quantization, links, sessions), [`runner`] (co-simulation and artifacts).
//! [`ingest`] and [`synth`] produce input series.

pub mod bus;
pub mod controller;
pub mod domain;
pub mod ingest;
pub mod plant;
pub mod ramp;
pub mod runner;
pub mod synth;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

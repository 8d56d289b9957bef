//! Shade-loss estimation for photovoltaic systems from unlabeled power time
//! series.
//!
//! The pipeline turns a multi-year power series into a declination-binned
//! matrix of normalized daily profiles, splits that matrix into residual,
//! clear-sky, and shade components with a convex decomposition against a
//! precomputed clear-sky profile corpus, and converts the shade component
//! into per-bin and yearly energy losses. A synthetic generator with known
//! ground truth closes the loop for validation.

pub mod corpus;
pub mod error;
pub mod ingest;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod sd;
pub mod solar;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

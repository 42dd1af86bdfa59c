//! Differential SAR interferometry toolkit.
//!
//! The crate turns stacks of co-registered single-look-complex (SLC) images
//! into calibrated line-of-sight displacement time series sampled along a
//! polyline over a structure. The processing chain is:
//!
//! 1. [`catalog`]: acquisition inventory and consecutive master/slave pairing.
//! 2. [`interferometry`]: interferogram formation, flat-earth and topographic
//!    phase removal, coherence, Goldstein filtering and multilooking.
//! 3. [`unwrap`]: residue detection and minimum-cost-flow unwrapping, with a
//!    quality-guided region grower as a cross-check.
//! 4. [`displacement`]: phase to millimeters, reference calibration and
//!    cumulative series.
//! 5. [`profile`], [`ps`] and [`trend`]: along-line extraction, persistent
//!    scatterer selection and rate alerts.
//!
//! [`synth`] generates synthetic stacks with known deformation so that every
//! stage can be checked against ground truth, and [`pipeline`] wires the
//! stages into a reproducible end-to-end run.
//!
//! Sign convention: motion away from the sensor is negative displacement and
//! maps to positive interferometric phase through `d = -λ·φ / 4π`.

pub mod catalog;
pub mod displacement;
pub mod error;
pub mod interferometry;
pub mod phase;
pub mod pipeline;
pub mod profile;
pub mod ps;
pub mod raster;
pub mod synth;
pub mod trend;
pub mod unwrap;

pub use error::{Error, Result};
pub use raster::{ComplexRaster, GridMeta, Pixel, RasterKind, RealRaster};

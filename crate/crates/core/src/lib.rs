//! Dual-mode (reflectance / transmittance) multispectral imaging analysis.
//!
//! The crate covers the whole software side of a low-cost LED multispectral
//! imager used for food adulteration checks:
//!
//! - [`cube`], [`sample_io`], [`pgm`]: domain types and the on-disk sample format
//! - [`synth`]: a deterministic stand-in for the imaging chamber
//! - [`preprocess`]: dark subtraction, flat-field and spectral gains, bilateral filtering
//! - [`features`]: superpixel data matrices, merged-mode fusion, PCA and LDA
//! - [`models`]: stratified splits, five classifiers and confusion matrices
//! - [`divergence`]: KL-divergence adulteration curves and their linear map
//! - [`devicelink`]: controller firmware and capture handshake simulation
//! - [`harness`]: reliability reports and end-to-end case studies

// Parameter guards are written `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cube;
pub mod devicelink;
pub mod divergence;
pub mod error;
pub mod features;
pub mod harness;
pub mod models;
pub mod pgm;
pub mod preprocess;
mod rng;
pub mod sample_io;
pub mod synth;

pub use cube::{BandSet, Dataset, Domain, Frame, Label, Mode, Sample, SpectralCube};
pub use error::{Error, Result};

//! Neural acoustic context fields: rendering binaural room impulse
//! responses from boundary contexts with an implicit neural field.
//!
//! The pipeline, bottom up:
//!
//! - [`dsp`], [`matrix`], [`tape`]: STFT, positional encoding, dense kernels
//!   and a reverse-mode autodiff tape.
//! - [`room`], [`dataset`], [`wav`]: the image-source oracle, boundary-context
//!   extraction and on-disk datasets.
//! - [`context`], [`field`], [`model`], [`params`]: encoders, the field MLP,
//!   the temporal correlation stack and checkpoints.
//! - [`losses`], [`adam`], [`train`]: the multi-scale objective and the
//!   two-stage training harness.
//! - [`metrics`], [`plots`], [`cli`]: evaluation, plot-data export and the
//!   `nacf` command line.
//!
//! The guide in `book/` walks through each part with runnable examples.

pub mod adam;
pub mod cli;
pub mod context;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod field;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod params;
pub mod plots;
pub mod room;
pub mod tape;
pub mod train;
pub mod wav;

pub use error::{NacfError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/room.md")]
    mod room {}
    #[doc = include_str!("../../../book/src/field.md")]
    mod field {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

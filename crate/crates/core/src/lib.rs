//! Geometry-consistent 4D Gaussian splatting for dynamic scenes captured by sparse camera rigs.

pub mod consistency;
pub mod dataset;
pub mod depth_reg;
pub mod error;
pub mod field;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/slicing.md")]
    mod slicing {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/consistency.md")]
    mod consistency {}
    #[doc = include_str!("../../../book/src/depth_regularizers.md")]
    mod depth_regularizers {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

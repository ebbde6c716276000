//! Heatmap-guided vector map decoding on a bird's-eye-view grid.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`heatmap`]: rasterized multi-class targets with Gaussian dilation and the
//!   radial loss weight field.
//! * [`sampler`]: confidence thresholding and ring-quota prior sampling.
//! * [`decoder`]: a seeded single-layer, two-stage decoder (prior cross-attention
//!   followed by deformable attention over the BEV features).
//! * [`matcher`]: Hungarian assignment with point-order symmetry.
//! * [`losses`]: point-to-line, auxiliary line, endpoint, focal heatmap and
//!   classification losses with analytic gradients.
//! * [`metrics`]: chamfer-distance AP and the ACD/ARD/AJP smoothness diagnostics.
//! * [`synth`]: reproducible synthetic scenes and perturbed predictions.
//!
//! The guide under `book/` walks through each stage; its snippets are compiled
//! as doc-tests of this crate.

pub mod decoder;
pub mod error;
pub mod fit;
pub mod heatmap;
pub mod io;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    resample_polyline, BevGridSpec, BevRange, MapClass, MapInstance, Point2, Prediction,
    PredictionSet, Scene,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/heatmaps.md")]
    mod heatmaps {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

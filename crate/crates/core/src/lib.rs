//! 2D differentiable Gaussian splatting with pluggable adaptive density control.
//!
//! A [`Scene`] of anisotropic 2D Gaussians is alpha-composited into an image
//! ([`raster::render`]) and fitted to a target by Adam on analytic gradients
//! ([`raster::render_backward`]). During the backward sweep every per-pixel
//! positional subgradient is folded into [`GradStats`], from which the
//! densification policies in [`densify`] decide which Gaussians to split or
//! clone. [`train`] runs the whole loop; [`vmf`] checks the statistics behind
//! the gradient coherence ratio.

pub mod densify;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod index_map;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod stats;
pub mod targets;
pub mod train;
pub mod verify;
pub mod vmf;

pub use densify::{DensifyConfig, DensifyReport, Policy};
pub use error::{Error, Result};
pub use gaussian::{Gaussian2D, Scene};
pub use image::Image;
pub use metrics::QualityReport;
pub use raster::{LossKind, RasterConfig};
pub use stats::GradStats;
pub use targets::{TargetKind, TargetSpec};

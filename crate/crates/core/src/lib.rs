//! Object detection with mined mid-level elements.
//!
//! The pipeline: mine discriminative 6x6x33 templates ("elements") from
//! labeled boxes, describe region proposals by spatially max-pooled
//! element responses over a shared per-image feature pyramid, classify
//! with per-category linear SVMs, refine with box regression, and score
//! detections PASCAL-style.
//!
//! The numeric core is generic over the scalar type ([`scalar::Real`],
//! f32 or f64); the concrete aliases below fix the pipeline default.

pub mod color;
pub mod dataset;
pub mod elementbank;
pub mod error;
pub mod featgrid;
pub mod featurize;
pub mod geometry;
pub mod linalg;
pub mod mining;
pub mod pipeline;
pub mod pyramid;
pub mod raster;
#[doc(hidden)]
pub mod reference;
pub mod detector;
pub mod eval;
pub mod regressor;
pub mod scalar;
pub mod svm;
pub mod synthetic;

pub use elementbank::{Element, ElementBank, ElementKind, ResponseMap};
pub use error::{Error, Result};
pub use featgrid::{compute_feature_grid, DescriptorConfig, FeatureGrid};
pub use geometry::BBox;
pub use pyramid::{build_pyramid, FeaturePyramid, PyramidConfig};
pub use raster::RasterImage;
pub use scalar::Real;

/// Default pipeline scalar.
pub type Scalar = f64;
/// Box in the default scalar.
pub type BBoxF = geometry::BBox<Scalar>;
/// Feature grid in the default scalar.
pub type FeatureGridF = featgrid::FeatureGrid<Scalar>;
/// Pyramid in the default scalar.
pub type FeaturePyramidF = pyramid::FeaturePyramid<Scalar>;
/// Element bank in the default scalar.
pub type ElementBankF = elementbank::ElementBank<Scalar>;

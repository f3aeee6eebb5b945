//! Curved-text detection head with Bezier regression and a one-to-many
//! training scheme for proposals that overlap several text instances.
//!
//! Geometry, encoding, losses and the network are generic over [`Real`]
//! (`f32` or `f64`). Data generation, training, evaluation and file formats
//! work in `f64`.

pub mod bench;
pub mod encoding;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod nn;
pub mod omts;
pub mod scalar;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Point2d = geometry::Point2<f64>;
pub type Point2f = geometry::Point2<f32>;
pub type CubicBezierd = geometry::CubicBezier<f64>;
pub type CubicBezierf = geometry::CubicBezier<f32>;
pub type BezierTextd = geometry::BezierText<f64>;
pub type BezierTextf = geometry::BezierText<f32>;
pub type PolygonTextd = geometry::PolygonText<f64>;
pub type AxisBoxd = geometry::AxisBox<f64>;
pub type AxisBoxf = geometry::AxisBox<f32>;
pub type DetectionHeadd = head::DetectionHead<f64>;
pub type DetectionHeadf = head::DetectionHead<f32>;

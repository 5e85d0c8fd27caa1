//! Differentiable ray tracing of triangle-soup radiance fields.
//!
//! Triangles are traced directly (no proxy geometry): each contributes a
//! smooth window-function response on its plane, hits are composited front to
//! back through a k-closest buffer, and analytic gradients flow back to
//! vertices, smoothness, opacity and SH color.

pub mod appearance;
pub mod autograd;
pub mod geometry;
pub mod io;
pub mod raster;
pub mod tracer;
pub mod training;

pub use geometry::{Ray, Triangle, Vec3};
pub use raster::Image;

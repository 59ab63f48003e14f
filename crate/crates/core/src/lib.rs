//! Multi-view consistent editing of Gaussian-splat radiance fields.
//!
//! The crate renders a Gaussian mixture from calibrated cameras, edits the
//! rendered views consistently (key views coupled by cross-view attention,
//! the rest filled by epipolar-constrained feature injection), and fits the
//! mixture directly to the edited views. All numeric code is generic over
//! [`Real`]; `f64` and `f32` aliases are provided below.

pub mod field;
pub mod fitter;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod mveditor;
pub mod ply;
pub mod renderer;
pub mod scalar;
pub mod sh;

pub use scalar::Real;

pub type Camera64 = geometry::Camera<f64>;
pub type Camera32 = geometry::Camera<f32>;
pub type Intrinsics64 = geometry::Intrinsics<f64>;
pub type Intrinsics32 = geometry::Intrinsics<f32>;
pub type Primitive64 = field::GaussianPrimitive<f64>;
pub type Primitive32 = field::GaussianPrimitive<f32>;
pub type Mixture64 = field::GaussianMixture<f64>;
pub type Mixture32 = field::GaussianMixture<f32>;
pub type Image64 = image::Image<f64>;
pub type Image32 = image::Image<f32>;

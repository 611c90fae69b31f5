//! Intermediate-domain guided adaptation for unsupervised cross-domain
//! vessel segmentation: data pipeline, mixed intermediate images, a cascaded
//! U-Net backbone, prototype contrast, losses, training loops and metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod idcl;
pub mod losses;
pub mod metrics;
pub mod mrat;
pub mod optim;
pub mod plane;
pub mod scalar;
pub mod segnet;
pub mod trainer;

pub use error::{IdaError, Result};
pub use plane::{LabelPlane, Plane};
pub use scalar::Scalar;

pub type ModelState32 = segnet::ModelState<f32>;
pub type ModelState64 = segnet::ModelState<f64>;
pub type Tensor32 = segnet::ops::Tensor<f32>;
pub type Tensor64 = segnet::ops::Tensor<f64>;
pub type PrototypeBank32 = idcl::PrototypeBank<f32>;
pub type PrototypeBank64 = idcl::PrototypeBank<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type ImageSample32 = data::ImageSample<f32>;
pub type ImageSample64 = data::ImageSample<f64>;

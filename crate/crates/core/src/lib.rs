//! Flow-conditioned next-frame video prediction.
//!
//! Three jointly trained networks cooperate to predict frame `N+1` from `N`
//! frames and the `N-1` optical-flow fields between them:
//!
//! * an optical-flow prediction network extrapolates the next flow field,
//! * a motion-estimation network (3D convolutions) turns the flow history into
//!   a dense per-pixel affine transform that warps the last frame,
//! * a stacked ConvLSTM refines the warped frame into the prediction.
//!
//! Everything runs on the small reverse-mode autodiff engine in [`tensor`].

pub mod dataset;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::FrameMode;

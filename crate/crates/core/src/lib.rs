//! Multi-spectral (thermal + visible) self-supervision for depth and
//! ego-motion.
//!
//! The crate covers the whole loss stack used to supervise thermal depth and
//! pose from a rigidly mounted thermal/RGB camera pair:
//!
//! * [`thermal`]: 14-bit radiometric images and their normalized and
//!   clipped-and-colorized representations;
//! * [`warp`]: inverse warping, the Gaussian flow reversal layer, forward
//!   depth warping into the RGB camera and rig pose transfer;
//! * [`loss`]: SSIM/L1 reconstruction, geometric consistency and the
//!   combined objective over three-frame bidirectional snippets;
//! * [`optim`]: exact reverse-mode gradients of that objective, a
//!   finite-difference checker and a direct depth/pose refiner;
//! * [`synth`]: a ray-casting renderer for RGB-T scenes with exact ground
//!   truth;
//! * [`eval`]: depth error/accuracy metrics and 5-frame ATE/RE.
//!
//! Pixel `(x, y)` is located at continuous coordinate `(x, y)` throughout.

pub mod camera;
pub mod cli;
pub mod error;
pub mod eval;
pub mod frame;
pub mod image;
pub mod io;
pub mod loss;
pub mod optim;
pub mod sample;
pub mod se3;
pub mod synth;
pub mod thermal;
pub mod warp;

pub use camera::{backproject, project, CameraIntrinsics, Projection};
pub use error::{Error, Result};
pub use frame::{relative_motion, MultiSpectralPair, Rig};
pub use image::{DepthMap, ImageGrid, Mask};
pub use loss::{snippet_loss, LossConfig, LossReport, LossTerms, LossWeights};
pub use sample::bilinear_sample;
pub use se3::{se3_exp, se3_log, RigidPose, Twist};
pub use thermal::{RawThermalImage, ThermalRepresentationConfig, ThermalStrategy};
pub use warp::{FlowField, FlowReversalConfig};

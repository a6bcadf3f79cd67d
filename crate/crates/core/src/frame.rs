//! Multi-spectral frames and the thermal/RGB camera rig.

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{domain, Result};
use crate::image::{DepthMap, ImageGrid};
use crate::se3::RigidPose;
use crate::thermal::RawThermalImage;

/// Thermal + RGB cameras rigidly mounted together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub thermal: CameraIntrinsics,
    pub rgb: CameraIntrinsics,
    /// `T_RGB←T`: maps thermal-camera coordinates to RGB-camera coordinates.
    pub extrinsic: RigidPose,
}

impl Rig {
    pub fn validate(&self) -> Result<()> {
        self.thermal.validate()?;
        self.rgb.validate()?;
        crate::se3::check_pose(&self.extrinsic)
    }
}

/// Time-aligned thermal/RGB capture with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectralPair {
    pub rgb: ImageGrid,
    pub thermal_raw: RawThermalImage,
    pub gt_depth_thermal: DepthMap,
    pub gt_depth_rgb: DepthMap,
    /// World-from-thermal-camera pose.
    pub gt_pose: RigidPose,
    pub timestamp: f64,
}

impl MultiSpectralPair {
    pub(crate) fn check_against(&self, rig: &Rig) -> Result<()> {
        if self.rgb.width() != rig.rgb.width
            || self.rgb.height() != rig.rgb.height
            || self.rgb.channels() != 3
        {
            return Err(domain("RGB image does not match the rig's RGB camera"));
        }
        if self.thermal_raw.width() != rig.thermal.width || self.thermal_raw.height() != rig.thermal.height {
            return Err(domain("thermal image does not match the rig's thermal camera"));
        }
        Ok(())
    }
}

/// Relative motion from frame `a` to frame `b` (maps camera-`a`
/// coordinates to camera-`b` coordinates) given world-from-camera poses.
pub fn relative_motion(world_from_a: &RigidPose, world_from_b: &RigidPose) -> RigidPose {
    world_from_b.inverse().compose(world_from_a)
}

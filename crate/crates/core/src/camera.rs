//! Pinhole camera model.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Projected depths at or below this are treated as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a camera-frame point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    /// `false` when the point is behind the camera or lands outside the
    /// `[0, width−1] × [0, height−1]` pixel rectangle.
    pub valid: bool,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(domain("focal lengths must be positive and finite"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(domain("image size must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(domain("principal point outside the image"));
        }
        Ok(())
    }

    /// Unit-depth ray through pixel `(x, y)`.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn in_image(&self, px: f64, py: f64) -> bool {
        let eps = 1e-9;
        px >= -eps && py >= -eps && px <= (self.width - 1) as f64 + eps && py <= (self.height - 1) as f64 + eps
    }
}

pub fn backproject(pixel: [f64; 2], depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(domain(format!("backprojection needs positive depth, got {depth}")));
    }
    if !pixel[0].is_finite() || !pixel[1].is_finite() {
        return Err(domain("pixel coordinates must be finite"));
    }
    Ok(k.ray(pixel[0], pixel[1]) * depth)
}

pub fn project(x: &Vector3<f64>, k: &CameraIntrinsics) -> Projection {
    let z = x.z;
    if !(z > MIN_PROJECTED_DEPTH) {
        return Projection {
            pixel: [f64::NAN, f64::NAN],
            depth: z,
            valid: false,
        };
    }
    let px = k.fx * x.x / z + k.cx;
    let py = k.fy * x.y / z + k.cy;
    Projection {
        pixel: [px, py],
        depth: z,
        valid: k.in_image(px, py),
    }
}

/// `∂(px, py)/∂X` for a point in front of the camera, as two rows.
#[inline]
pub(crate) fn projection_jacobian(x: &Vector3<f64>, k: &CameraIntrinsics) -> [Vector3<f64>; 2] {
    let iz = 1.0 / x.z;
    [
        Vector3::new(k.fx * iz, 0.0, -k.fx * x.x * iz * iz),
        Vector3::new(0.0, k.fy * iz, -k.fy * x.y * iz * iz),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 90.0, 50.0, 40.0, 101, 81).unwrap()
    }

    #[test]
    fn principal_point_backprojects_on_axis() {
        let k = k();
        assert_eq!(backproject([k.cx, k.cy], 2.0, &k).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(backproject([k.cx + k.fx, k.cy], 1.0, &k).unwrap(), Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn nonpositive_depth_is_rejected() {
        assert!(backproject([1.0, 1.0], 0.0, &k()).is_err());
        assert!(backproject([1.0, 1.0], -3.0, &k()).is_err());
    }

    #[test]
    fn projection_cases() {
        let k = k();
        let p = project(&Vector3::new(0.0, 0.0, 1.0), &k);
        assert_eq!((p.pixel, p.depth, p.valid), ([50.0, 40.0], 1.0, true));
        let p = project(&Vector3::new(0.5, 0.0, 1.0), &k);
        assert_eq!(p.pixel, [100.0, 40.0]);
        assert!(!project(&Vector3::new(0.0, 0.0, -1.0), &k).valid);
        assert!(!project(&Vector3::new(0.0, 0.0, 1e-7), &k).valid);
        assert!(!project(&Vector3::new(1.0, 0.0, 1.0), &k).valid);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn project_inverts_backproject(
            fx in 20.0..500.0f64, fy in 20.0..500.0f64,
            w in 16usize..640, h in 16usize..480,
            u in 0.0..1.0f64, v in 0.0..1.0f64, cu in 0.0..1.0f64, cv in 0.0..1.0f64,
            d in 0.05..200.0f64,
        ) {
            let k = CameraIntrinsics::new(fx, fy, cu * (w - 1) as f64, cv * (h - 1) as f64, w, h).unwrap();
            let p = [u * (w - 1) as f64, v * (h - 1) as f64];
            let back = project(&backproject(p, d, &k).unwrap(), &k);
            prop_assert!((back.pixel[0] - p[0]).abs() < 1e-9 && (back.pixel[1] - p[1]).abs() < 1e-9);
            prop_assert!((back.depth - d).abs() < 1e-9 * d.max(1.0));
        }
    }
}

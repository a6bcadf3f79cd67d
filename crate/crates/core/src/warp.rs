//! Geometric image synthesis: rigid flow, inverse warping, Gaussian flow
//! reversal, forward depth warping across the camera rig and pose transfer.
//!
//! Every forward pass here has a traced variant that keeps the per-pixel
//! intermediates needed to push adjoints back to depths and poses.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{projection_jacobian, CameraIntrinsics, MIN_PROJECTED_DEPTH};
use crate::error::{domain, Error, Result};
use crate::image::{DepthMap, ImageGrid, Mask};
use crate::sample::{snap, BilinearTap};
use crate::se3::RigidPose;

/// Per-pixel `(Δx, Δy)` displacements with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: ImageGrid,
    pub mask: Mask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            flow: ImageGrid::new(width, height, 2),
            mask: ImageGrid::filled(width, height, 1, 1.0),
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Option<[f64; 2]>) -> Self {
        let mut out = Self {
            flow: ImageGrid::new(width, height, 2),
            mask: ImageGrid::new(width, height, 1),
        };
        for y in 0..height {
            for x in 0..width {
                if let Some([dx, dy]) = f(x, y) {
                    out.flow.set(x, y, 0, dx);
                    out.flow.set(x, y, 1, dy);
                    out.mask.set(x, y, 0, 1.0);
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask.get(x, y, 0) > 0.5
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        self.is_valid(x, y)
            .then(|| [self.flow.get(x, y, 0), self.flow.get(x, y, 1)])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Gaussian splatting parameters of the flow reversal layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowReversalConfig {
    /// Gaussian width δ in pixels: `w(d) = exp(−d²/δ²)`.
    pub delta: f64,
    /// Splat footprint: target pixels `u` with `|u − v|∞ < radius`.
    pub footprint_radius: usize,
    /// Weight sums below this leave a hole.
    pub hole_eps: f64,
    /// Warp RGB-frame z values (true) or the thermal depth verbatim (false).
    pub transform_depth_values: bool,
}

impl Default for FlowReversalConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            footprint_radius: 1,
            hole_eps: 1e-4,
            transform_depth_values: true,
        }
    }
}

impl FlowReversalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || self.footprint_radius < 1 || !(self.hole_eps > 0.0) {
            return Err(Error::Config(
                "flow reversal needs delta > 0, footprint_radius >= 1, hole_eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Output of [`inverse_warp`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    /// Synthesized target image; zero outside the valid set.
    pub image: ImageGrid,
    /// The valid set V.
    pub valid: Mask,
    /// Source depth sampled at the warped coordinates (when a source depth
    /// was supplied).
    pub sampled_depth: Option<DepthMap>,
    /// z of the transformed target point, the motion-compensated target
    /// depth.
    pub compensated_depth: DepthMap,
}

impl WarpResult {
    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Per-pixel intermediates of `X = d·K⁻¹p̃`, `Y = T·X`, `q = π(Y)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelGeom {
    pub ray: Vector3<f64>,
    pub point: Vector3<f64>,
    pub moved: Vector3<f64>,
    pub q: [f64; 2],
    pub tap: BilinearTap,
}

/// Euclidean gradient with respect to the entries of `(R, t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct PoseGrad {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Default for PoseGrad {
    fn default() -> Self {
        Self {
            r: Matrix3::zeros(),
            t: Vector3::zeros(),
        }
    }
}

impl std::ops::AddAssign for PoseGrad {
    fn add_assign(&mut self, rhs: Self) {
        self.r += rhs.r;
        self.t += rhs.t;
    }
}

impl PoseGrad {
    /// Pulls a gradient on `P⁻¹` back to `P`.
    pub fn through_inverse(&self, pose: &RigidPose) -> PoseGrad {
        // R' = Rᵀ, t' = −Rᵀt
        PoseGrad {
            r: self.r.transpose() - pose.translation * self.t.transpose(),
            t: -(pose.rotation * self.t),
        }
    }

    /// Pulls a gradient on `E·P·E⁻¹` back to `P`.
    pub fn through_conjugation(&self, extrinsic: &RigidPose) -> PoseGrad {
        // R' = Rₑ R Rₑᵀ, t' = Rₑ t + tₑ − R' tₑ
        let re = &extrinsic.rotation;
        let te = &extrinsic.translation;
        let ret = re.transpose();
        PoseGrad {
            r: ret * self.r * re - (ret * self.t) * (ret * te).transpose(),
            t: ret * self.t,
        }
    }
}

impl PixelGeom {
    /// Pushes `(∂L/∂q, ∂L/∂z)` back; returns `∂L/∂d` and accumulates the pose
    /// gradient when requested.
    #[inline]
    pub fn backward(
        &self,
        pose: &RigidPose,
        k_dst: &CameraIntrinsics,
        gq: [f64; 2],
        gz: f64,
        pose_grad: Option<&mut PoseGrad>,
    ) -> f64 {
        let [jx, jy] = projection_jacobian(&self.moved, k_dst);
        let mut gy = jx * gq[0] + jy * gq[1];
        gy.z += gz;
        if let Some(pg) = pose_grad {
            pg.r += gy * self.point.transpose();
            pg.t += gy;
        }
        self.ray.dot(&(pose.rotation.transpose() * gy))
    }
}

/// Transforms every depth pixel of the `k_src` camera into the `k_dst`
/// camera. `None` marks pixels masked out by `depth_mask`, behind the
/// destination camera or projecting outside it.
pub(crate) fn trace_geometry(
    depth: &DepthMap,
    depth_mask: Option<&[bool]>,
    pose: &RigidPose,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
) -> Result<Vec<Option<PixelGeom>>> {
    let (w, h) = (depth.width(), depth.height());
    if w != k_src.width || h != k_src.height {
        return Err(domain("depth map size does not match its intrinsics"));
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if depth_mask.is_some_and(|m| !m[i]) {
                out.push(None);
                continue;
            }
            let d = depth.data()[i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(domain(format!("non-positive depth {d} at ({x}, {y})")));
            }
            let ray = k_src.ray(x as f64, y as f64);
            let point = ray * d;
            let moved = pose.transform(&point);
            if !(moved.z > MIN_PROJECTED_DEPTH) {
                out.push(None);
                continue;
            }
            let q = [
                k_dst.fx * moved.x / moved.z + k_dst.cx,
                k_dst.fy * moved.y / moved.z + k_dst.cy,
            ];
            out.push(
                BilinearTap::locate(k_dst.width, k_dst.height, q[0], q[1]).map(|tap| PixelGeom {
                    ray,
                    point,
                    moved,
                    q,
                    tap,
                }),
            );
        }
    }
    Ok(out)
}

/// Flow induced by depth `depth` (in the `k_src` camera) and the motion
/// `pose` into the `k_dst` camera.
pub fn rigid_flow(
    depth: &DepthMap,
    pose: &RigidPose,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
) -> Result<FlowField> {
    let geom = trace_geometry(depth, None, pose, k_src, k_dst)?;
    let w = depth.width();
    Ok(FlowField::from_fn(w, depth.height(), |x, y| {
        geom[y * w + x].map(|g| [g.q[0] - x as f64, g.q[1] - y as f64])
    }))
}

/// Synthesizes the target view by sampling `source` along the rigid flow of
/// `target_depth` under `target_to_source`.
pub fn inverse_warp(
    source: &ImageGrid,
    target_depth: &DepthMap,
    target_to_source: &RigidPose,
    k: &CameraIntrinsics,
    source_depth: Option<&DepthMap>,
) -> Result<WarpResult> {
    if !source.same_size(target_depth) {
        return Err(domain("source image and target depth differ in size"));
    }
    if let Some(sd) = source_depth {
        if !sd.same_size(source) {
            return Err(domain("source depth and source image differ in size"));
        }
    }
    let geom = trace_geometry(target_depth, None, target_to_source, k, k)?;
    let (w, h, ch) = (source.width(), source.height(), source.channels());
    let mut image = ImageGrid::new(w, h, ch);
    let mut valid = ImageGrid::new(w, h, 1);
    let mut sampled = source_depth.map(|_| ImageGrid::new(w, h, 1));
    let mut compensated = ImageGrid::new(w, h, 1);
    for (i, g) in geom.iter().enumerate() {
        let Some(g) = g else { continue };
        valid.data_mut()[i] = 1.0;
        compensated.data_mut()[i] = g.moved.z;
        for c in 0..ch {
            image.data_mut()[i * ch + c] = g.tap.sample(source, c);
        }
        if let (Some(out), Some(sd)) = (sampled.as_mut(), source_depth) {
            out.data_mut()[i] = g.tap.sample(sd, 0);
        }
    }
    Ok(WarpResult {
        image,
        valid,
        sampled_depth: sampled,
        compensated_depth: compensated,
    })
}

/// Splat state of the flow reversal layer on the target grid.
#[derive(Clone, Debug)]
pub(crate) struct Reversal {
    pub width: usize,
    pub height: usize,
    pub weight_sum: Vec<f64>,
    /// Normalized reversed flow; meaningful where `!hole`.
    pub flow: Vec<[f64; 2]>,
    pub hole: Vec<bool>,
}

/// Integer target coordinates strictly within `radius` of `v` along each
/// axis, clipped to `0..n`. Positions within `1e-9` of an integer count as
/// that integer, so round-off cannot toggle a boundary row.
#[inline]
pub(crate) fn footprint(v: f64, radius: usize, n: usize) -> std::ops::Range<usize> {
    let v = snap(v);
    let r = radius as f64;
    let lo = ((v - r).floor() + 1.0).max(0.0);
    let hi = ((v + r).ceil() - 1.0).min(n as f64 - 1.0);
    if hi < lo {
        0..0
    } else {
        lo as usize..hi as usize + 1
    }
}

/// Splats `−(q − origin)` from every source landing position `q` onto a
/// `width × height` grid.
pub(crate) fn splat_reverse(
    sources: &[Option<([f64; 2], [f64; 2])>],
    width: usize,
    height: usize,
    cfg: &FlowReversalConfig,
) -> Reversal {
    let n = width * height;
    let mut weight_sum = vec![0.0; n];
    let mut acc = vec![[0.0; 2]; n];
    let inv_d2 = 1.0 / (cfg.delta * cfg.delta);
    for (origin, q) in sources.iter().flatten() {
        let back = [origin[0] - q[0], origin[1] - q[1]];
        for uy in footprint(q[1], cfg.footprint_radius, height) {
            let dy = q[1] - uy as f64;
            for ux in footprint(q[0], cfg.footprint_radius, width) {
                let dx = q[0] - ux as f64;
                let wgt = (-(dx * dx + dy * dy) * inv_d2).exp();
                let j = uy * width + ux;
                weight_sum[j] += wgt;
                acc[j][0] += wgt * back[0];
                acc[j][1] += wgt * back[1];
            }
        }
    }
    let hole: Vec<bool> = weight_sum.iter().map(|&s| s < cfg.hole_eps).collect();
    let flow = acc
        .iter()
        .zip(&weight_sum)
        .zip(&hole)
        .map(|((a, &s), &hl)| if hl { [0.0; 2] } else { [a[0] / s, a[1] / s] })
        .collect();
    Reversal {
        width,
        height,
        weight_sum,
        flow,
        hole,
    }
}

impl Reversal {
    /// Given `∂L/∂F̃(u)` on the target grid, returns `∂L/∂q` for each source.
    pub fn backward(
        &self,
        sources: &[Option<([f64; 2], [f64; 2])>],
        grad_flow: &[[f64; 2]],
        cfg: &FlowReversalConfig,
    ) -> Vec<[f64; 2]> {
        let inv_d2 = 1.0 / (cfg.delta * cfg.delta);
        let mut out = vec![[0.0; 2]; sources.len()];
        for (src, gq) in sources.iter().zip(out.iter_mut()) {
            let Some((origin, q)) = src else { continue };
            let back = [origin[0] - q[0], origin[1] - q[1]];
            for uy in footprint(q[1], cfg.footprint_radius, self.height) {
                let dy = q[1] - uy as f64;
                for ux in footprint(q[0], cfg.footprint_radius, self.width) {
                    let j = uy * self.width + ux;
                    if self.hole[j] {
                        continue;
                    }
                    let g = grad_flow[j];
                    if g == [0.0, 0.0] {
                        continue;
                    }
                    let dx = q[0] - ux as f64;
                    let wgt = (-(dx * dx + dy * dy) * inv_d2).exp();
                    let s = self.weight_sum[j];
                    let f = self.flow[j];
                    // F̃ = Σ w·b / Σ w with b = origin − q:
                    // ∂F̃/∂q = (−w·I + (b − F̃) ⊗ ∂w/∂q) / Σw, ∂w/∂q = −2w(q − u)/δ²
                    let proj = g[0] * (back[0] - f[0]) + g[1] * (back[1] - f[1]);
                    let dw = [-2.0 * wgt * dx * inv_d2, -2.0 * wgt * dy * inv_d2];
                    gq[0] += (-wgt * g[0] + proj * dw[0]) / s;
                    gq[1] += (-wgt * g[1] + proj * dw[1]) / s;
                }
            }
        }
        out
    }
}

/// Gaussian-weighted reversal of a forward flow onto the same grid.
pub fn flow_reversal(forward: &FlowField, cfg: &FlowReversalConfig) -> FlowField {
    flow_reversal_onto(forward, cfg, forward.width(), forward.height())
}

/// Flow reversal onto a `width × height` target grid.
pub fn flow_reversal_onto(
    forward: &FlowField,
    cfg: &FlowReversalConfig,
    width: usize,
    height: usize,
) -> FlowField {
    let w = forward.width();
    let sources: Vec<_> = (0..forward.height())
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            forward.at(x, y).map(|f| {
                let origin = [x as f64, y as f64];
                (origin, [origin[0] + f[0], origin[1] + f[1]])
            })
        })
        .collect();
    let rev = splat_reverse(&sources, width, height, cfg);
    FlowField::from_fn(width, height, |x, y| {
        let j = y * width + x;
        (!rev.hole[j]).then_some(rev.flow[j])
    })
}

/// Traced forward depth warp from the thermal camera into the RGB camera.
#[derive(Clone, Debug)]
pub(crate) struct ForwardDepthTrace {
    pub depth: DepthMap,
    pub hole: Vec<bool>,
    geom: Vec<Option<PixelGeom>>,
    sources: Vec<Option<([f64; 2], [f64; 2])>>,
    values: DepthMap,
    value_valid: Vec<bool>,
    reversal: Reversal,
    taps: Vec<Option<BilinearTap>>,
}

pub(crate) fn trace_forward_depth(
    depth_t: &DepthMap,
    extrinsic: &RigidPose,
    k_t: &CameraIntrinsics,
    k_rgb: &CameraIntrinsics,
    cfg: &FlowReversalConfig,
) -> Result<ForwardDepthTrace> {
    let geom = trace_geometry(depth_t, None, extrinsic, k_t, k_rgb)?;
    let (w, h) = (depth_t.width(), depth_t.height());
    let sources: Vec<_> = geom
        .iter()
        .enumerate()
        .map(|(i, g)| g.map(|g| ([(i % w) as f64, (i / w) as f64], g.q)))
        .collect();
    let value_valid: Vec<bool> = geom.iter().map(Option::is_some).collect();
    let values = ImageGrid::from_vec(
        w,
        h,
        1,
        geom.iter()
            .zip(depth_t.data())
            .map(|(g, &d)| match g {
                Some(g) if cfg.transform_depth_values => g.moved.z,
                Some(_) => d,
                None => 0.0,
            })
            .collect(),
    )?;
    let reversal = splat_reverse(&sources, k_rgb.width, k_rgb.height, cfg);
    let (rw, rh) = (k_rgb.width, k_rgb.height);
    let mut out = ImageGrid::new(rw, rh, 1);
    let mut hole = vec![true; rw * rh];
    let mut taps = vec![None; rw * rh];
    for j in 0..rw * rh {
        if reversal.hole[j] {
            continue;
        }
        let f = reversal.flow[j];
        let s = [(j % rw) as f64 + f[0], (j / rw) as f64 + f[1]];
        if let Some(tap) = BilinearTap::locate(w, h, s[0], s[1]) {
            if tap.all_set(&value_valid) {
                out.data_mut()[j] = tap.sample(&values, 0);
                hole[j] = false;
                taps[j] = Some(tap);
            }
        }
    }
    Ok(ForwardDepthTrace {
        depth: out,
        hole,
        geom,
        sources,
        values,
        value_valid,
        reversal,
        taps,
    })
}

impl ForwardDepthTrace {
    /// Pushes `∂L/∂D̃_RGB` back to the thermal depth map.
    pub fn backward(
        &self,
        grad_depth: &[f64],
        extrinsic: &RigidPose,
        k_rgb: &CameraIntrinsics,
        cfg: &FlowReversalConfig,
    ) -> Vec<f64> {
        let n_t = self.values.len_pixels();
        let mut g_values = vec![0.0; n_t];
        let mut g_flow = vec![[0.0; 2]; self.taps.len()];
        for (j, tap) in self.taps.iter().enumerate() {
            let (Some(tap), g) = (tap, grad_depth[j]) else { continue };
            if g == 0.0 {
                continue;
            }
            tap.scatter(&mut g_values, g);
            let gc = tap.coord_gradient(&self.values, 0);
            g_flow[j] = [g * gc[0], g * gc[1]];
        }
        debug_assert!(g_values
            .iter()
            .zip(&self.value_valid)
            .all(|(g, &ok)| ok || *g == 0.0));
        let g_q = self.reversal.backward(&self.sources, &g_flow, cfg);
        let mut g_depth = vec![0.0; n_t];
        for (i, g) in self.geom.iter().enumerate() {
            let Some(g) = g else { continue };
            let gz = if cfg.transform_depth_values { g_values[i] } else { 0.0 };
            let mut gd = g.backward(extrinsic, k_rgb, g_q[i], gz, None);
            if !cfg.transform_depth_values {
                gd += g_values[i];
            }
            g_depth[i] = gd;
        }
        g_depth
    }
}

/// Depth of the thermal camera re-expressed on the RGB image grid through
/// the reversed rig flow. Returns the depth map and its hole mask (1 = hole).
pub fn forward_warp_depth(
    depth_t: &DepthMap,
    extrinsic: &RigidPose,
    k_t: &CameraIntrinsics,
    k_rgb: &CameraIntrinsics,
    cfg: &FlowReversalConfig,
) -> Result<(DepthMap, Mask)> {
    let tr = trace_forward_depth(depth_t, extrinsic, k_t, k_rgb, cfg)?;
    let holes = ImageGrid::from_vec(
        k_rgb.width,
        k_rgb.height,
        1,
        tr.hole.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok((tr.depth, holes))
}

/// Relative motion of the RGB camera given the thermal camera motion and the
/// rig extrinsic `T_RGB←T`: `E · T · E⁻¹`.
pub fn warp_pose(thermal_motion: &RigidPose, extrinsic: &RigidPose) -> RigidPose {
    extrinsic.compose(thermal_motion).compose(&extrinsic.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{se3_exp, Twist};
    use nalgebra::Vector6;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::centered(60.0, 64, 64)
    }

    #[test]
    fn identity_pose_gives_zero_flow() {
        let d = ImageGrid::from_fn(64, 64, 1, |x, y, _| 2.0 + 0.01 * (x + y) as f64);
        let f = rigid_flow(&d, &RigidPose::identity(), &k64(), &k64()).unwrap();
        assert_eq!(f.valid_count(), 64 * 64);
        assert!(f.flow.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn forward_z_translation_gives_radial_flow() {
        // Camera moves toward the plane by tz: points come closer, z' = d − tz.
        let (d, tz) = (5.0, 0.5);
        let k = k64();
        let depth = ImageGrid::filled(64, 64, 1, d);
        let pose = RigidPose::from_translation(Vector3::new(0.0, 0.0, -tz));
        let f = rigid_flow(&depth, &pose, &k, &k).unwrap();
        for (x, y) in [(10, 20), (32, 32), (40, 50)] {
            if let Some(fl) = f.at(x, y) {
                let ex = (x as f64 - k.cx) * tz / (d - tz);
                let ey = (y as f64 - k.cy) * tz / (d - tz);
                assert!((fl[0] - ex).abs() < 1e-12 && (fl[1] - ey).abs() < 1e-12);
            }
        }
        // corners leave the frame
        assert!(f.at(0, 0).is_none());
    }

    #[test]
    fn x_translation_gives_uniform_flow() {
        let (d, tx) = (4.0, 0.2);
        let k = k64();
        let depth = ImageGrid::filled(64, 64, 1, d);
        let f = rigid_flow(&depth, &RigidPose::from_translation(Vector3::new(tx, 0.0, 0.0)), &k, &k).unwrap();
        let expect = k.fx * tx / d;
        for y in 0..64 {
            for x in 0..60 {
                let fl = f.at(x, y).unwrap();
                assert!((fl[0] - expect).abs() < 1e-12 && fl[1].abs() < 1e-12);
            }
        }
        assert!(f.at(63, 10).is_none());
    }

    #[test]
    fn inverse_warp_identity_reproduces_source() {
        let src = ImageGrid::from_fn(16, 12, 3, |x, y, c| ((x * 13 + y * 7 + c * 5) % 17) as f64 / 17.0);
        let d = ImageGrid::filled(16, 12, 1, 3.0);
        let k = CameraIntrinsics::centered(20.0, 16, 12);
        let r = inverse_warp(&src, &d, &RigidPose::identity(), &k, Some(&d)).unwrap();
        assert_eq!(r.image, src);
        assert_eq!(r.valid_count(), 16 * 12);
        assert_eq!(r.sampled_depth.unwrap(), d);
        assert_eq!(r.compensated_depth, d);
    }

    #[test]
    fn large_translation_empties_valid_set() {
        let k = k64();
        let d = ImageGrid::filled(64, 64, 1, 2.0);
        let src = ImageGrid::filled(64, 64, 1, 0.5);
        let r = inverse_warp(&src, &d, &RigidPose::from_translation(Vector3::new(100.0, 0.0, 0.0)), &k, None).unwrap();
        assert_eq!(r.valid_count(), 0);
    }

    #[test]
    fn nonpositive_depth_is_a_domain_error() {
        let k = k64();
        let mut d = ImageGrid::filled(64, 64, 1, 2.0);
        d.set(3, 3, 0, 0.0);
        assert!(rigid_flow(&d, &RigidPose::identity(), &k, &k).is_err());
    }

    #[test]
    fn zero_flow_reverses_to_zero() {
        let r = flow_reversal(&FlowField::zeros(8, 8), &FlowReversalConfig::default());
        assert_eq!(r.valid_count(), 64);
        assert!(r.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_integer_flow_reverses_exactly() {
        let f = FlowField::from_fn(32, 16, |_, _| Some([3.0, 0.0]));
        let r = flow_reversal(&f, &FlowReversalConfig::default());
        for y in 0..16 {
            for x in 0..32 {
                match r.at(x, y) {
                    Some(v) => {
                        assert!(x >= 3);
                        assert_eq!(v, [-3.0, 0.0]);
                    }
                    None => assert!(x < 3),
                }
            }
        }
    }

    #[test]
    fn footprint_is_strict() {
        assert_eq!(footprint(2.5, 1, 10), 2..4);
        assert_eq!(footprint(3.0, 1, 10), 3..4);
        assert_eq!(footprint(3.0, 2, 10), 2..5);
        assert_eq!(footprint(-0.5, 1, 10), 0..1);
        assert_eq!(footprint(-3.0, 1, 10), 0..0);
    }

    #[test]
    fn forward_depth_identity_extrinsic() {
        let k = k64();
        let d = ImageGrid::from_fn(64, 64, 1, |x, y, _| 3.0 + 0.01 * x as f64 + 0.02 * y as f64);
        let (out, holes) = forward_warp_depth(&d, &RigidPose::identity(), &k, &k, &FlowReversalConfig::default()).unwrap();
        assert!(holes.data().iter().all(|&h| h == 0.0));
        for (a, b) in out.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_depth_x_baseline_keeps_plane_depth() {
        let k = k64();
        let d = ImageGrid::filled(64, 64, 1, 5.0);
        let e = RigidPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let (out, holes) = forward_warp_depth(&d, &e, &k, &k, &FlowReversalConfig::default()).unwrap();
        let mut n = 0;
        for (v, h) in out.data().iter().zip(holes.data()) {
            if *h == 0.0 {
                assert!((v - 5.0).abs() < 1e-12);
                n += 1;
            }
        }
        assert!(n > 60 * 64);
    }

    #[test]
    fn forward_depth_z_offset_transforms_values() {
        let k = k64();
        let d = ImageGrid::filled(64, 64, 1, 5.0);
        let e = RigidPose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let mut cfg = FlowReversalConfig::default();
        let (out, holes) = forward_warp_depth(&d, &e, &k, &k, &cfg).unwrap();
        for (v, h) in out.data().iter().zip(holes.data()) {
            if *h == 0.0 {
                assert!((v - 4.0).abs() < 1e-12);
            }
        }
        cfg.transform_depth_values = false;
        let (out, holes) = forward_warp_depth(&d, &e, &k, &k, &cfg).unwrap();
        for (v, h) in out.data().iter().zip(holes.data()) {
            if *h == 0.0 {
                assert!((v - 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_pose_special_cases() {
        let t = se3_exp(&Twist(Vector6::new(0.1, 0.2, -0.1, 0.3, 0.0, 0.1)));
        let e = se3_exp(&Twist(Vector6::new(-0.05, 0.02, 0.3, 0.1, -0.02, 0.0)));
        assert_eq!(warp_pose(&t, &RigidPose::identity()), t);
        let id = warp_pose(&RigidPose::identity(), &e);
        assert!((id.to_matrix() - nalgebra::Matrix4::identity()).amax() < 1e-15);
    }

    #[test]
    fn pose_gradient_transfers_match_differences() {
        let p = se3_exp(&Twist(Vector6::new(0.2, -0.1, 0.3, 0.5, -0.2, 0.1)));
        let e = se3_exp(&Twist(Vector6::new(0.05, 0.1, -0.02, 0.1, 0.03, -0.05)));
        let gr = Matrix3::from_fn(|i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.2);
        let gt = Vector3::new(0.4, -1.0, 0.7);
        let f_inv = |p: &RigidPose| {
            let q = p.inverse();
            gr.component_mul(&q.rotation).sum() + gt.dot(&q.translation)
        };
        let f_conj = |p: &RigidPose| {
            let q = warp_pose(p, &e);
            gr.component_mul(&q.rotation).sum() + gt.dot(&q.translation)
        };
        let g = PoseGrad { r: gr, t: gt };
        let gi = g.through_inverse(&p);
        let gc = g.through_conjugation(&e);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut a = p;
                let mut b = p;
                a.rotation[(i, j)] += h;
                b.rotation[(i, j)] -= h;
                assert!(((f_inv(&a) - f_inv(&b)) / (2.0 * h) - gi.r[(i, j)]).abs() < 1e-7);
                assert!(((f_conj(&a) - f_conj(&b)) / (2.0 * h) - gc.r[(i, j)]).abs() < 1e-7);
            }
            let mut a = p;
            let mut b = p;
            a.translation[i] += h;
            b.translation[i] -= h;
            assert!(((f_inv(&a) - f_inv(&b)) / (2.0 * h) - gi.t[i]).abs() < 1e-7);
            assert!(((f_conj(&a) - f_conj(&b)) / (2.0 * h) - gc.t[i]).abs() < 1e-7);
        }
    }
}

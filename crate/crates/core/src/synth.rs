//! Deterministic ray-cast RGB-T scenes with exact ground truth.
//!
//! Scenes are static collections of textured rectangles and boxes with
//! time-constant temperature fields, optionally plus one moving hot box that
//! deliberately violates the static-scene assumption.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{domain, Result};
use crate::frame::{MultiSpectralPair, Rig};
use crate::image::ImageGrid;
use crate::se3::{rotation_about, RigidPose};
use crate::thermal::{celsius_to_raw, RawThermalImage};
use crate::warp::FlowField;

pub use crate::frame::relative_motion;

/// Solid scalar field over scene coordinates in meters. Surfaces sample it
/// at their points, so meeting surfaces agree along the seam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Field {
    Constant { value: f64 },
    /// `base + gradient·x`.
    Affine { base: f64, gradient: [f64; 3] },
    /// `base + Σ amp·sin(2π freq·x + phase)`.
    Waves { base: f64, waves: Vec<Wave> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amp: f64,
    /// Cycles per meter along each axis.
    pub freq: [f64; 3],
    pub phase: f64,
}

impl Field {
    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        match self {
            Field::Constant { value } => *value,
            Field::Affine { base, gradient } => base + Vector3::from(*gradient).dot(x),
            Field::Waves { base, waves } => {
                base + waves
                    .iter()
                    .map(|w| {
                        w.amp * (std::f64::consts::TAU * Vector3::from(w.freq).dot(x) + w.phase).sin()
                    })
                    .sum::<f64>()
            }
        }
    }

    fn is_affine(&self) -> bool {
        !matches!(self, Field::Waves { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    /// Rectangle `|u| ≤ half_size[0]`, `|v| ≤ half_size[1]` in the local
    /// `z = 0` plane of `pose` (world-from-local).
    Plane { pose: RigidPose, half_size: [f64; 2] },
    /// Axis-aligned box in the local frame of `pose`.
    Box { pose: RigidPose, half_extents: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// RGB albedo fields, clamped to `[0, 1]` when rendered.
    pub albedo: [Field; 3],
    /// Surface temperature in °C.
    pub temperature: Field,
}

/// A box that translates by `velocity` (m per frame) between frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingObject {
    pub object: SceneObject,
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Vec<SceneObject>,
    /// World-from-thermal-camera poses, one per frame.
    pub trajectory: Vec<RigidPose>,
    pub rig: Rig,
    /// Require affine texture fields (bilinear sampling is then exact on
    /// planar scenes seen without out-of-plane rotation).
    #[serde(default)]
    pub affine_texture: bool,
    /// Standard deviation of additive Gaussian noise on raw counts.
    #[serde(default)]
    pub thermal_noise_counts: f64,
    #[serde(default)]
    pub moving_object: Option<MovingObject>,
    #[serde(default = "default_frame_interval")]
    pub frame_interval: f64,
}

fn default_frame_interval() -> f64 {
    0.1
}

/// Minimum fraction of pixels that must hit geometry.
pub const MIN_COVERAGE: f64 = 0.5;

struct Hit {
    depth: f64,
    point: Vector3<f64>,
    object: usize,
}

impl Shape {
    /// Ray parameter of the first hit in front of the origin.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Shape::Plane { pose, half_size } => {
                let inv = pose.inverse();
                let o = inv.transform(origin);
                let d = inv.rotation * dir;
                if d.z.abs() < 1e-12 {
                    return None;
                }
                let t = -o.z / d.z;
                let p = o + d * t;
                (t > 1e-9 && p.x.abs() <= half_size[0] && p.y.abs() <= half_size[1]).then_some(t)
            }
            Shape::Box { pose, half_extents } => {
                let inv = pose.inverse();
                let o = inv.transform(origin);
                let d = inv.rotation * dir;
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > half_extents[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half_extents[a] - o[a]) / d[a];
                    let t2 = (half_extents[a] - o[a]) / d[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    t_near = t_near.max(lo);
                    t_far = t_far.min(hi);
                }
                (t_near <= t_far && t_near > 1e-9).then_some(t_near)
            }
        }
    }

    fn contains(&self, x: &Vector3<f64>) -> bool {
        match self {
            Shape::Plane { .. } => false,
            Shape::Box { pose, half_extents } => {
                let p = pose.inverse().transform(x);
                (0..3).all(|a| p[a].abs() < half_extents[a])
            }
        }
    }

    fn translated(&self, offset: &Vector3<f64>) -> Shape {
        let shift = |p: &RigidPose| RigidPose::new(p.rotation, p.translation + offset);
        match self {
            Shape::Plane { pose, half_size } => Shape::Plane {
                pose: shift(pose),
                half_size: *half_size,
            },
            Shape::Box { pose, half_extents } => Shape::Box {
                pose: shift(pose),
                half_extents: *half_extents,
            },
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.trajectory.is_empty() {
            return Err(domain("scene trajectory is empty"));
        }
        if self.affine_texture {
            let all_affine = self
                .objects_at(0)
                .iter()
                .all(|o| o.albedo.iter().all(Field::is_affine) && o.temperature.is_affine());
            if !all_affine {
                return Err(domain("affine_texture scene uses a non-affine field"));
            }
        }
        Ok(())
    }

    /// Scene objects as placed at frame `i`.
    fn objects_at(&self, i: usize) -> Vec<SceneObject> {
        let mut out = self.layout.clone();
        if let Some(m) = &self.moving_object {
            let off = Vector3::from(m.velocity) * i as f64;
            out.push(SceneObject {
                shape: m.object.shape.translated(&off),
                ..m.object.clone()
            });
        }
        out
    }

    /// Displacement of each object's texture at frame `i`, so textures move
    /// with the moving object.
    fn texture_offsets(&self, i: usize) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); self.layout.len()];
        if let Some(m) = &self.moving_object {
            out.push(Vector3::from(m.velocity) * i as f64);
        }
        out
    }

    pub fn camera_pose(&self, frame: usize, camera: CameraKind) -> RigidPose {
        let t = self.trajectory[frame];
        match camera {
            CameraKind::Thermal => t,
            CameraKind::Rgb => t.compose(&self.rig.extrinsic.inverse()),
        }
    }

    pub fn intrinsics(&self, camera: CameraKind) -> CameraIntrinsics {
        match camera {
            CameraKind::Thermal => self.rig.thermal,
            CameraKind::Rgb => self.rig.rgb,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Thermal,
    Rgb,
}

fn cast(objects: &[SceneObject], origin: &Vector3<f64>, dir_world: &Vector3<f64>, dir_z: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (k, obj) in objects.iter().enumerate() {
        if let Some(t) = obj.shape.intersect(origin, dir_world) {
            // dir has unit camera-frame z, so the ray parameter is the depth
            let depth = t * dir_z;
            if best.as_ref().is_none_or(|b| depth < b.depth) {
                best = Some(Hit {
                    depth,
                    point: origin + dir_world * t,
                    object: k,
                });
            }
        }
    }
    best
}

struct RenderedView {
    depth: ImageGrid,
    /// Hit object and world point per pixel.
    hits: Vec<Option<(usize, Vector3<f64>)>>,
}

fn render_view(objects: &[SceneObject], pose: &RigidPose, k: &CameraIntrinsics) -> Result<RenderedView> {
    for o in objects {
        if o.shape.contains(&pose.translation) {
            return Err(domain("camera center lies inside scene geometry"));
        }
    }
    let (w, h) = (k.width, k.height);
    let mut depth = ImageGrid::new(w, h, 1);
    let mut hits = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ray = k.ray(x as f64, y as f64);
            let dir = pose.rotation * ray;
            match cast(objects, &pose.translation, &dir, ray.z) {
                Some(hit) => {
                    depth.set(x, y, 0, hit.depth);
                    hits.push(Some((hit.object, hit.point)));
                }
                None => hits.push(None),
            }
        }
    }
    let covered = hits.iter().filter(|h| h.is_some()).count() as f64 / (w * h) as f64;
    if covered < MIN_COVERAGE {
        return Err(domain(format!(
            "camera sees only {:.0}% of the scene (need {:.0}%)",
            covered * 100.0,
            MIN_COVERAGE * 100.0
        )));
    }
    Ok(RenderedView { depth, hits })
}

/// Renders `n_frames` frames of the scene's trajectory.
pub fn render_sequence(spec: &SceneSpec, n_frames: usize) -> Result<Vec<MultiSpectralPair>> {
    spec.validate()?;
    if n_frames > spec.trajectory.len() {
        return Err(domain(format!(
            "requested {n_frames} frames, trajectory has {}",
            spec.trajectory.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n_frames)
        .map(|i| {
            let objects = spec.objects_at(i);
            let offsets = spec.texture_offsets(i);
            let thermal = render_view(&objects, &spec.camera_pose(i, CameraKind::Thermal), &spec.rig.thermal)?;
            let rgb_view = render_view(&objects, &spec.camera_pose(i, CameraKind::Rgb), &spec.rig.rgb)?;

            let mut rgb = ImageGrid::new(spec.rig.rgb.width, spec.rig.rgb.height, 3);
            for (px, hit) in rgb.data_mut().chunks_exact_mut(3).zip(&rgb_view.hits) {
                if let Some((k, x)) = hit {
                    let x = x - offsets[*k];
                    for (c, v) in px.iter_mut().enumerate() {
                        *v = objects[*k].albedo[c].eval(&x).clamp(0.0, 1.0);
                    }
                }
            }
            let counts = thermal
                .hits
                .iter()
                .map(|hit| {
                    let t = hit.map_or(-30.0, |(k, x)| objects[k].temperature.eval(&(x - offsets[k])));
                    let mut r = celsius_to_raw(t) as f64;
                    if spec.thermal_noise_counts > 0.0 {
                        r = (r + spec.thermal_noise_counts * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).round();
                    }
                    r.clamp(0.0, crate::thermal::RAW_MAX as f64) as u16
                })
                .collect();
            Ok(MultiSpectralPair {
                rgb,
                thermal_raw: RawThermalImage::new(spec.rig.thermal.width, spec.rig.thermal.height, counts)?,
                gt_depth_thermal: thermal.depth,
                gt_depth_rgb: rgb_view.depth,
                gt_pose: spec.trajectory[i],
                timestamp: i as f64 * spec.frame_interval,
            })
        })
        .collect()
}

/// Exact correspondence field from frame `i` to frame `j` of one camera,
/// computed from ray-hit points. Pixels that miss the scene, leave the
/// image or are occluded in frame `j` are invalid.
pub fn analytic_flow(spec: &SceneSpec, i: usize, j: usize, camera: CameraKind) -> Result<FlowField> {
    if i >= spec.trajectory.len() || j >= spec.trajectory.len() {
        return Err(domain("frame index outside the trajectory"));
    }
    let k = spec.intrinsics(camera);
    let (pi, pj) = (spec.camera_pose(i, camera), spec.camera_pose(j, camera));
    let (obj_i, obj_j) = (spec.objects_at(i), spec.objects_at(j));
    let pj_inv = pj.inverse();
    let mut flow = FlowField::from_fn(k.width, k.height, |_, _| None);
    for y in 0..k.height {
        for x in 0..k.width {
            let ray = k.ray(x as f64, y as f64);
            let dir = pi.rotation * ray;
            let Some(hit) = cast(&obj_i, &pi.translation, &dir, ray.z) else { continue };
            let world = pi.translation + dir * (hit.depth / ray.z);
            let local = pj_inv.transform(&world);
            if local.z <= 1e-6 {
                continue;
            }
            let q = [k.fx * local.x / local.z + k.cx, k.fy * local.y / local.z + k.cy];
            if !k.in_image(q[0], q[1]) {
                continue;
            }
            // re-hit test from camera j
            let ray_j = k.ray(q[0], q[1]);
            let dir_j = pj.rotation * ray_j;
            match cast(&obj_j, &pj.translation, &dir_j, ray_j.z) {
                Some(h) if (h.depth - local.z).abs() <= 1e-6 * local.z.max(1.0) => {}
                _ => continue,
            }
            flow.flow.set(x, y, 0, q[0] - x as f64);
            flow.flow.set(x, y, 1, q[1] - y as f64);
            flow.mask.set(x, y, 0, 1.0);
        }
    }
    Ok(flow)
}

/// Thermal-camera motions between consecutive frames (`poses[k]` maps frame
/// `k` coordinates to frame `k+1`).
pub fn relative_motions(frames: &[MultiSpectralPair]) -> Vec<RigidPose> {
    frames
        .windows(2)
        .map(|w| relative_motion(&w[0].gt_pose, &w[1].gt_pose))
        .collect()
}

fn fronto_plane(z: f64, half: f64, albedo: [Field; 3], temperature: Field) -> SceneObject {
    SceneObject {
        shape: Shape::Plane {
            pose: RigidPose::from_translation(Vector3::new(0.0, 0.0, z)),
            half_size: [half, half],
        },
        albedo,
        temperature,
    }
}

/// A `size × size` rig with square pixels, ~56° field of view and a 10 cm
/// horizontal thermal-to-RGB baseline.
pub fn desk_rig(size: usize) -> Rig {
    let k = CameraIntrinsics::centered(size as f64 * 60.0 / 64.0, size, size);
    Rig {
        thermal: k,
        rgb: k,
        extrinsic: RigidPose::from_translation(Vector3::new(-0.1, 0.0, 0.0)),
    }
}

/// Built-in scenes selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    AffinePlane,
    TexturedCorner,
}

impl ScenePreset {
    pub fn build(self, size: usize, n_frames: usize) -> SceneSpec {
        match self {
            ScenePreset::AffinePlane => SceneSpec::affine_plane(size, n_frames),
            ScenePreset::TexturedCorner => SceneSpec::textured_corner(size, n_frames),
        }
    }
}

impl SceneSpec {
    /// Fronto-parallel plane at 5 m with affine albedo and temperature,
    /// viewed by a camera that translates and rolls about its optical axis,
    /// so every rendered image is affine in pixel coordinates.
    pub fn affine_plane(size: usize, n_frames: usize) -> SceneSpec {
        let albedo = [
            Field::Affine { base: 0.5, gradient: [0.06, 0.02, 0.0] },
            Field::Affine { base: 0.45, gradient: [-0.03, 0.05, 0.0] },
            Field::Affine { base: 0.5, gradient: [0.02, -0.04, 0.0] },
        ];
        let temperature = Field::Affine { base: 25.0, gradient: [1.2, -0.8, 0.0] };
        let trajectory = (0..n_frames)
            .map(|i| {
                let s = i as f64;
                RigidPose::new(
                    rotation_about(&Vector3::z(), 0.02 * s),
                    Vector3::new(0.12 * s, -0.05 * s, 0.1 * s),
                )
            })
            .collect();
        SceneSpec {
            seed: 7,
            layout: vec![fronto_plane(5.0, 8.0, albedo, temperature)],
            trajectory,
            rig: desk_rig(size),
            affine_texture: true,
            thermal_noise_counts: 0.0,
            moving_object: None,
            frame_interval: 0.1,
        }
    }

    /// Inside corner of a room (two walls meeting 6.5 m ahead, plus a floor)
    /// with smooth multi-frequency textures, under a general 6-DoF
    /// trajectory. Depths span roughly 3.5–7 m without self-occlusion, and
    /// the three plane orientations keep pose and depth jointly observable.
    pub fn textured_corner(size: usize, n_frames: usize) -> SceneSpec {
        let waves = |base: f64, amp: f64, phase: f64| Field::Waves {
            base,
            waves: vec![
                Wave { amp, freq: [0.44, 0.18, 0.3], phase },
                Wave { amp: 0.8 * amp, freq: [-0.14, 0.5, 0.22], phase: phase + 1.3 },
                Wave { amp: 0.5 * amp, freq: [0.32, -0.36, -0.4], phase: phase + 2.1 },
            ],
        };
        let surface = |shape: Shape| SceneObject {
            shape,
            albedo: [waves(0.5, 0.16, 0.0), waves(0.5, 0.15, 0.7), waves(0.48, 0.14, 1.9)],
            temperature: waves(25.0, 3.5, 0.4),
        };
        let corner = Vector3::new(0.3, 0.0, 6.5);
        let down = Vector3::y();
        let wall = |dir: Vector3<f64>| {
            let u = dir.normalize();
            surface(Shape::Plane {
                pose: plane_pose(corner + u * 6.0, u, down),
                half_size: [6.0, 6.0],
            })
        };
        let floor = surface(Shape::Plane {
            pose: plane_pose(Vector3::new(0.0, 1.6, 3.0), Vector3::x(), Vector3::z()),
            half_size: [12.0, 12.0],
        });
        // consecutive steps alternate between sideways and vertical motion so
        // neighbouring pairs have well separated epipoles
        let mut pose = RigidPose::identity();
        let trajectory = (0..n_frames)
            .map(|i| {
                if i > 0 {
                    let (step, axis) = if i % 2 == 1 {
                        (Vector3::new(0.3, 0.03, 0.1), Vector3::new(0.1, 1.0, 0.2))
                    } else {
                        (Vector3::new(-0.05, -0.3, 0.1), Vector3::new(1.0, 0.1, -0.3))
                    };
                    pose = pose.compose(&RigidPose::new(rotation_about(&axis, 0.03), step));
                }
                pose
            })
            .collect();
        SceneSpec {
            seed: 11,
            layout: vec![wall(Vector3::new(-1.0, 0.0, -0.8)), wall(Vector3::new(1.0, 0.0, -0.9)), floor],
            trajectory,
            rig: desk_rig(size),
            affine_texture: false,
            thermal_noise_counts: 0.0,
            moving_object: None,
            frame_interval: 0.1,
        }
    }
}

/// World-from-local pose of a plane through `center` spanned by the unit
/// vectors `u` and (the part of `v` orthogonal to) `u`.
fn plane_pose(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>) -> RigidPose {
    let v = (v - u * u.dot(&v)).normalize();
    RigidPose::new(Matrix3::from_columns(&[u, v, u.cross(&v)]), center)
}

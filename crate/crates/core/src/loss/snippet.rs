//! The multi-spectral objective over a snippet of consecutive frames, with
//! its reverse-mode gradient.
//!
//! Each adjacent frame pair is evaluated in both directions. A directed pair
//! `(a → b)` with thermal motion `T` contributes
//!
//! * a thermal branch: the thermal loss image of `b` inverse-warped into `a`
//!   with depth `D_a` and motion `T`, plus geometric consistency of `D_b`
//!   against the motion-compensated `D_a`;
//! * an RGB branch: `D_a`, `D_b` forward-warped into the RGB camera through
//!   the reversed rig flow, the RGB motion `E·T·E⁻¹`, and the same two terms
//!   on the RGB images.
//!
//! Directed-pair terms are averaged and combined with [`LossWeights`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    abs_slope, depth_diff, depth_diff_grad, reconstruction_from_ssim, smoothness_with_grad, ssim_backward,
    ssim_map_unchecked, LossReport, LossTerms, LossWeights,
};
use crate::camera::CameraIntrinsics;
use crate::error::{domain, Error, Result};
use crate::frame::{MultiSpectralPair, Rig};
use crate::image::{reflect, DepthMap, ImageGrid, Mask};
use crate::se3::RigidPose;
use crate::thermal::ThermalRepresentationConfig;
use crate::warp::{
    trace_forward_depth, trace_geometry, warp_pose, FlowReversalConfig, ForwardDepthTrace, PixelGeom,
    PoseGrad,
};

/// Everything besides the weights that shapes the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub thermal: ThermalRepresentationConfig,
    pub flow: FlowReversalConfig,
    /// Differentiate through `M = 1 − D_diff` inside the reconstruction term
    /// (by default `M` is treated as a constant).
    pub differentiate_mask: bool,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.thermal.validate()?;
        self.flow.validate()
    }
}

/// Loss images of a snippet, prepared once per optimization run.
#[derive(Clone, Debug)]
pub struct SnippetInputs {
    pub thermal: Vec<ImageGrid>,
    pub rgb: Vec<ImageGrid>,
    pub rig: Rig,
}

impl SnippetInputs {
    pub fn new(frames: &[MultiSpectralPair], rig: &Rig, cfg: &LossConfig) -> Result<Self> {
        if frames.len() < 2 {
            return Err(domain("a snippet needs at least two frames"));
        }
        rig.validate()?;
        cfg.validate()?;
        for f in frames {
            f.check_against(rig)?;
        }
        Ok(Self {
            thermal: frames.iter().map(|f| cfg.thermal.loss_image(&f.thermal_raw)).collect(),
            rgb: frames.iter().map(|f| f.rgb.clone()).collect(),
            rig: rig.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.thermal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thermal.is_empty()
    }
}

/// Per-pixel maps of one branch of a directed pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchDiagnostics {
    pub reconstruction: ImageGrid,
    pub depth_diff: ImageGrid,
    /// `M = 1 − D_diff` on the valid set.
    pub mask: Mask,
    pub valid: Mask,
    /// Valid pixels whose whole SSIM window is valid.
    pub valid_reconstruction: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDiagnostics {
    pub target: usize,
    pub source: usize,
    pub thermal: BranchDiagnostics,
    pub rgb: BranchDiagnostics,
}

struct BranchInput<'a> {
    target: &'a ImageGrid,
    source: &'a ImageGrid,
    target_depth: &'a DepthMap,
    target_mask: Option<&'a [bool]>,
    source_depth: &'a DepthMap,
    source_mask: Option<&'a [bool]>,
    pose: RigidPose,
    k: CameraIntrinsics,
    gamma: f64,
}

#[derive(Clone, Debug)]
struct BranchTrace {
    geom: Vec<Option<PixelGeom>>,
    warped: ImageGrid,
    ddiff: Vec<f64>,
    sampled: Vec<f64>,
    rec_map: Vec<f64>,
    v_rec: Vec<bool>,
    n_v: usize,
    n_rec: usize,
    rec: f64,
    gc: f64,
}

fn erode(valid: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-1isize..=1).all(|dy| {
                let yy = reflect(y as isize + dy, h);
                (-1isize..=1).all(|dx| valid[yy * w + reflect(x as isize + dx, w)])
            });
        }
    }
    out
}

impl BranchTrace {
    fn evaluate(inp: &BranchInput) -> Result<Self> {
        let (w, h, ch) = (inp.target.width(), inp.target.height(), inp.target.channels());
        let mut geom = trace_geometry(inp.target_depth, inp.target_mask, &inp.pose, &inp.k, &inp.k)?;
        if let Some(mask) = inp.source_mask {
            for g in geom.iter_mut() {
                if g.is_some_and(|g| !g.tap.all_set(mask)) {
                    *g = None;
                }
            }
        }
        let n = w * h;
        let mut warped = ImageGrid::new(w, h, ch);
        let mut sampled = vec![0.0; n];
        let mut ddiff = vec![0.0; n];
        let valid: Vec<bool> = geom.iter().map(Option::is_some).collect();
        let mut n_v = 0;
        let mut gc_sum = 0.0;
        for (i, g) in geom.iter().enumerate() {
            let Some(g) = g else { continue };
            for c in 0..ch {
                warped.data_mut()[i * ch + c] = g.tap.sample(inp.source, c);
            }
            let ds = g.tap.sample(inp.source_depth, 0);
            if !(ds > 0.0) {
                return Err(domain("non-positive source depth on the valid set"));
            }
            sampled[i] = ds;
            ddiff[i] = depth_diff(ds, g.moved.z);
            gc_sum += ddiff[i];
            n_v += 1;
        }
        let v_rec = erode(&valid, w, h);
        let ssim = ssim_map_unchecked(inp.target, &warped);
        let rec_map = reconstruction_from_ssim(inp.target, &warped, &ssim, inp.gamma).into_vec();
        let mut n_rec = 0;
        let mut rec_sum = 0.0;
        for i in 0..n {
            if v_rec[i] {
                rec_sum += (1.0 - ddiff[i]) * rec_map[i];
                n_rec += 1;
            }
        }
        Ok(Self {
            geom,
            warped,
            ddiff,
            sampled,
            rec_map,
            v_rec,
            n_v,
            n_rec,
            rec: if n_rec == 0 { 0.0 } else { rec_sum / n_rec as f64 },
            gc: if n_v == 0 { 0.0 } else { gc_sum / n_v as f64 },
        })
    }

    fn diagnostics(&self, w: usize, h: usize) -> BranchDiagnostics {
        let grid = |f: &dyn Fn(usize) -> f64| ImageGrid::from_fn(w, h, 1, |x, y, _| f(y * w + x));
        let valid = |i: usize| self.geom[i].is_some();
        BranchDiagnostics {
            reconstruction: grid(&|i| self.rec_map[i]),
            depth_diff: grid(&|i| self.ddiff[i]),
            mask: grid(&|i| if valid(i) { 1.0 - self.ddiff[i] } else { 0.0 }),
            valid: grid(&|i| valid(i) as u8 as f64),
            valid_reconstruction: grid(&|i| self.v_rec[i] as u8 as f64),
        }
    }

    /// Returns `(∂/∂target depth, ∂/∂source depth, ∂/∂pose)` of
    /// `g_rec·rec + g_gc·gc`.
    fn backward(
        &self,
        inp: &BranchInput,
        g_rec: f64,
        g_gc: f64,
        differentiate_mask: bool,
    ) -> (Vec<f64>, Vec<f64>, PoseGrad) {
        let (w, h, ch) = (inp.target.width(), inp.target.height(), inp.target.channels());
        let n = w * h;
        let mut g_ddiff = vec![0.0; n];
        let mut g_map = vec![0.0; n];
        if self.n_v > 0 && g_gc != 0.0 {
            let s = g_gc / self.n_v as f64;
            for (g, geom) in g_ddiff.iter_mut().zip(&self.geom) {
                if geom.is_some() {
                    *g = s;
                }
            }
        }
        if self.n_rec > 0 && g_rec != 0.0 {
            let s = g_rec / self.n_rec as f64;
            for i in 0..n {
                if self.v_rec[i] {
                    g_map[i] = s * (1.0 - self.ddiff[i]);
                    if differentiate_mask {
                        g_ddiff[i] -= s * self.rec_map[i];
                    }
                }
            }
        }

        // ∂/∂warped: L1 part directly, SSIM part through the windows.
        let mut g_warped = vec![0.0; n * ch];
        let l1 = (1.0 - inp.gamma) / ch as f64;
        let (t, wp) = (inp.target.data(), self.warped.data());
        for i in 0..n {
            if g_map[i] == 0.0 {
                continue;
            }
            for c in 0..ch {
                let s = abs_slope(wp[i * ch + c] - t[i * ch + c], 1.0);
                g_warped[i * ch + c] += g_map[i] * l1 * s;
            }
        }
        if inp.gamma > 0.0 {
            let g_ssim: Vec<f64> = g_map.iter().map(|g| -0.5 * inp.gamma * g).collect();
            ssim_backward(inp.target, &self.warped, &g_ssim, &mut g_warped);
        }

        let mut g_target = vec![0.0; n];
        let mut g_source = vec![0.0; inp.source_depth.len_pixels()];
        let mut g_pose = PoseGrad::default();
        for (i, g) in self.geom.iter().enumerate() {
            let Some(g) = g else { continue };
            let (ga, gb) = if g_ddiff[i] != 0.0 {
                let (da, db) = depth_diff_grad(self.sampled[i], g.moved.z);
                (g_ddiff[i] * da, g_ddiff[i] * db)
            } else {
                (0.0, 0.0)
            };
            let mut gq = [0.0; 2];
            for c in 0..ch {
                let gw = g_warped[i * ch + c];
                if gw != 0.0 {
                    let gc = g.tap.coord_gradient(inp.source, c);
                    gq[0] += gw * gc[0];
                    gq[1] += gw * gc[1];
                }
            }
            if ga != 0.0 {
                g.tap.scatter(&mut g_source, ga);
                let gc = g.tap.coord_gradient(inp.source_depth, 0);
                gq[0] += ga * gc[0];
                gq[1] += ga * gc[1];
            }
            if gq == [0.0; 2] && gb == 0.0 {
                continue;
            }
            g_target[i] = g.backward(&inp.pose, &inp.k, gq, gb, Some(&mut g_pose));
        }
        (g_target, g_source, g_pose)
    }
}

/// One directed frame pair `target ← source`.
#[derive(Clone, Copy, Debug)]
struct PairSpec {
    target: usize,
    source: usize,
    pose_index: usize,
    inverted: bool,
}

fn pair_specs(n_frames: usize) -> Vec<PairSpec> {
    (0..n_frames - 1)
        .flat_map(|k| {
            [
                PairSpec {
                    target: k,
                    source: k + 1,
                    pose_index: k,
                    inverted: false,
                },
                PairSpec {
                    target: k + 1,
                    source: k,
                    pose_index: k,
                    inverted: true,
                },
            ]
        })
        .collect()
}

#[derive(Clone, Debug)]
struct PairTrace {
    spec: PairSpec,
    thermal_pose: RigidPose,
    rgb_pose: RigidPose,
    thermal: BranchTrace,
    rgb: Option<BranchTrace>,
}

/// Traced evaluation of the snippet objective.
#[derive(Clone, Debug)]
pub(crate) struct SnippetTrace {
    forward: Vec<ForwardDepthTrace>,
    pairs: Vec<PairTrace>,
    pub terms: LossTerms,
    pub total: f64,
    pub empty_valid: Vec<String>,
}

/// Gradient of the total objective.
#[derive(Clone, Debug)]
pub(crate) struct SnippetGradient {
    pub depth: Vec<Vec<f64>>,
    pub pose: Vec<PoseGrad>,
}

impl SnippetTrace {
    pub fn evaluate(
        inputs: &SnippetInputs,
        depths: &[DepthMap],
        poses: &[RigidPose],
        weights: &LossWeights,
        cfg: &LossConfig,
    ) -> Result<Self> {
        let n = inputs.len();
        if depths.len() != n || poses.len() + 1 != n {
            return Err(domain(format!(
                "snippet of {n} frames needs {n} depth maps and {} poses",
                n - 1
            )));
        }
        let rig = &inputs.rig;
        for d in depths {
            if d.width() != rig.thermal.width || d.height() != rig.thermal.height || d.channels() != 1 {
                return Err(domain("depth map does not match the thermal camera"));
            }
        }
        let with_rgb = true;
        let forward: Vec<ForwardDepthTrace> = if with_rgb {
            depths
                .par_iter()
                .map(|d| trace_forward_depth(d, &rig.extrinsic, &rig.thermal, &rig.rgb, &cfg.flow))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let holes: Vec<Vec<bool>> = forward.iter().map(|f| f.hole.iter().map(|h| !h).collect()).collect();

        let specs = pair_specs(n);
        let pairs: Vec<PairTrace> = specs
            .par_iter()
            .map(|spec| {
                let base = poses[spec.pose_index];
                let thermal_pose = if spec.inverted { base.inverse() } else { base };
                let rgb_pose = warp_pose(&thermal_pose, &rig.extrinsic);
                let thermal = BranchTrace::evaluate(&BranchInput {
                    target: &inputs.thermal[spec.target],
                    source: &inputs.thermal[spec.source],
                    target_depth: &depths[spec.target],
                    target_mask: None,
                    source_depth: &depths[spec.source],
                    source_mask: None,
                    pose: thermal_pose,
                    k: rig.thermal,
                    gamma: weights.gamma_t,
                })?;
                let rgb = if with_rgb {
                    Some(BranchTrace::evaluate(&BranchInput {
                        target: &inputs.rgb[spec.target],
                        source: &inputs.rgb[spec.source],
                        target_depth: &forward[spec.target].depth,
                        target_mask: Some(&holes[spec.target]),
                        source_depth: &forward[spec.source].depth,
                        source_mask: Some(&holes[spec.source]),
                        pose: rgb_pose,
                        k: rig.rgb,
                        gamma: weights.gamma_rgb,
                    })?)
                } else {
                    None
                };
                Ok(PairTrace {
                    spec: *spec,
                    thermal_pose,
                    rgb_pose,
                    thermal,
                    rgb,
                })
            })
            .collect::<Result<_>>()?;

        let np = pairs.len() as f64;
        let mut terms = LossTerms::default();
        let mut empty_valid = Vec::new();
        for p in &pairs {
            let label = format!("{}->{}", p.spec.target, p.spec.source);
            terms.rec_t += p.thermal.rec / np;
            terms.gc_t += p.thermal.gc / np;
            if p.thermal.n_v == 0 {
                empty_valid.push(format!("gc_T[{label}]"));
            }
            if p.thermal.n_rec == 0 {
                empty_valid.push(format!("rec_T[{label}]"));
            }
            if let Some(rgb) = &p.rgb {
                terms.rec_rgb += rgb.rec / np;
                terms.gc_rgb += rgb.gc / np;
                if rgb.n_v == 0 {
                    empty_valid.push(format!("gc_RGB[{label}]"));
                }
                if rgb.n_rec == 0 {
                    empty_valid.push(format!("rec_RGB[{label}]"));
                }
            }
        }
        if weights.use_smoothness {
            terms.smooth = depths
                .iter()
                .zip(&inputs.thermal)
                .map(|(d, img)| smoothness_with_grad(d, img, false).0)
                .sum::<f64>()
                / n as f64;
        }
        let total = weights.combine(&terms);
        for (name, v) in LossTerms::NAMES.iter().zip(terms.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.to_string() });
            }
        }
        Ok(Self {
            forward,
            pairs,
            terms,
            total,
            empty_valid,
        })
    }

    pub fn report(&self, inputs: &SnippetInputs) -> LossReport {
        let (tw, th) = (inputs.rig.thermal.width, inputs.rig.thermal.height);
        let (rw, rh) = (inputs.rig.rgb.width, inputs.rig.rgb.height);
        let empty_rgb = || BranchDiagnostics {
            reconstruction: ImageGrid::new(rw, rh, 1),
            depth_diff: ImageGrid::new(rw, rh, 1),
            mask: ImageGrid::new(rw, rh, 1),
            valid: ImageGrid::new(rw, rh, 1),
            valid_reconstruction: ImageGrid::new(rw, rh, 1),
        };
        LossReport {
            total: self.total,
            terms: self.terms,
            empty_valid: self.empty_valid.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| PairDiagnostics {
                    target: p.spec.target,
                    source: p.spec.source,
                    thermal: p.thermal.diagnostics(tw, th),
                    rgb: p.rgb.as_ref().map_or_else(empty_rgb, |r| r.diagnostics(rw, rh)),
                })
                .collect(),
        }
    }

    pub fn backward(
        &self,
        inputs: &SnippetInputs,
        depths: &[DepthMap],
        poses: &[RigidPose],
        weights: &LossWeights,
        cfg: &LossConfig,
    ) -> SnippetGradient {
        let n = inputs.len();
        let rig = &inputs.rig;
        let np = self.pairs.len() as f64;
        let holes: Vec<Vec<bool>> = self.forward.iter().map(|f| f.hole.iter().map(|h| !h).collect()).collect();
        let (gr_t, gg_t) = (
            weights.lambda_t * weights.alpha / np,
            weights.lambda_t * weights.beta / np,
        );
        let (gr_rgb, gg_rgb) = (
            weights.lambda_rgb * weights.alpha / np,
            weights.lambda_rgb * weights.beta / np,
        );

        struct PairGrad {
            thermal: (Vec<f64>, Vec<f64>, PoseGrad),
            rgb: Option<(Vec<f64>, Vec<f64>, PoseGrad)>,
        }
        let per_pair: Vec<PairGrad> = self
            .pairs
            .par_iter()
            .map(|p| {
                let spec = p.spec;
                let thermal = p.thermal.backward(
                    &BranchInput {
                        target: &inputs.thermal[spec.target],
                        source: &inputs.thermal[spec.source],
                        target_depth: &depths[spec.target],
                        target_mask: None,
                        source_depth: &depths[spec.source],
                        source_mask: None,
                        pose: p.thermal_pose,
                        k: rig.thermal,
                        gamma: weights.gamma_t,
                    },
                    gr_t,
                    gg_t,
                    cfg.differentiate_mask,
                );
                let rgb = p.rgb.as_ref().filter(|_| weights.lambda_rgb > 0.0).map(|rgb| {
                    rgb.backward(
                        &BranchInput {
                            target: &inputs.rgb[spec.target],
                            source: &inputs.rgb[spec.source],
                            target_depth: &self.forward[spec.target].depth,
                            target_mask: Some(&holes[spec.target]),
                            source_depth: &self.forward[spec.source].depth,
                            source_mask: Some(&holes[spec.source]),
                            pose: p.rgb_pose,
                            k: rig.rgb,
                            gamma: weights.gamma_rgb,
                        },
                        gr_rgb,
                        gg_rgb,
                        cfg.differentiate_mask,
                    )
                });
                PairGrad { thermal, rgb }
            })
            .collect();

        let n_t = rig.thermal.width * rig.thermal.height;
        let n_rgb = rig.rgb.width * rig.rgb.height;
        let mut g_depth = vec![vec![0.0; n_t]; n];
        let mut g_rgb_depth = vec![vec![0.0; n_rgb]; n];
        let mut g_pose = vec![PoseGrad::default(); poses.len()];
        let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        for (p, g) in self.pairs.iter().zip(&per_pair) {
            let spec = p.spec;
            let base = &poses[spec.pose_index];
            let (gt, gs, gp) = &g.thermal;
            add(&mut g_depth[spec.target], gt);
            add(&mut g_depth[spec.source], gs);
            let mut on_pair_pose = *gp;
            if let Some((gt, gs, gp)) = &g.rgb {
                add(&mut g_rgb_depth[spec.target], gt);
                add(&mut g_rgb_depth[spec.source], gs);
                on_pair_pose += gp.through_conjugation(&rig.extrinsic);
            }
            g_pose[spec.pose_index] += if spec.inverted {
                on_pair_pose.through_inverse(base)
            } else {
                on_pair_pose
            };
        }
        let back: Vec<Vec<f64>> = if weights.lambda_rgb == 0.0 {
            Vec::new()
        } else {
            self.forward
            .par_iter()
            .zip(&g_rgb_depth)
            .map(|(f, g)| f.backward(g, &rig.extrinsic, &rig.rgb, &cfg.flow))
            .collect()
        };
        for (dst, src) in g_depth.iter_mut().zip(&back) {
            add(dst, src);
        }
        if weights.use_smoothness && weights.smoothness_weight > 0.0 {
            let s = weights.smoothness_weight / n as f64;
            for ((dst, d), img) in g_depth.iter_mut().zip(depths).zip(&inputs.thermal) {
                let (_, g) = smoothness_with_grad(d, img, true);
                dst.iter_mut().zip(&g).for_each(|(a, b)| *a += s * b);
            }
        }
        SnippetGradient {
            depth: g_depth,
            pose: g_pose,
        }
    }
}

/// Evaluates the multi-spectral objective of a snippet at the given thermal
/// depths and frame-to-frame thermal motions (`poses[k]` maps frame `k`
/// camera coordinates to frame `k+1`).
pub fn snippet_loss(
    frames: &[MultiSpectralPair],
    depths: &[DepthMap],
    poses: &[RigidPose],
    weights: &LossWeights,
    rig: &Rig,
    cfg: &LossConfig,
) -> Result<LossReport> {
    weights.validate()?;
    let inputs = SnippetInputs::new(frames, rig, cfg)?;
    let trace = SnippetTrace::evaluate(&inputs, depths, poses, weights, cfg)?;
    Ok(trace.report(&inputs))
}

//! Joint refinement of per-pixel log-depth and frame-to-frame twists under
//! the snippet objective, with a finite-difference gradient checker.

use std::path::Path;

use nalgebra::{Vector3, Vector6};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{MultiSpectralPair, Rig};
use crate::image::{DepthMap, ImageGrid};
use crate::loss::{LossConfig, LossReport, LossTerms, LossWeights, SnippetInputs, SnippetTrace};
use crate::se3::{rotation_about, twist_gradient, RigidPose, Twist};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Steepest descent scaled per block by the configured steps.
    #[default]
    GradientDescent,
    /// Limited-memory BFGS preconditioned by the per-block steps.
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    /// History length for [`Method::Lbfgs`].
    pub memory: usize,
    /// Step applied to the log-depth gradient.
    pub depth_step: f64,
    /// Step applied to the twist gradient.
    pub twist_step: f64,
    pub max_iterations: usize,
    /// Stop when the total decreased by less than this fraction over the
    /// last [`CONVERGENCE_WINDOW`] iterations.
    pub tolerance: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub gradient_mode: GradientMode,
    /// Central-difference step for [`GradientMode::FiniteDifference`].
    pub fd_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::GradientDescent,
            memory: 8,
            depth_step: 1.0,
            twist_step: 1e-3,
            max_iterations: 2000,
            tolerance: 1e-6,
            depth_min: 0.1,
            depth_max: 100.0,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-4,
        }
    }
}

pub const CONVERGENCE_WINDOW: usize = 10;
pub const MAX_BACKTRACKS: usize = 20;

impl OptimizerConfig {
    /// L-BFGS with block steps tuned on the 64×64 recovery scene: the
    /// twist block moves 30× and depths 3000× the raw gradient.
    pub fn recovery() -> Self {
        Self {
            method: Method::Lbfgs,
            depth_step: 3000.0,
            twist_step: 30.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.depth_step >= 0.0
            && self.twist_step >= 0.0
            && self.depth_step.is_finite()
            && self.twist_step.is_finite()
            && self.tolerance >= 0.0
            && self.depth_min > 0.0
            && self.depth_max > self.depth_min
            && self.depth_max.is_finite()
            && self.fd_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Free variables of a three-frame snippet.
#[derive(Clone, Debug)]
pub struct OptimState {
    /// Natural log of each frame's thermal depth map.
    pub log_depths: Vec<ImageGrid>,
    /// `twists[k]` parameterizes the motion from frame `k` to frame `k+1`.
    pub twists: Vec<Twist>,
    pub iteration: usize,
    pub report: Option<LossReport>,
}

impl OptimState {
    /// Pixels with non-positive depth (misses in a rendered map) start at
    /// `fallback_depth`.
    pub fn from_depths_and_poses(depths: &[DepthMap], poses: &[RigidPose], fallback_depth: f64) -> Result<Self> {
        if fallback_depth <= 0.0 {
            return Err(crate::error::domain("fallback depth must be positive"));
        }
        Ok(Self {
            log_depths: depths
                .iter()
                .map(|d| d.map(|v| if v > 0.0 { v.ln() } else { fallback_depth.ln() }))
                .collect(),
            twists: poses.iter().map(RigidPose::log).collect(),
            iteration: 0,
            report: None,
        })
    }

    pub fn depths(&self) -> Vec<DepthMap> {
        self.log_depths.iter().map(|l| l.map(f64::exp)).collect()
    }

    pub fn poses(&self) -> Vec<RigidPose> {
        self.twists.iter().map(|t| RigidPose::exp(t).orthonormalized()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.log_depths.iter().map(ImageGrid::len_pixels).sum::<usize>() + 6 * self.twists.len()
    }

    fn clamp_depths(&mut self, cfg: &OptimizerConfig) {
        let (lo, hi) = (cfg.depth_min.ln(), cfg.depth_max.ln());
        for l in &mut self.log_depths {
            l.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }

    fn get(&self, p: Param) -> f64 {
        match p {
            Param::Depth { frame, x, y } => self.log_depths[frame].get(x, y, 0),
            Param::Twist { pose, coord } => self.twists[pose].0[coord],
        }
    }

    fn with(&self, p: Param, value: f64) -> OptimState {
        let mut s = OptimState {
            log_depths: self.log_depths.clone(),
            twists: self.twists.clone(),
            iteration: self.iteration,
            report: None,
        };
        match p {
            Param::Depth { frame, x, y } => s.log_depths[frame].set(x, y, 0, value),
            Param::Twist { pose, coord } => s.twists[pose].0[coord] = value,
        }
        s
    }
}

/// One scalar unknown of an [`OptimState`].
/// Seeded corruption of ground-truth depths and poses, used to build
/// starting points for refinement and jittered gradient-check instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    /// Each depth is multiplied by an independent `U(1 − n, 1 + n)` factor.
    pub depth_noise: f64,
    /// Each pose's rotation is premultiplied by a rotation of exactly this
    /// angle about a uniformly random axis.
    pub rotation_deg: f64,
    /// Each translation is offset by exactly this length in a uniformly
    /// random direction.
    pub translation_m: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self::recovery()
    }
}

impl Perturbation {
    /// `U(0.8, 1.2)` depth noise with 2° / 5 cm pose errors.
    pub fn recovery() -> Self {
        Self { depth_noise: 0.2, rotation_deg: 2.0, translation_m: 0.05 }
    }

    /// Small jitter that moves an instance off exact zero residuals.
    pub fn jitter() -> Self {
        Self { depth_noise: 0.05, rotation_deg: 0.5, translation_m: 0.01 }
    }

    pub fn none() -> Self {
        Self { depth_noise: 0.0, rotation_deg: 0.0, translation_m: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.depth_noise) || !(self.rotation_deg >= 0.0) || !(self.translation_m >= 0.0) {
            return Err(Error::Config(
                "perturbation needs 0 ≤ depth_noise < 1 and non-negative pose offsets".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, depths: &[DepthMap], poses: &[RigidPose], seed: u64) -> (Vec<DepthMap>, Vec<RigidPose>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.depth_noise;
        let depths = depths
            .iter()
            .map(|d| {
                let mut d = d.clone();
                if n > 0.0 {
                    d.data_mut().iter_mut().for_each(|v| *v *= rng.gen_range(1.0 - n..=1.0 + n));
                }
                d
            })
            .collect();
        let poses = poses
            .iter()
            .map(|p| {
                let axis = Vector3::from(UnitSphere.sample(&mut rng));
                let dir = Vector3::from(UnitSphere.sample(&mut rng));
                RigidPose::new(
                    rotation_about(&axis, self.rotation_deg.to_radians()) * p.rotation,
                    p.translation + dir * self.translation_m,
                )
            })
            .collect();
        (depths, poses)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Param {
    Depth { frame: usize, x: usize, y: usize },
    Twist { pose: usize, coord: usize },
}

/// Gradient of the total with respect to log-depths and twists.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub total: f64,
    pub log_depths: Vec<ImageGrid>,
    pub twists: Vec<Vector6<f64>>,
}

impl Gradients {
    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Depth { frame, x, y } => self.log_depths[frame].get(x, y, 0),
            Param::Twist { pose, coord } => self.twists[pose][coord],
        }
    }

    pub fn norm(&self) -> f64 {
        let d: f64 = self.log_depths.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
        let t: f64 = self.twists.iter().map(|g| g.norm_squared()).sum();
        (d + t).sqrt()
    }
}

/// Snippet inputs bundled with the objective's settings.
pub struct Objective {
    inputs: SnippetInputs,
    weights: LossWeights,
    cfg: LossConfig,
}

impl Objective {
    pub fn new(frames: &[MultiSpectralPair], rig: &Rig, weights: &LossWeights, cfg: &LossConfig) -> Result<Self> {
        weights.validate()?;
        cfg.validate()?;
        Ok(Self {
            inputs: SnippetInputs::new(frames, rig, cfg)?,
            weights: weights.clone(),
            cfg: cfg.clone(),
        })
    }

    fn trace(&self, state: &OptimState) -> Result<SnippetTrace> {
        SnippetTrace::evaluate(&self.inputs, &state.depths(), &state.poses(), &self.weights, &self.cfg)
    }

    pub fn total(&self, state: &OptimState) -> Result<f64> {
        Ok(self.trace(state)?.total)
    }

    pub fn report(&self, state: &OptimState) -> Result<LossReport> {
        Ok(self.trace(state)?.report(&self.inputs))
    }

    /// Exact reverse-mode gradients.
    pub fn gradients(&self, state: &OptimState) -> Result<Gradients> {
        let trace = self.trace(state)?;
        let out = self.chain(state, &trace, &self.weights);
        if out.norm().is_finite() {
            return Ok(out);
        }
        Err(Error::NonFinite {
            term: self.offending_term(state, &trace),
        })
    }

    fn chain(&self, state: &OptimState, trace: &SnippetTrace, weights: &LossWeights) -> Gradients {
        let depths = state.depths();
        let poses = state.poses();
        let g = trace.backward(&self.inputs, &depths, &poses, weights, &self.cfg);
        let log_depths = g
            .depth
            .iter()
            .zip(&depths)
            .map(|(gd, d)| {
                let data = gd.iter().zip(d.data()).map(|(g, d)| g * d).collect();
                ImageGrid::from_vec(d.width(), d.height(), 1, data)
                    .unwrap_or_else(|_| ImageGrid::filled(d.width(), d.height(), 1, f64::NAN))
            })
            .collect();
        let twists = g
            .pose
            .iter()
            .zip(&state.twists)
            .map(|(gp, xi)| twist_gradient(xi, &gp.r, &gp.t))
            .collect();
        Gradients {
            total: trace.total,
            log_depths,
            twists,
        }
    }

    /// Name of the first term whose isolated gradient is non-finite.
    fn offending_term(&self, state: &OptimState, trace: &SnippetTrace) -> String {
        let base = LossWeights {
            use_smoothness: false,
            ..self.weights.clone()
        };
        let isolated = [
            LossWeights { beta: 0.0, lambda_rgb: 0.0, ..base.clone() },
            LossWeights { alpha: 0.0, lambda_rgb: 0.0, ..base.clone() },
            LossWeights { beta: 0.0, lambda_t: 0.0, ..base.clone() },
            LossWeights { alpha: 0.0, lambda_t: 0.0, ..base.clone() },
            LossWeights {
                lambda_t: 0.0,
                lambda_rgb: 0.0,
                ..self.weights.clone()
            },
        ];
        LossTerms::NAMES
            .iter()
            .zip(&isolated)
            .find(|(_, w)| !self.chain(state, trace, w).norm().is_finite())
            .map_or_else(|| "total".to_string(), |(name, _)| name.to_string())
    }

    /// Central-difference gradient over every parameter.
    pub fn fd_gradients(&self, state: &OptimState, step: f64) -> Result<Gradients> {
        let total = self.total(state)?;
        let params = all_params(state);
        let values: Vec<f64> = params
            .par_iter()
            .map(|&p| self.central_difference(state, p, step))
            .collect::<Result<_>>()?;
        let mut out = Gradients {
            total,
            log_depths: state
                .log_depths
                .iter()
                .map(|l| ImageGrid::new(l.width(), l.height(), 1))
                .collect(),
            twists: vec![Vector6::zeros(); state.twists.len()],
        };
        for (p, v) in params.iter().zip(values) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("{p:?}"),
                });
            }
            match *p {
                Param::Depth { frame, x, y } => out.log_depths[frame].set(x, y, 0, v),
                Param::Twist { pose, coord } => out.twists[pose][coord] = v,
            }
        }
        Ok(out)
    }

    fn central_difference(&self, state: &OptimState, p: Param, step: f64) -> Result<f64> {
        let x = state.get(p);
        let plus = self.total(&state.with(p, x + step))?;
        let minus = self.total(&state.with(p, x - step))?;
        Ok((plus - minus) / (2.0 * step))
    }

    fn probe(&self, state: &OptimState, p: Param, step: f64) -> Result<Probe> {
        let x = state.get(p);
        let mut f = [0.0; 4];
        for (v, offset) in f.iter_mut().zip([step, -step, 0.5 * step, -0.5 * step]) {
            *v = self.total(&state.with(p, x + offset))?;
        }
        Ok(Probe {
            plus: f[0],
            minus: f[1],
            half_plus: f[2],
            half_minus: f[3],
        })
    }
}

/// Objective values at `x ± h` and `x ± h/2`.
struct Probe {
    plus: f64,
    minus: f64,
    half_plus: f64,
    half_minus: f64,
}

impl Probe {
    fn central(&self, h: f64) -> f64 {
        (self.plus - self.minus) / (2.0 * h)
    }

    /// Departure from smooth behaviour inside `[x − h, x + h]`: for a `C³`
    /// objective the second difference halves with the step and the central
    /// estimate moves by `O(h²)`; a knot breaks both.
    fn kink_measure(&self, f0: f64, h: f64) -> f64 {
        let second = (self.plus - 2.0 * f0 + self.minus) / h;
        let second_half = (self.half_plus - 2.0 * f0 + self.half_minus) / (0.5 * h);
        let half_central = (self.half_plus - self.half_minus) / h;
        (second - 2.0 * second_half).abs().max((self.central(h) - half_central).abs())
    }
}

fn all_params(state: &OptimState) -> Vec<Param> {
    let mut out = Vec::with_capacity(state.num_parameters());
    for (frame, l) in state.log_depths.iter().enumerate() {
        for y in 0..l.height() {
            for x in 0..l.width() {
                out.push(Param::Depth { frame, x, y });
            }
        }
    }
    out.extend(twist_params(state));
    out
}

fn twist_params(state: &OptimState) -> impl Iterator<Item = Param> {
    (0..state.twists.len()).flat_map(|pose| (0..6).map(move |coord| Param::Twist { pose, coord }))
}

/// Total objective and its gradients at `state`.
pub fn loss_gradients(
    state: &OptimState,
    frames: &[MultiSpectralPair],
    weights: &LossWeights,
    rig: &Rig,
    cfg: &LossConfig,
) -> Result<Gradients> {
    Objective::new(frames, rig, weights, cfg)?.gradients(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Number of sampled depth parameters; every twist coordinate is always
    /// checked in addition.
    pub samples: usize,
    pub seed: u64,
    /// Relative departure from smooth behaviour within the step above which
    /// a parameter is treated as sitting on a kink and excluded.
    pub kink_tolerance: f64,
    /// Gradients smaller than this fraction of the largest sampled gradient
    /// are compared in absolute terms against it.
    pub relative_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            samples: 240,
            seed: 0,
            kink_tolerance: 1e-5,
            relative_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub kinks: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<Param>,
    pub entries: Vec<GradCheckEntry>,
}

/// Compares analytic gradients against central differences on a seeded
/// random subset of parameters.
pub fn finite_diff_check(
    state: &OptimState,
    frames: &[MultiSpectralPair],
    weights: &LossWeights,
    rig: &Rig,
    cfg: &LossConfig,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let objective = Objective::new(frames, rig, weights, cfg)?;
    objective.check_gradients(state, check)
}

impl Objective {
    pub fn check_gradients(&self, state: &OptimState, check: &GradCheckConfig) -> Result<GradCheckReport> {
        let analytic = self.gradients(state)?;
        let f0 = analytic.total;
        let depth_params: Vec<Param> = all_params(state)
            .into_iter()
            .filter(|p| matches!(p, Param::Depth { .. }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
        let n = check.samples.min(depth_params.len());
        let mut chosen: Vec<usize> = sample(&mut rng, depth_params.len(), n).into_vec();
        chosen.sort_unstable();
        let params: Vec<Param> = chosen
            .into_iter()
            .map(|i| depth_params[i])
            .chain(twist_params(state))
            .collect();

        let h = check.step;
        let probes: Vec<Probe> = params
            .par_iter()
            .map(|&p| self.probe(state, p, h))
            .collect::<Result<_>>()?;

        let scale = params
            .iter()
            .zip(&probes)
            .map(|(&p, d)| analytic.get(p).abs().max(d.central(h).abs()))
            .fold(0.0, f64::max);
        let floor = (check.relative_floor * scale).max(f64::MIN_POSITIVE);
        let entries: Vec<GradCheckEntry> = params
            .iter()
            .zip(&probes)
            .map(|(&p, d)| {
                let a = analytic.get(p);
                let numeric = d.central(h);
                let magnitude = a.abs().max(numeric.abs()).max(floor);
                GradCheckEntry {
                    param: p,
                    analytic: a,
                    numeric,
                    rel_error: (a - numeric).abs() / magnitude,
                    kink: d.kink_measure(f0, h) > check.kink_tolerance * magnitude,
                }
            })
            .collect();
        let smooth: Vec<&GradCheckEntry> = entries.iter().filter(|e| !e.kink).collect();
        let worst = smooth
            .iter()
            .copied()
            .fold(None::<&GradCheckEntry>, |best, e| match best {
                Some(b) if b.rel_error >= e.rel_error => Some(b),
                _ => Some(e),
            });
        Ok(GradCheckReport {
            checked: smooth.len(),
            kinks: entries.len() - smooth.len(),
            max_rel_error: worst.map_or(0.0, |w| w.rel_error),
            mean_rel_error: if smooth.is_empty() {
                0.0
            } else {
                smooth.iter().map(|e| e.rel_error).sum::<f64>() / smooth.len() as f64
            },
            worst: worst.map(|w| w.param),
            entries,
        })
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    #[serde(rename = "rec_T")]
    pub rec_t: f64,
    #[serde(rename = "gc_T")]
    pub gc_t: f64,
    #[serde(rename = "rec_RGB")]
    pub rec_rgb: f64,
    #[serde(rename = "gc_RGB")]
    pub gc_rgb: f64,
    pub smooth: f64,
    pub step_scale: f64,
}

impl TraceRow {
    fn new(iteration: usize, total: f64, t: &LossTerms, step_scale: f64) -> Self {
        Self {
            iteration,
            total,
            rec_t: t.rec_t,
            gc_t: t.gc_t,
            rec_rgb: t.rec_rgb,
            gc_rgb: t.gc_rgb,
            smooth: t.smooth,
            step_scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// [`MAX_BACKTRACKS`] consecutive step halvings failed to decrease the
    /// objective; the last accepted state is returned.
    Diverged,
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub state: OptimState,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

impl RefineOutcome {
    pub fn into_result(self) -> Result<Self> {
        if self.stop == StopReason::Diverged {
            Err(Error::Diverged {
                backtracks: MAX_BACKTRACKS,
            })
        } else {
            Ok(self)
        }
    }
}

/// Gradient descent with per-block steps and backtracking halving.
///
/// A trial step is accepted only if it does not increase the total, so the
/// trace is nonincreasing. After an accepted step the step scale doubles
/// again, up to the configured steps.
pub fn refine(
    initial: OptimState,
    frames: &[MultiSpectralPair],
    weights: &LossWeights,
    rig: &Rig,
    loss_cfg: &LossConfig,
    cfg: &OptimizerConfig,
) -> Result<RefineOutcome> {
    let objective = Objective::new(frames, rig, weights, loss_cfg)?;
    objective.refine(initial, cfg)
}

impl Objective {
    pub fn refine(&self, initial: OptimState, cfg: &OptimizerConfig) -> Result<RefineOutcome> {
        cfg.validate()?;
        let mut state = initial;
        state.clamp_depths(cfg);
        let first = self.trace(&state)?;
        let mut current = first.total;
        let mut empty = first.empty_valid.len();
        let mut trace = vec![TraceRow::new(state.iteration, current, &first.terms, 1.0)];
        let precond = state.block_steps(cfg);
        let mut memory = Lbfgs::new(cfg.memory);
        let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut scale = 1.0f64;
        let mut stop = StopReason::MaxIterations;

        for _ in 0..cfg.max_iterations {
            if current == 0.0 {
                stop = StopReason::Converged;
                break;
            }
            let grad = match cfg.gradient_mode {
                GradientMode::Analytic => self.gradients(&state)?,
                GradientMode::FiniteDifference => self.fd_gradients(&state, cfg.fd_step)?,
            }
            .to_flat();
            if grad.iter().all(|g| *g == 0.0) {
                stop = StopReason::Converged;
                break;
            }
            let x = state.to_flat();
            if let Some((px, pg)) = previous.take() {
                memory.push(sub(&x, &px), sub(&grad, &pg));
            }
            let mut direction = match cfg.method {
                Method::GradientDescent => scaled_neg(&precond, &grad),
                Method::Lbfgs => {
                    scale = 1.0;
                    memory.direction(&grad, &precond)
                }
            };
            if dot(&direction, &grad) >= 0.0 {
                memory.clear();
                direction = scaled_neg(&precond, &grad);
            }

            let mut accepted = self.backtrack(&state, &x, &direction, &mut scale, current, empty, cfg)?;
            if accepted.is_none() && cfg.method == Method::Lbfgs {
                // curvature pairs can go stale near the noise floor of the loss
                memory.clear();
                direction = scaled_neg(&precond, &grad);
                scale = 1.0;
                accepted = self.backtrack(&state, &x, &direction, &mut scale, current, empty, cfg)?;
            }
            let Some((mut next, t)) = accepted else {
                stop = StopReason::Diverged;
                break;
            };
            next.iteration = state.iteration + 1;
            state = next;
            current = t.total;
            empty = t.empty_valid.len();
            trace.push(TraceRow::new(state.iteration, current, &t.terms, scale));
            if cfg.method == Method::GradientDescent {
                scale = (scale * 2.0).min(1.0);
            }
            previous = Some((x, grad));

            if trace.len() > CONVERGENCE_WINDOW {
                let before = trace[trace.len() - 1 - CONVERGENCE_WINDOW].total;
                if before - current <= cfg.tolerance * before {
                    stop = StopReason::Converged;
                    break;
                }
            }
        }
        state.report = Some(self.report(&state)?);
        Ok(RefineOutcome { state, trace, stop })
    }
}

impl Objective {
    /// Halves `scale` until the step along `direction` does not increase the
    /// loss or empty another valid set, at most `MAX_BACKTRACKS` times.
    #[allow(clippy::too_many_arguments)]
    fn backtrack(
        &self,
        state: &OptimState,
        x: &[f64],
        direction: &[f64],
        scale: &mut f64,
        current: f64,
        empty: usize,
        cfg: &OptimizerConfig,
    ) -> Result<Option<(OptimState, SnippetTrace)>> {
        for _ in 0..MAX_BACKTRACKS {
            let candidate = state.with_flat(&axpy(x, *scale, direction), cfg);
            let t = self.trace(&candidate)?;
            // a step that empties another valid set only looks cheaper
            if t.total <= current && t.empty_valid.len() <= empty {
                return Ok(Some((candidate, t)));
            }
            *scale *= 0.5;
        }
        Ok(None)
    }
}

impl OptimState {
    fn to_flat(&self) -> Vec<f64> {
        self.log_depths
            .iter()
            .flat_map(|l| l.data().iter().copied())
            .chain(self.twists.iter().flat_map(|t| t.0.iter().copied()))
            .collect()
    }

    /// A state of the same shape holding `flat`, with depths clamped.
    fn with_flat(&self, flat: &[f64], cfg: &OptimizerConfig) -> OptimState {
        let mut rest = flat;
        let log_depths = self
            .log_depths
            .iter()
            .map(|l| {
                let (head, tail) = rest.split_at(l.len_pixels());
                rest = tail;
                let mut out = l.clone();
                out.data_mut().copy_from_slice(head);
                out
            })
            .collect();
        let twists = rest.chunks_exact(6).map(|c| Twist(Vector6::from_column_slice(c))).collect();
        let mut out = OptimState {
            log_depths,
            twists,
            iteration: self.iteration,
            report: None,
        };
        out.clamp_depths(cfg);
        out
    }

    fn block_steps(&self, cfg: &OptimizerConfig) -> Vec<f64> {
        let n_depth: usize = self.log_depths.iter().map(ImageGrid::len_pixels).sum();
        let mut out = vec![cfg.depth_step; n_depth];
        out.resize(n_depth + 6 * self.twists.len(), cfg.twist_step);
        out
    }
}

impl Gradients {
    fn to_flat(&self) -> Vec<f64> {
        self.log_depths
            .iter()
            .flat_map(|l| l.data().iter().copied())
            .chain(self.twists.iter().flat_map(|t| t.iter().copied()))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + alpha * d).collect()
}

fn scaled_neg(p: &[f64], g: &[f64]) -> Vec<f64> {
    p.iter().zip(g).map(|(p, g)| -p * g).collect()
}

/// Limited-memory BFGS history with a diagonal initial inverse Hessian.
struct Lbfgs {
    capacity: usize,
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl Lbfgs {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: std::collections::VecDeque::with_capacity(capacity),
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        // skip pairs violating the curvature condition
        if self.capacity == 0 || !(sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt()) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion for `−H·g`.
    fn direction(&self, g: &[f64], precond: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
            alphas.push(a);
        }
        let gamma = self.pairs.back().map_or(1.0, |(s, y, _)| {
            let yhy: f64 = y.iter().zip(precond).map(|(y, p)| y * y * p).sum();
            dot(s, y) / yhy
        });
        let mut r: Vec<f64> = q.iter().zip(precond).map(|(q, p)| gamma * p * q).collect();
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &r);
            r.iter_mut().zip(s).for_each(|(r, s)| *r += (a - b) * s);
        }
        r.iter_mut().for_each(|v| *v = -*v);
        r
    }
}

/// Writes the trace as CSV with a header row.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{relative_motions, render_sequence, SceneSpec};

    fn setup(spec: &SceneSpec) -> (Vec<MultiSpectralPair>, Vec<DepthMap>, Vec<RigidPose>) {
        let frames = render_sequence(spec, 3).unwrap();
        let depths = frames.iter().map(|f| f.gt_depth_thermal.clone()).collect();
        let poses = relative_motions(&frames);
        (frames, depths, poses)
    }

    fn jittered(seed: u64) -> (SceneSpec, Vec<MultiSpectralPair>, OptimState) {
        let spec = SceneSpec::textured_corner(16, 3);
        let (frames, depths, poses) = setup(&spec);
        let (d, p) = Perturbation::jitter().apply(&depths, &poses, seed);
        (spec, frames, OptimState::from_depths_and_poses(&d, &p, 5.0).unwrap())
    }

    fn mask_aware() -> LossConfig {
        LossConfig { differentiate_mask: true, ..LossConfig::default() }
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let (spec, frames, state) = jittered(1);
        let report =
            finite_diff_check(&state, &frames, &LossWeights::indoor(), &spec.rig, &mask_aware(), &GradCheckConfig::default())
                .unwrap();
        assert!(report.checked >= 200, "{}", report.checked);
        assert!(report.max_rel_error <= 1e-4, "{:e} at {:?}", report.max_rel_error, report.worst);
    }

    #[test]
    fn gradient_check_is_deterministic() {
        let (spec, frames, state) = jittered(2);
        let cfg = GradCheckConfig { samples: 20, seed: 9, ..GradCheckConfig::default() };
        let run = || finite_diff_check(&state, &frames, &LossWeights::indoor(), &spec.rig, &mask_aware(), &cfg).unwrap();
        assert_eq!(serde_json::to_string(&run()).unwrap(), serde_json::to_string(&run()).unwrap());
    }

    #[test]
    fn pure_l1_at_zero_residual_is_flagged_as_kink() {
        let spec = SceneSpec::affine_plane(16, 3);
        let (frames, depths, poses) = setup(&spec);
        let state = OptimState::from_depths_and_poses(&depths, &poses, 5.0).unwrap();
        let weights = LossWeights { beta: 0.0, gamma_t: 0.0, gamma_rgb: 0.0, ..LossWeights::indoor() };
        let report = finite_diff_check(
            &state,
            &frames,
            &weights,
            &spec.rig,
            &LossConfig::default(),
            &GradCheckConfig { samples: 60, ..GradCheckConfig::default() },
        )
        .unwrap();
        let depth_kinks = report.entries.iter().filter(|e| e.kink && matches!(e.param, Param::Depth { .. })).count();
        assert!(depth_kinks > 0);
        assert!(report.entries.iter().filter(|e| !e.kink).all(|e| e.rel_error <= report.max_rel_error));
        assert_eq!(report.checked + report.kinks, report.entries.len());
    }

    #[test]
    fn rgb_branch_vanishes_without_its_weight() {
        let (spec, frames, state) = jittered(3);
        let weights = LossWeights { lambda_rgb: 0.0, ..LossWeights::indoor() };
        let mut scrambled = frames.clone();
        for f in &mut scrambled {
            f.rgb = f.rgb.map(|v| 1.0 - v * v);
        }
        let a = loss_gradients(&state, &frames, &weights, &spec.rig, &LossConfig::default()).unwrap();
        let b = loss_gradients(&state, &scrambled, &weights, &spec.rig, &LossConfig::default()).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn gradient_vanishes_at_an_exact_fit() {
        // the RGB branch of the affine plane fits to round-off; thermal
        // counts are quantized to 14 bits and do not
        let spec = SceneSpec::affine_plane(16, 3);
        let (frames, depths, poses) = setup(&spec);
        let state = OptimState::from_depths_and_poses(&depths, &poses, 5.0).unwrap();
        let weights = LossWeights { lambda_t: 0.0, ..LossWeights::indoor() };
        let g = loss_gradients(&state, &frames, &weights, &spec.rig, &LossConfig::default()).unwrap();
        assert!(g.total < 1e-12, "{}", g.total);
        assert!(g.norm() < 1e-5, "{}", g.norm());
    }

    #[test]
    fn refine_from_ground_truth_stops_without_progress() {
        let spec = SceneSpec::affine_plane(16, 3);
        let (frames, depths, poses) = setup(&spec);
        let state = OptimState::from_depths_and_poses(&depths, &poses, 5.0).unwrap();
        let out = refine(state, &frames, &LossWeights::indoor(), &spec.rig, &LossConfig::default(), &OptimizerConfig::default())
            .unwrap();
        let first = out.trace[0].total;
        let last = out.trace.last().unwrap().total;
        assert!(out.stop != StopReason::MaxIterations, "{:?}", out.stop);
        assert!(out.trace.len() <= 100, "{}", out.trace.len());
        assert!(last <= first && first - last < 1e-6, "{first} -> {last}");
    }

    #[test]
    fn zero_steps_leave_the_state_untouched() {
        let (spec, frames, state) = jittered(4);
        let cfg = OptimizerConfig { depth_step: 0.0, twist_step: 0.0, max_iterations: 4, ..OptimizerConfig::default() };
        let out = refine(state.clone(), &frames, &LossWeights::indoor(), &spec.rig, &LossConfig::default(), &cfg).unwrap();
        assert_eq!(out.stop, StopReason::MaxIterations);
        assert_eq!(out.state.log_depths, state.log_depths);
        assert_eq!(out.state.twists, state.twists);
        assert!(out.trace.windows(2).all(|w| w[0].total == w[1].total));
    }

    #[test]
    fn trace_is_monotone_and_depths_stay_in_bounds() {
        for method in [Method::GradientDescent, Method::Lbfgs] {
            let (spec, frames, state) = jittered(5);
            let cfg = OptimizerConfig {
                method,
                max_iterations: 25,
                depth_min: 4.0,
                depth_max: 7.0,
                ..OptimizerConfig::recovery()
            };
            let out = refine(state, &frames, &LossWeights::indoor(), &spec.rig, &LossConfig::default(), &cfg).unwrap();
            assert!(out.trace.windows(2).all(|w| w[1].total <= w[0].total));
            assert!(out.trace.last().unwrap().total < 0.8 * out.trace[0].total);
            for d in out.state.depths() {
                assert!(d.data().iter().all(|&v| (4.0 - 1e-9..=7.0 + 1e-9).contains(&v)));
            }
        }
    }

    #[test]
    fn refine_is_deterministic() {
        let (spec, frames, state) = jittered(6);
        let cfg = OptimizerConfig { max_iterations: 8, ..OptimizerConfig::recovery() };
        let run = || {
            let out = refine(state.clone(), &frames, &LossWeights::indoor(), &spec.rig, &LossConfig::default(), &cfg)
                .unwrap();
            (out.state.log_depths, out.state.twists, out.trace)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_difference_mode_tracks_analytic_mode() {
        let (spec, frames, state) = jittered(7);
        let obj = Objective::new(&frames, &spec.rig, &LossWeights::indoor(), &mask_aware()).unwrap();
        let a = obj.gradients(&state).unwrap();
        let n = obj.fd_gradients(&state, 1e-6).unwrap();
        for (x, y) in a.twists.iter().zip(&n.twists) {
            assert!((x - y).norm() <= 1e-4 * x.norm().max(1e-3), "{x} vs {y}");
        }
    }

    #[test]
    fn perturbation_has_exact_pose_magnitudes() {
        let spec = SceneSpec::textured_corner(16, 3);
        let (_, depths, poses) = setup(&spec);
        let (d, p) = Perturbation::recovery().apply(&depths, &poses, 11);
        for (a, b) in p.iter().zip(&poses) {
            let angle = crate::se3::rotation_angle(&(a.rotation * b.rotation.transpose()));
            assert!((angle.to_degrees() - 2.0).abs() < 1e-9);
            assert!(((a.translation - b.translation).norm() - 0.05).abs() < 1e-12);
        }
        for (a, b) in d.iter().zip(&depths) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x / y - 1.0).abs() <= 0.2 + 1e-12));
        }
        assert_eq!(Perturbation::recovery().apply(&depths, &poses, 11).1, p);
    }
}

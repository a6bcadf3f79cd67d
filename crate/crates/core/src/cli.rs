//! Command-line front end: config resolution, subcommands and exit codes.
//!
//! Run configs are JSON objects. A config may name a base through
//! `"extends"`: either a loss preset (`"indoor"`, `"outdoor"`) or the path
//! of another config, resolved relative to the extending file. Objects are
//! merged key by key, so a config only lists what it changes. The fully
//! resolved config is echoed to `manifest.json` in the output directory.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{depth_metrics, depth_table, pose_metrics_5frame, DepthMetrics, INDOOR_CAP};
use crate::frame::{MultiSpectralPair, Rig};
use crate::image::{DepthMap, ImageGrid};
use crate::io;
use crate::loss::{snippet_loss, LossConfig, LossWeights};
use crate::optim::{write_trace_csv, GradCheckConfig, Objective, OptimState, OptimizerConfig, Perturbation, StopReason};
use crate::se3::RigidPose;
use crate::synth::{relative_motions, render_sequence, ScenePreset, SceneSpec};
use crate::thermal::{ThermalRepresentationConfig, ThermalStrategy};

/// Environment variable overriding the config seed.
pub const SEED_ENV: &str = "THERMOFLUX_SEED";
/// `gradcheck` fails when the worst relative error exceeds this.
pub const GRADCHECK_LIMIT: f64 = 1e-3;

/// Where a run's frames come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SceneSource {
    Preset { name: ScenePreset, size: usize, frames: usize },
    Inline { spec: Box<SceneSpec>, frames: usize },
    Fixture { path: PathBuf },
}

/// An optimizer state stored on disk: one depth PFM per frame and a JSON
/// list of relative motions `T_{k→k+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSource {
    pub depth_dir: PathBuf,
    pub motions: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives thermal noise, perturbations and gradient-check sampling.
    pub seed: u64,
    pub scene: SceneSource,
    pub weights: LossWeights,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub gradcheck: GradCheckConfig,
    /// Corruption of the ground truth that `refine` starts from.
    pub init: Perturbation,
    /// Corruption of the ground truth at which `gradcheck` evaluates.
    pub gradcheck_jitter: Perturbation,
    /// Explicit state for `loss` and `refine`, replacing the perturbed
    /// ground truth.
    pub state: Option<StateSource>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSource::Preset { name: ScenePreset::TexturedCorner, size: 64, frames: 3 },
            weights: LossWeights::indoor(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            gradcheck: GradCheckConfig::default(),
            init: Perturbation::recovery(),
            gradcheck_jitter: Perturbation::jitter(),
            state: None,
            output: PathBuf::from("out"),
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // a tagged variant replaces its base instead of merging into it
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn preset_value(name: &str) -> Result<Value> {
    let mut base = serde_json::to_value(RunConfig::default())?;
    base["weights"] = serde_json::to_value(LossWeights::preset(name)?)?;
    Ok(base)
}

fn resolve_value(path: &Path, depth: usize) -> Result<Value> {
    if depth > 16 {
        return Err(Error::Config("`extends` chain is too deep (cycle?)".into()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut own: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let Value::Object(map) = &mut own else {
        return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
    };
    let mut base = match map.remove("extends") {
        None => serde_json::to_value(RunConfig::default())?,
        Some(Value::String(name)) if name == "indoor" || name == "outdoor" => preset_value(&name)?,
        Some(Value::String(parent)) => {
            let dir = path.parent().unwrap_or(Path::new("."));
            resolve_value(&dir.join(parent), depth + 1)?
        }
        Some(_) => return Err(Error::Config("`extends` must be a string".into())),
    };
    if let Some(Value::String(name)) = map.get("weights") {
        let weights = serde_json::to_value(LossWeights::preset(name)?)?;
        map.insert("weights".into(), weights);
    }
    merge(&mut base, own);
    Ok(base)
}

impl RunConfig {
    /// Loads `path`, applies `extends` layering and the seed override from
    /// the environment, and validates the result.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let value = resolve_value(path, 0)?;
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{seed}`")))?;
        }
        cfg.gradcheck.seed = cfg.seed;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths inside the config relative to `dir`.
    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let SceneSource::Fixture { path } = &mut self.scene {
            fix(path);
        }
        if let Some(st) = &mut self.state {
            fix(&mut st.depth_dir);
            fix(&mut st.motions);
        }
        fix(&mut self.output);
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.init.validate()?;
        self.gradcheck_jitter.validate()?;
        match &self.scene {
            SceneSource::Preset { size, frames, .. } if *size < 8 || *frames < 2 => {
                Err(Error::Config("preset scenes need size ≥ 8 and at least 2 frames".into()))
            }
            SceneSource::Inline { spec, frames } if *frames < 2 || *frames > spec.trajectory.len() => Err(
                Error::Config("inline scenes need 2 ≤ frames ≤ trajectory length".into()),
            ),
            SceneSource::Fixture { path } if !path.join("rig.json").is_file() => Err(Error::Config(format!(
                "fixture {} has no rig.json",
                path.display()
            ))),
            _ => Ok(()),
        }
    }

    /// Frames of the configured scene and the rig that captured them.
    pub fn frames(&self) -> Result<(Rig, Vec<MultiSpectralPair>)> {
        match &self.scene {
            SceneSource::Preset { name, size, frames } => {
                let mut spec = name.build(*size, *frames);
                spec.seed = self.seed;
                Ok((spec.rig.clone(), render_sequence(&spec, *frames)?))
            }
            SceneSource::Inline { spec, frames } => {
                let mut spec = (**spec).clone();
                spec.seed = self.seed;
                Ok((spec.rig.clone(), render_sequence(&spec, *frames)?))
            }
            SceneSource::Fixture { path } => {
                let fx = io::read_fixture(path)?;
                Ok((fx.rig, fx.frames))
            }
        }
    }
}

fn ground_truth(frames: &[MultiSpectralPair]) -> (Vec<DepthMap>, Vec<RigidPose>) {
    (frames.iter().map(|f| f.gt_depth_thermal.clone()).collect(), relative_motions(frames))
}

fn load_state(src: &StateSource, n_frames: usize) -> Result<(Vec<DepthMap>, Vec<RigidPose>)> {
    let depths: Vec<DepthMap> = (0..n_frames)
        .map(|i| io::read_pfm(&src.depth_dir.join(format!("{i:06}.pfm"))))
        .collect::<Result<_>>()?;
    let motions: Vec<RigidPose> = io::read_json(&src.motions)?;
    Ok((depths, motions))
}

/// World-from-camera trajectory starting at `first` and following the
/// relative motions `T_{k→k+1}`.
pub fn chain_motions(first: &RigidPose, motions: &[RigidPose]) -> Vec<RigidPose> {
    let mut out = vec![*first];
    for m in motions {
        let last = *out.last().expect("non-empty");
        out.push(last.compose(&m.inverse()));
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
}

fn write_manifest<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<()> {
    io::write_json(&dir.join("manifest.json"), &Manifest { command, config })
}

#[derive(Debug, Parser)]
#[command(name = "thermoflux", version, about = "Multi-spectral depth/pose losses, gradient checks and refinement")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the configured scene into a fixture directory.
    Render { config: PathBuf },
    /// Evaluate the loss at ground truth (or the configured state).
    Loss { config: PathBuf },
    /// Compare analytic gradients against central differences.
    Gradcheck { config: PathBuf },
    /// Refine depths and poses from a perturbed ground truth.
    Refine { config: PathBuf },
    /// Depth error/accuracy metrics of a directory of predicted PFMs.
    EvalDepth {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Ignore ground truth beyond this depth (m).
        #[arg(long, default_value_t = INDOOR_CAP)]
        cap: f64,
        #[arg(long)]
        no_median_scale: bool,
        /// Directory for metrics JSON and manifest.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// 5-frame ATE/RE between two trajectories of 4×4 poses.
    EvalPose {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Convert a raw thermal PGM with one of the representations.
    ThermalView {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "CLIP_COLORIZE")]
        strategy: String,
    },
}

/// Parses `argv` and runs one command, returning the process exit code:
/// 0 on success, 1 on numerical failure, 2 on usage or configuration errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| run(&cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::Format { .. } => 2,
        Error::Domain(_) | Error::NonFinite { .. } | Error::Diverged { .. } | Error::Csv(_) => 1,
    }
}

fn run(command: &Command) -> Result<i32> {
    match command {
        Command::Render { config } => render(&RunConfig::load(config)?),
        Command::Loss { config } => loss(&RunConfig::load(config)?),
        Command::Gradcheck { config } => gradcheck(RunConfig::load(config)?),
        Command::Refine { config } => refine(&RunConfig::load(config)?),
        Command::EvalDepth { pred_dir, gt_dir, cap, no_median_scale, out } => {
            eval_depth(pred_dir, gt_dir, *cap, !no_median_scale, out)
        }
        Command::EvalPose { pred, gt, out } => eval_pose(pred, gt, out),
        Command::ThermalView { input, output, strategy } => thermal_view(input, output, strategy),
    }
}

fn render(cfg: &RunConfig) -> Result<i32> {
    let (rig, frames) = cfg.frames()?;
    io::write_fixture(&cfg.output, &rig, &frames)?;
    write_manifest(&cfg.output, "render", cfg)?;
    println!("wrote {} frames to {}", frames.len(), cfg.output.display());
    Ok(0)
}

fn initial_state(cfg: &RunConfig, frames: &[MultiSpectralPair], perturb: Option<&Perturbation>) -> Result<(Vec<DepthMap>, Vec<RigidPose>)> {
    if let Some(src) = &cfg.state {
        return load_state(src, frames.len());
    }
    let (depths, poses) = ground_truth(frames);
    Ok(match perturb {
        Some(p) => p.apply(&depths, &poses, cfg.seed),
        None => (depths, poses),
    })
}

fn loss(cfg: &RunConfig) -> Result<i32> {
    let (rig, frames) = cfg.frames()?;
    let (depths, poses) = initial_state(cfg, &frames, None)?;
    let report = snippet_loss(&frames, &depths, &poses, &cfg.weights, &rig, &cfg.loss)?;
    io::write_json(&cfg.output.join("loss.json"), &report.summary())?;
    write_manifest(&cfg.output, "loss", cfg)?;
    println!("{}", report.to_json()?);
    Ok(0)
}

fn gradcheck(mut cfg: RunConfig) -> Result<i32> {
    // the mask enters the reconstruction multiplicatively; treating it as a
    // constant would make the objective differ from the one being differenced
    cfg.loss.differentiate_mask = true;
    let (rig, frames) = cfg.frames()?;
    let (depths, poses) = initial_state(&cfg, &frames, Some(&cfg.gradcheck_jitter))?;
    let state = OptimState::from_depths_and_poses(&depths, &poses, cfg.optimizer.depth_min.max(1.0))?;
    let objective = Objective::new(&frames, &rig, &cfg.weights, &cfg.loss)?;
    let report = objective.check_gradients(&state, &cfg.gradcheck)?;
    io::write_json(&cfg.output.join("gradcheck.json"), &report)?;
    write_manifest(&cfg.output, "gradcheck", &cfg)?;
    println!(
        "checked {} parameters ({} kinks excluded): max rel err {:.3e}, mean {:.3e}",
        report.checked, report.kinks, report.max_rel_error, report.mean_rel_error
    );
    if !(report.max_rel_error <= GRADCHECK_LIMIT) {
        eprintln!("gradient check failed: worst parameter {:?}", report.worst);
        return Ok(1);
    }
    Ok(0)
}

fn refine(cfg: &RunConfig) -> Result<i32> {
    let (rig, frames) = cfg.frames()?;
    let (depths, poses) = initial_state(cfg, &frames, Some(&cfg.init))?;
    let initial = OptimState::from_depths_and_poses(&depths, &poses, cfg.optimizer.depth_min.max(1.0))?;
    let objective = Objective::new(&frames, &rig, &cfg.weights, &cfg.loss)?;
    let outcome = objective.refine(initial, &cfg.optimizer)?;

    let out = &cfg.output;
    for (i, d) in outcome.state.depths().iter().enumerate() {
        io::write_pfm(&io::frame_path(out, "depth", i, "pfm"), d)?;
    }
    let motions = outcome.state.poses();
    io::write_json(&out.join("motions.json"), &motions)?;
    io::write_json(&out.join("poses.json"), &chain_motions(&frames[0].gt_pose, &motions))?;
    write_trace_csv(&out.join("trace.csv"), &outcome.trace)?;
    if let Some(report) = &outcome.state.report {
        io::write_json(&out.join("loss.json"), &report.summary())?;
    }
    write_manifest(out, "refine", cfg)?;

    let last = outcome.trace.last().map_or(f64::NAN, |r| r.total);
    println!("{:?} after {} iterations, loss {:.6e}", outcome.stop, outcome.trace.len() - 1, last);
    if outcome.stop == StopReason::Diverged {
        eprintln!("refinement diverged; wrote the last accepted state");
        return Ok(1);
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalDepthArgs<'a> {
    pred_dir: &'a Path,
    gt_dir: &'a Path,
    cap: f64,
    median_scale: bool,
}

#[derive(Serialize)]
struct DepthReport {
    images: Vec<(String, DepthMetrics)>,
    mean: DepthMetrics,
}

fn eval_depth(pred_dir: &Path, gt_dir: &Path, cap: f64, median_scale: bool, out: &Path) -> Result<i32> {
    if !(cap > 0.0) {
        return Err(Error::Config("--cap must be positive".into()));
    }
    let gt = io::read_pfm_dir(gt_dir)?;
    if gt.is_empty() {
        return Err(Error::Config(format!("no .pfm files in {}", gt_dir.display())));
    }
    let images = gt
        .iter()
        .map(|(name, g)| {
            let p = io::read_pfm(&pred_dir.join(name))?;
            Ok((name.clone(), depth_metrics(&p, g, cap, median_scale)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<DepthMetrics> = images.iter().map(|(_, m)| *m).collect();
    let mean = DepthMetrics::mean(&metrics)?;
    print!("{}", depth_table(&[("pred", mean)]));
    io::write_json(&out.join("depth_metrics.json"), &DepthReport { images, mean })?;
    write_manifest(out, "eval-depth", &EvalDepthArgs { pred_dir, gt_dir, cap, median_scale })?;
    Ok(0)
}

#[derive(Serialize)]
struct EvalPoseArgs<'a> {
    pred: &'a Path,
    gt: &'a Path,
}

fn eval_pose(pred: &Path, gt: &Path, out: &Path) -> Result<i32> {
    let p: Vec<RigidPose> = io::read_json(pred)?;
    let g: Vec<RigidPose> = io::read_json(gt)?;
    let metrics = pose_metrics_5frame(&p, &g)?;
    print!("{}", metrics.table());
    io::write_json(&out.join("pose_metrics.json"), &metrics)?;
    write_manifest(out, "eval-pose", &EvalPoseArgs { pred, gt })?;
    Ok(0)
}

fn thermal_view(input: &Path, output: &Path, strategy: &str) -> Result<i32> {
    let strategy: ThermalStrategy = strategy.parse()?;
    let cfg = ThermalRepresentationConfig::with_strategy(strategy);
    let raw = io::read_pgm16(input)?;
    let img = cfg.loss_image(&raw);
    let rgb = if img.channels() == 3 {
        img
    } else {
        ImageGrid::from_fn(img.width(), img.height(), 3, |x, y, _| img.get(x, y, 0))
    };
    io::write_ppm(output, &rgb)?;
    let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_manifest(dir, "thermal-view", &cfg)?;
    Ok(0)
}

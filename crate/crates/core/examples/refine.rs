//! Recovers depth and ego-motion from a corrupted start by directly
//! minimizing the objective, and reports the remaining errors.
//!
//! ```text
//! cargo run --release --example refine -- 600 trace.csv
//! ```

use thermoflux::eval::{depth_metrics, DepthMetrics, INDOOR_CAP};
use thermoflux::optim::{write_trace_csv, Objective, OptimState, OptimizerConfig, Perturbation};
use thermoflux::se3::rotation_angle;
use thermoflux::synth::{relative_motions, render_sequence, SceneSpec};
use thermoflux::{LossConfig, LossWeights};

fn main() -> thermoflux::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(600, |s| s.parse().expect("iteration count"));
    let trace_path = args.next();

    let spec = SceneSpec::textured_corner(64, 3);
    let frames = render_sequence(&spec, 3)?;
    let depths: Vec<_> = frames.iter().map(|f| f.gt_depth_thermal.clone()).collect();
    let poses = relative_motions(&frames);
    let (d, p) = Perturbation::recovery().apply(&depths, &poses, 0);

    let objective = Objective::new(&frames, &spec.rig, &LossWeights::indoor(), &LossConfig::default())?;
    let cfg = OptimizerConfig { max_iterations: iterations, ..OptimizerConfig::recovery() };
    let start = std::time::Instant::now();
    let out = objective.refine(OptimState::from_depths_and_poses(&d, &p, 5.0)?, &cfg)?;
    println!("{:?} after {} iterations in {:.1?}", out.stop, out.trace.len() - 1, start.elapsed());

    for row in out.trace.iter().step_by((out.trace.len() / 8).max(1)) {
        println!("  {:>5}  {:.4e}", row.iteration, row.total);
    }
    for (k, (e, g)) in out.state.poses().iter().zip(&poses).enumerate() {
        let rot = rotation_angle(&(e.rotation * g.rotation.transpose())).to_degrees();
        println!("  motion {k}: rotation error {rot:.3}°, translation error {:.1} mm", (e.translation - g.translation).norm() * 1e3);
    }
    let metrics: Vec<DepthMetrics> = out
        .state
        .depths()
        .iter()
        .zip(&depths)
        .map(|(e, g)| depth_metrics(e, g, INDOOR_CAP, true))
        .collect::<thermoflux::Result<_>>()?;
    println!("  depth AbsRel {:.4}", DepthMetrics::mean(&metrics)?.abs_rel);

    if let Some(path) = trace_path {
        write_trace_csv(path.as_ref(), &out.trace)?;
    }
    Ok(())
}

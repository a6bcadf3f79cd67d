//! Checks the hand-derived gradients of the full objective against central
//! finite differences on a jittered 16×16 snippet.

use thermoflux::optim::{finite_diff_check, GradCheckConfig, OptimState, Param, Perturbation};
use thermoflux::synth::{relative_motions, render_sequence, SceneSpec};
use thermoflux::{LossConfig, LossWeights};

fn main() -> thermoflux::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let spec = SceneSpec::textured_corner(16, 3);
    let frames = render_sequence(&spec, 3)?;
    let depths: Vec<_> = frames.iter().map(|f| f.gt_depth_thermal.clone()).collect();
    let (d, p) = Perturbation::jitter().apply(&depths, &relative_motions(&frames), seed);
    let state = OptimState::from_depths_and_poses(&d, &p, 5.0)?;

    // finite differences see the mask move, so the analytic side must too
    let cfg = LossConfig { differentiate_mask: true, ..LossConfig::default() };
    let check = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let report = finite_diff_check(&state, &frames, &LossWeights::indoor(), &spec.rig, &cfg, &check)?;

    println!(
        "{} parameters compared, {} excluded as kinks; max rel err {:.2e}, mean {:.2e}",
        report.checked, report.kinks, report.max_rel_error, report.mean_rel_error
    );
    for e in report.entries.iter().filter(|e| matches!(e.param, Param::Twist { .. })) {
        let note = if e.kink { "  (kink, excluded)" } else { "" };
        println!("  {:?}: analytic {:+.6e}  numeric {:+.6e}{note}", e.param, e.analytic, e.numeric);
    }
    Ok(())
}

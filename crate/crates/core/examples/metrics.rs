//! Depth error/accuracy table and 5-frame ATE/RE for synthetic predictions.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thermoflux::eval::{depth_metrics, depth_table, pose_metrics_5frame, INDOOR_CAP};
use thermoflux::se3::rotation_about;
use thermoflux::synth::{render_sequence, SceneSpec};
use thermoflux::RigidPose;

fn main() -> thermoflux::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gt = render_sequence(&SceneSpec::textured_corner(64, 1), 1)?.remove(0).gt_depth_thermal;

    let mut rows = Vec::new();
    for (label, noise, scale) in [("exact", 0.0, 1.0), ("scaled ×2.5", 0.0, 2.5), ("5% noise", 0.05, 1.0), ("25% noise", 0.25, 0.7)] {
        let mut pred = gt.clone();
        for v in pred.data_mut() {
            *v *= scale * (1.0 + rng.gen_range(-1.0..=1.0) * noise);
        }
        rows.push((label, depth_metrics(&pred, &gt, INDOOR_CAP, true)?));
    }
    let named: Vec<(&str, _)> = rows.iter().map(|(l, m)| (*l, *m)).collect();
    print!("{}", depth_table(&named));
    println!("\nwithout median scaling, ×2.5:");
    print!("{}", depth_table(&[("scaled ×2.5", depth_metrics(&gt.map(|v| 2.5 * v), &gt, INDOOR_CAP, false)?)]));

    let mut gt_traj = vec![RigidPose::identity()];
    let mut pred_traj = vec![RigidPose::identity()];
    for i in 0..20 {
        let step = RigidPose::new(
            rotation_about(&Vector3::new(0.0, 1.0, 0.1), 0.03 + 0.002 * i as f64),
            Vector3::new(0.05, 0.0, 0.4),
        );
        let drift = RigidPose::new(
            rotation_about(&Vector3::new(1.0, 0.0, 0.0), 0.002),
            Vector3::new(rng.gen_range(-0.01..0.01), 0.0, 0.0),
        );
        gt_traj.push(gt_traj.last().unwrap().compose(&step));
        // monocular scale: the prediction moves at a third of the true speed
        let scaled = RigidPose::new(step.rotation, step.translation / 3.0);
        pred_traj.push(pred_traj.last().unwrap().compose(&scaled).compose(&drift));
    }
    println!();
    print!("{}", pose_metrics_5frame(&pred_traj, &gt_traj)?.table());
    Ok(())
}

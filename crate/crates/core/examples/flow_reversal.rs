//! Forward warping across the rig: the thermal depth is pushed into the RGB
//! camera by reversing the rig flow, then compared to the RGB ground truth.

use thermoflux::synth::{analytic_flow, render_sequence, CameraKind, SceneSpec};
use thermoflux::warp::{flow_reversal, forward_warp_depth, rigid_flow};
use thermoflux::FlowReversalConfig;

fn main() -> thermoflux::Result<()> {
    let spec = SceneSpec::textured_corner(64, 2);
    let frames = render_sequence(&spec, 2)?;
    let rig = &spec.rig;
    let cfg = FlowReversalConfig::default();

    // temporal flow from depth and pose agrees with the renderer's own
    let motion = thermoflux::relative_motion(&frames[0].gt_pose, &frames[1].gt_pose);
    let flow = rigid_flow(&frames[0].gt_depth_thermal, &motion, &rig.thermal, &rig.thermal)?;
    let oracle = analytic_flow(&spec, 0, 1, CameraKind::Thermal)?;
    let mut worst = 0.0f64;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            if let (Some(a), Some(b)) = (flow.at(x, y), oracle.at(x, y)) {
                worst = worst.max((a[0] - b[0]).abs().max((a[1] - b[1]).abs()));
            }
        }
    }
    println!("rigid flow vs ray-cast flow: max difference {worst:.2e} px");

    let back = flow_reversal(&flow, &cfg);
    println!(
        "reversed temporal flow: {} of {} pixels covered",
        back.valid_count(),
        flow.width() * flow.height()
    );

    let (depth_rgb, holes) = forward_warp_depth(&frames[0].gt_depth_thermal, &rig.extrinsic, &rig.thermal, &rig.rgb, &cfg)?;
    let gt = &frames[0].gt_depth_rgb;
    let (mut err, mut n, mut hole_count) = (0.0f64, 0usize, 0usize);
    for i in 0..gt.data().len() {
        if holes.data()[i] > 0.5 {
            hole_count += 1;
        } else if gt.data()[i] > 0.0 {
            err = err.max((depth_rgb.data()[i] - gt.data()[i]).abs() / gt.data()[i]);
            n += 1;
        }
    }
    println!("thermal depth warped to RGB: {hole_count} holes, max relative error {err:.2e} over {n} pixels");
    Ok(())
}

//! Renders a synthetic RGB-T sequence and stores it as a fixture directory.
//!
//! ```text
//! cargo run --example render_fixture -- /tmp/corner 5
//! ```

use std::path::PathBuf;

use thermoflux::io::write_fixture;
use thermoflux::synth::{render_sequence, MovingObject, SceneObject, SceneSpec, Shape, Field};
use thermoflux::RigidPose;
use nalgebra::Vector3;

fn main() -> thermoflux::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "fixture".into()));
    let n: usize = args.next().map_or(5, |s| s.parse().expect("frame count"));

    let mut spec = SceneSpec::textured_corner(64, n);
    // a warm box drifting through the room breaks the static-scene
    // assumption on purpose, which is what the consistency mask is for
    spec.moving_object = Some(MovingObject {
        object: SceneObject {
            shape: Shape::Box {
                pose: RigidPose::from_translation(Vector3::new(-0.8, 0.4, 4.5)),
                half_extents: [0.3, 0.3, 0.3],
            },
            albedo: [Field::Constant { value: 0.9 }, Field::Constant { value: 0.2 }, Field::Constant { value: 0.1 }],
            temperature: Field::Constant { value: 37.0 },
        },
        velocity: [0.8, 0.0, 0.0],
    });
    spec.thermal_noise_counts = 4.0;

    let frames = render_sequence(&spec, n)?;
    write_fixture(&out, &spec.rig, &frames)?;
    for (i, f) in frames.iter().enumerate() {
        let (lo, hi) = f.gt_depth_thermal.min_max();
        let counts = f.thermal_raw.data();
        let (cmin, cmax) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        println!("frame {i}: depth {lo:.2}–{hi:.2} m, raw counts {cmin}–{cmax}");
    }
    println!("wrote {n} frames to {}", out.display());
    Ok(())
}

//! Evaluates the multi-spectral objective on a three-frame snippet at the
//! ground truth and at progressively corrupted states.

use thermoflux::optim::Perturbation;
use thermoflux::synth::{relative_motions, render_sequence, SceneSpec};
use thermoflux::{snippet_loss, LossConfig, LossWeights};

fn main() -> thermoflux::Result<()> {
    for (name, spec) in [
        ("affine plane", SceneSpec::affine_plane(64, 3)),
        ("textured corner", SceneSpec::textured_corner(64, 3)),
    ] {
        let frames = render_sequence(&spec, 3)?;
        let depths: Vec<_> = frames.iter().map(|f| f.gt_depth_thermal.clone()).collect();
        let poses = relative_motions(&frames);
        println!("{name}");
        for (label, weights) in [("indoor", LossWeights::indoor()), ("outdoor", LossWeights::outdoor())] {
            let r = snippet_loss(&frames, &depths, &poses, &weights, &spec.rig, &LossConfig::default())?;
            println!("  {label:<8} at ground truth  total {:.3e}", r.total);
        }
        for scale in [0.25, 0.5, 1.0] {
            let p = Perturbation {
                depth_noise: 0.2 * scale,
                rotation_deg: 2.0 * scale,
                translation_m: 0.05 * scale,
            };
            let (d, q) = p.apply(&depths, &poses, 1);
            let r = snippet_loss(&frames, &d, &q, &LossWeights::indoor(), &spec.rig, &LossConfig::default())?;
            let t = r.terms;
            println!(
                "  perturbed ×{scale:<4}  total {:.3e}  rec_T {:.3e}  gc_T {:.3e}  rec_RGB {:.3e}  gc_RGB {:.3e}",
                r.total, t.rec_t, t.gc_t, t.rec_rgb, t.gc_rgb
            );
        }
        let r = snippet_loss(&frames, &depths, &poses, &LossWeights::indoor(), &spec.rig, &LossConfig::default())?;
        for p in &r.pairs {
            let count = |m: &thermoflux::Mask| m.data().iter().filter(|&&v| v > 0.5).count();
            println!(
                "  pair {}→{}: |V_T| = {}, |V_RGB| = {}",
                p.target,
                p.source,
                count(&p.thermal.valid),
                count(&p.rgb.valid)
            );
        }
    }
    Ok(())
}

//! Applies the five thermal representations to a rendered raw frame and
//! writes each as a PPM for side-by-side inspection.

use std::path::Path;

use thermoflux::image::ImageGrid;
use thermoflux::io::write_ppm;
use thermoflux::synth::{render_sequence, SceneSpec};
use thermoflux::thermal::normalize;
use thermoflux::{ThermalRepresentationConfig, ThermalStrategy};

fn main() -> thermoflux::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "thermal_views".into());
    let spec = SceneSpec::textured_corner(64, 1);
    let raw = &render_sequence(&spec, 1)?[0].thermal_raw;
    let celsius = raw.to_celsius();
    let (lo, hi) = celsius.min_max();
    println!("scene temperatures {lo:.1}–{hi:.1} °C");

    for strategy in ThermalStrategy::ALL {
        let img = normalize(raw, &ThermalRepresentationConfig::with_strategy(strategy));
        let (a, b) = img.min_max();
        println!("{:<14} channels {}  range [{a:.3}, {b:.3}]", strategy.name(), img.channels());
        let rgb = if img.channels() == 3 {
            img
        } else {
            ImageGrid::from_fn(img.width(), img.height(), 3, |x, y, _| img.get(x, y, 0))
        };
        write_ppm(&Path::new(&out).join(format!("{}.ppm", strategy.name().to_lowercase())), &rgb)?;
    }
    Ok(())
}

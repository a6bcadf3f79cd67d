//! Raw 14-bit radiometric images and their normalized / colorized
//! representations.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::image::ImageGrid;

/// Largest representable raw count (`2¹⁴ − 1`).
pub const RAW_MAX: u16 = 16383;
/// Temperature range of the low-gain mode, °C.
pub const LOW_GAIN_RANGE: (f64, f64) = (-30.0, 150.0);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawThermalImage {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl RawThermalImage {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(domain("raw thermal image size mismatch"));
        }
        if let Some(bad) = data.iter().find(|&&r| r > RAW_MAX) {
            return Err(domain(format!("raw count {bad} exceeds 14 bits")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn to_celsius(&self) -> ImageGrid {
        ImageGrid::from_fn(self.width, self.height, 1, |x, y, _| count_to_celsius(self.get(x, y)))
    }
}

#[inline]
fn count_to_celsius(r: u16) -> f64 {
    let (lo, hi) = LOW_GAIN_RANGE;
    lo + (hi - lo) * r as f64 / RAW_MAX as f64
}

/// Linear low-gain conversion of a raw count to °C.
pub fn raw_to_celsius(r: u32) -> Result<f64> {
    if r > RAW_MAX as u32 {
        return Err(domain(format!("raw count {r} outside [0, {RAW_MAX}]")));
    }
    Ok(count_to_celsius(r as u16))
}

/// Nearest raw count for a temperature, saturating at the sensor range.
pub fn celsius_to_raw(t: f64) -> u16 {
    let (lo, hi) = LOW_GAIN_RANGE;
    let r = ((t - lo) / (hi - lo) * RAW_MAX as f64).round();
    r.clamp(0.0, RAW_MAX as f64) as u16
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ThermalStrategy {
    /// Divide by the full 14-bit range.
    Whole,
    /// Per-image min–max stretch.
    Minmax,
    WideClip,
    NarrowClip,
    /// Narrow clip followed by a piecewise-linear colormap.
    ClipColorize,
}

impl ThermalStrategy {
    pub const ALL: [ThermalStrategy; 5] = [
        ThermalStrategy::Whole,
        ThermalStrategy::Minmax,
        ThermalStrategy::WideClip,
        ThermalStrategy::NarrowClip,
        ThermalStrategy::ClipColorize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThermalStrategy::Whole => "WHOLE",
            ThermalStrategy::Minmax => "MINMAX",
            ThermalStrategy::WideClip => "WIDE_CLIP",
            ThermalStrategy::NarrowClip => "NARROW_CLIP",
            ThermalStrategy::ClipColorize => "CLIP_COLORIZE",
        }
    }
}

impl std::str::FromStr for ThermalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ThermalStrategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown thermal strategy `{s}`")))
    }
}

/// Control point of a piecewise-linear colormap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorStop {
    pub position: f64,
    pub rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Colormap {
    stops: Vec<ColorStop>,
}

impl Colormap {
    pub fn new(stops: Vec<ColorStop>) -> Result<Self> {
        let cm = Self { stops };
        cm.validate()?;
        Ok(cm)
    }

    /// Black → purple → orange → yellow → white.
    pub fn iron() -> Self {
        let stop = |position, rgb| ColorStop { position, rgb };
        Self {
            stops: vec![
                stop(0.0, [0.0, 0.0, 0.0]),
                stop(0.25, [0.5, 0.0, 0.5]),
                stop(0.5, [1.0, 0.25, 0.0]),
                stop(0.75, [1.0, 0.75, 0.0]),
                stop(1.0, [1.0, 1.0, 1.0]),
            ],
        }
    }

    pub fn stops(&self) -> &[ColorStop] {
        &self.stops
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stops;
        if s.len() < 2 {
            return Err(Error::Config("colormap needs at least two stops".into()));
        }
        if s[0].position != 0.0 || s[s.len() - 1].position != 1.0 {
            return Err(Error::Config("colormap must start at 0 and end at 1".into()));
        }
        if s.windows(2).any(|w| !(w[1].position > w[0].position)) {
            return Err(Error::Config("colormap positions must strictly increase".into()));
        }
        if s.iter().flat_map(|c| c.rgb).any(|v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("colormap colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Index of the segment used for `v`. Knots belong to the segment on
    /// their right, the final knot to the last segment.
    fn segment(&self, v: f64) -> usize {
        let n = self.stops.len();
        self.stops[1..n - 1]
            .iter()
            .take_while(|s| v >= s.position)
            .count()
    }

    /// Color at `v ∈ [0, 1]` (clamped).
    pub fn eval(&self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        let i = self.segment(v);
        let (a, b) = (&self.stops[i], &self.stops[i + 1]);
        let t = (v - a.position) / (b.position - a.position);
        [0, 1, 2].map(|c| a.rgb[c] + t * (b.rgb[c] - a.rgb[c]))
    }

    /// Per-channel slope `d color / d v` (right-segment slope at knots).
    pub fn slope(&self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        let i = self.segment(v);
        let (a, b) = (&self.stops[i], &self.stops[i + 1]);
        let dp = b.position - a.position;
        [0, 1, 2].map(|c| (b.rgb[c] - a.rgb[c]) / dp)
    }
}

impl Default for Colormap {
    fn default() -> Self {
        Self::iron()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalRepresentationConfig {
    pub strategy: ThermalStrategy,
    /// Clip window in °C for `NARROW_CLIP` and `CLIP_COLORIZE`.
    pub narrow_clip: (f64, f64),
    /// Clip window in °C for `WIDE_CLIP`.
    pub wide_clip: (f64, f64),
    pub colormap: Colormap,
}

impl Default for ThermalRepresentationConfig {
    fn default() -> Self {
        Self {
            strategy: ThermalStrategy::ClipColorize,
            narrow_clip: (10.0, 40.0),
            wide_clip: (0.0, 50.0),
            colormap: Colormap::iron(),
        }
    }
}

impl ThermalRepresentationConfig {
    pub fn with_strategy(strategy: ThermalStrategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("narrow_clip", self.narrow_clip), ("wide_clip", self.wide_clip)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name}: clip_lo must be below clip_hi")));
            }
        }
        self.colormap.validate()
    }

    /// The image the reconstruction loss compares: colorized for
    /// `CLIP_COLORIZE`, the normalized single-channel image otherwise.
    pub fn loss_image(&self, raw: &RawThermalImage) -> ImageGrid {
        match self.strategy {
            ThermalStrategy::ClipColorize => colorize(&self.network_input(raw), &self.colormap),
            _ => normalize(raw, self),
        }
    }

    /// Single-channel image a depth network would consume.
    pub fn network_input(&self, raw: &RawThermalImage) -> ImageGrid {
        match self.strategy {
            ThermalStrategy::ClipColorize => clip_normalize(raw, self.narrow_clip),
            _ => normalize(raw, self),
        }
    }
}

fn clip_normalize(raw: &RawThermalImage, (lo, hi): (f64, f64)) -> ImageGrid {
    ImageGrid::from_fn(raw.width, raw.height, 1, |x, y, _| {
        let t = count_to_celsius(raw.get(x, y)).clamp(lo, hi);
        (t - lo) / (hi - lo)
    })
}

/// Applies the configured strategy. `CLIP_COLORIZE` returns the 3-channel
/// colorized image; every other strategy a single channel in `[0, 1]`.
pub fn normalize(raw: &RawThermalImage, cfg: &ThermalRepresentationConfig) -> ImageGrid {
    let (w, h) = (raw.width, raw.height);
    match cfg.strategy {
        ThermalStrategy::Whole => {
            ImageGrid::from_fn(w, h, 1, |x, y, _| raw.get(x, y) as f64 / RAW_MAX as f64)
        }
        ThermalStrategy::Minmax => {
            let lo = *raw.data.iter().min().unwrap() as f64;
            let hi = *raw.data.iter().max().unwrap() as f64;
            if hi == lo {
                return ImageGrid::new(w, h, 1);
            }
            ImageGrid::from_fn(w, h, 1, |x, y, _| (raw.get(x, y) as f64 - lo) / (hi - lo))
        }
        ThermalStrategy::WideClip => clip_normalize(raw, cfg.wide_clip),
        ThermalStrategy::NarrowClip => clip_normalize(raw, cfg.narrow_clip),
        ThermalStrategy::ClipColorize => {
            colorize(&clip_normalize(raw, cfg.narrow_clip), &cfg.colormap)
        }
    }
}

/// Maps a single-channel `[0, 1]` image through `colormap`.
pub fn colorize(v: &ImageGrid, colormap: &Colormap) -> ImageGrid {
    assert_eq!(v.channels(), 1, "colorize expects a single-channel image");
    let mut out = ImageGrid::new(v.width(), v.height(), 3);
    for (src, dst) in v.data().iter().zip(out.data_mut().chunks_exact_mut(3)) {
        dst.copy_from_slice(&colormap.eval(*src));
    }
    out
}

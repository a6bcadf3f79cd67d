//! Scalar objectives: SSIM/L1 reconstruction, masked valid-set reduction,
//! depth inconsistency and geometric consistency, edge-aware smoothness and
//! the combined multi-spectral objective over a three-frame snippet.

mod snippet;
mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::image::{DepthMap, ImageGrid, Mask};

pub use snippet::{snippet_loss, LossConfig, PairDiagnostics, SnippetInputs};
pub(crate) use snippet::SnippetTrace;
pub use ssim::{ssim_map, C1, C2};
pub(crate) use ssim::{ssim_backward, ssim_map_unchecked};

/// Weights of the total objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction weight α.
    pub alpha: f64,
    /// Geometric-consistency weight β.
    pub beta: f64,
    /// SSIM share γ of the thermal reconstruction.
    pub gamma_t: f64,
    /// SSIM share γ of the RGB reconstruction.
    pub gamma_rgb: f64,
    pub lambda_t: f64,
    pub lambda_rgb: f64,
    /// Adds the edge-aware smoothness term (ablation only).
    #[serde(default)]
    pub use_smoothness: bool,
    #[serde(default)]
    pub smoothness_weight: f64,
}

impl LossWeights {
    pub fn indoor() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma_t: 0.15,
            gamma_rgb: 0.85,
            lambda_t: 0.25,
            lambda_rgb: 1.0,
            use_smoothness: false,
            smoothness_weight: 0.0,
        }
    }

    pub fn outdoor() -> Self {
        Self {
            gamma_t: 0.85,
            gamma_rgb: 0.30,
            lambda_t: 1.0,
            lambda_rgb: 0.1,
            ..Self::indoor()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "indoor" => Ok(Self::indoor()),
            "outdoor" => Ok(Self::outdoor()),
            other => Err(Error::Config(format!("unknown loss preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.gamma_t,
            self.gamma_rgb,
            self.lambda_t,
            self.lambda_rgb,
            self.smoothness_weight,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.gamma_t > 1.0 || self.gamma_rgb > 1.0 {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Combines per-term values into the total objective.
    pub fn combine(&self, terms: &LossTerms) -> f64 {
        let mut total = self.lambda_t * (self.alpha * terms.rec_t + self.beta * terms.gc_t)
            + self.lambda_rgb * (self.alpha * terms.rec_rgb + self.beta * terms.gc_rgb);
        if self.use_smoothness {
            total += self.smoothness_weight * terms.smooth;
        }
        total
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::indoor()
    }
}

/// Per-term scalars. Serialized with the fixed term names.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    #[serde(rename = "rec_T")]
    pub rec_t: f64,
    #[serde(rename = "gc_T")]
    pub gc_t: f64,
    #[serde(rename = "rec_RGB")]
    pub rec_rgb: f64,
    #[serde(rename = "gc_RGB")]
    pub gc_rgb: f64,
    pub smooth: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 5] = ["rec_T", "gc_T", "rec_RGB", "gc_RGB", "smooth"];

    pub fn values(&self) -> [f64; 5] {
        [self.rec_t, self.gc_t, self.rec_rgb, self.gc_rgb, self.smooth]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: LossTerms,
    /// Labels of directed-pair terms whose valid set was empty.
    pub empty_valid: Vec<String>,
    /// Per directed pair, in the order (0→1, 1→0, 1→2, 2→1).
    pub pairs: Vec<PairDiagnostics>,
}

/// JSON form of a [`LossReport`] (scalars only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
    pub empty_valid: Vec<String>,
}

impl LossReport {
    pub fn summary(&self) -> LossSummary {
        LossSummary {
            terms: self.terms,
            total: self.total,
            empty_valid: self.empty_valid.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// Mean over a valid set, flagged when the set is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedMean {
    pub value: f64,
    pub count: usize,
}

impl MaskedMean {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn check_single(img: &ImageGrid, name: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(domain(format!("{name} must be single-channel")));
    }
    Ok(())
}

/// `γ·(1 − SSIM)/2 + (1 − γ)·mean_c |I − Ĩ|` per pixel.
pub fn reconstruction_map(target: &ImageGrid, synthesized: &ImageGrid, gamma: f64) -> Result<ImageGrid> {
    if !target.same_shape(synthesized) {
        return Err(domain("reconstruction_map: images differ in shape"));
    }
    let ssim = ssim_map_unchecked(target, synthesized);
    Ok(reconstruction_from_ssim(target, synthesized, &ssim, gamma))
}

pub(crate) fn reconstruction_from_ssim(
    target: &ImageGrid,
    synthesized: &ImageGrid,
    ssim: &ImageGrid,
    gamma: f64,
) -> ImageGrid {
    let ch = target.channels();
    let l1 = target
        .data()
        .chunks_exact(ch)
        .zip(synthesized.data().chunks_exact(ch))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch as f64);
    let data = ssim
        .data()
        .iter()
        .zip(l1)
        .map(|(s, l)| gamma * (1.0 - s) / 2.0 + (1.0 - gamma) * l)
        .collect();
    ImageGrid::from_vec(target.width(), target.height(), 1, data).expect("same shape")
}

/// `(1/|V|) Σ_{p∈V} M(p)·L(p)`; zero with an empty flag when `V = ∅`.
pub fn masked_reduce(map: &ImageGrid, weight: &Mask, valid: &Mask) -> Result<MaskedMean> {
    check_single(map, "loss map")?;
    if !map.same_shape(weight) || !map.same_shape(valid) {
        return Err(domain("masked_reduce: shapes differ"));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((l, m), v) in map.data().iter().zip(weight.data()).zip(valid.data()) {
        if *v > 0.5 {
            sum += m * l;
            count += 1;
        }
    }
    Ok(MaskedMean {
        value: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    })
}

/// `|D̃ − D′| / (D̃ + D′)` on the valid set, zero elsewhere.
pub fn depth_inconsistency(sampled: &DepthMap, compensated: &DepthMap, valid: &Mask) -> Result<ImageGrid> {
    if !sampled.same_shape(compensated) || !sampled.same_shape(valid) {
        return Err(domain("depth_inconsistency: shapes differ"));
    }
    let mut out = ImageGrid::new(sampled.width(), sampled.height(), 1);
    for (i, ((a, b), v)) in sampled
        .data()
        .iter()
        .zip(compensated.data())
        .zip(valid.data())
        .enumerate()
    {
        if *v <= 0.5 {
            continue;
        }
        if !(*a > 0.0 && *b > 0.0) {
            return Err(domain(format!("non-positive depth on the valid set at index {i}")));
        }
        out.data_mut()[i] = depth_diff(*a, *b);
    }
    Ok(out)
}

#[inline]
pub(crate) fn depth_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

/// Residuals this small are treated as exact zeros when choosing the
/// subgradient of `|·|`, so round-off at an exact fit yields a zero gradient.
pub(crate) const KINK_DEAD_ZONE: f64 = 1e-12;

/// Subgradient of `|d|` for a residual of magnitude relative to `scale`.
#[inline]
pub(crate) fn abs_slope(d: f64, scale: f64) -> f64 {
    if d.abs() <= KINK_DEAD_ZONE * scale {
        0.0
    } else {
        d.signum()
    }
}

/// `∂D_diff/∂(a, b)`, taking the zero subgradient when `a ≈ b`.
#[inline]
pub(crate) fn depth_diff_grad(a: f64, b: f64) -> (f64, f64) {
    let s = abs_slope(a - b, a + b);
    let sum = a + b;
    let abs = (a - b).abs();
    ((s * sum - abs) / (sum * sum), (-s * sum - abs) / (sum * sum))
}

/// Mean depth inconsistency over `V` together with the weighting mask
/// `M = 1 − D_diff`.
pub fn geometric_consistency(diff: &ImageGrid, valid: &Mask) -> Result<(MaskedMean, Mask)> {
    check_single(diff, "D_diff")?;
    let ones = ImageGrid::filled(diff.width(), diff.height(), 1, 1.0);
    let mean = masked_reduce(diff, &ones, valid)?;
    Ok((mean, diff.map(|d| 1.0 - d)))
}

/// Edge-aware first-order smoothness of the mean-normalized depth.
pub fn smoothness_loss(depth: &DepthMap, image: &ImageGrid) -> Result<f64> {
    check_single(depth, "depth")?;
    if !depth.same_size(image) {
        return Err(domain("smoothness_loss: depth and image differ in size"));
    }
    Ok(smoothness_with_grad(depth, image, false).0)
}

/// Returns the smoothness value and, when asked, `∂/∂D`.
pub(crate) fn smoothness_with_grad(depth: &DepthMap, image: &ImageGrid, grad: bool) -> (f64, Vec<f64>) {
    let (w, h, ch) = (depth.width(), depth.height(), image.channels());
    let d = depth.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let edge = |i: usize, j: usize| {
        let (a, b) = (image.data(), i * ch..(i + 1) * ch);
        let diff: f64 = b.zip(j * ch..).map(|(p, q)| (a[p] - a[q]).abs()).sum::<f64>() / ch as f64;
        (-diff).exp()
    };
    let nx = ((w - 1) * h).max(1) as f64;
    let ny = (w * (h - 1)).max(1) as f64;
    let mut value = 0.0;
    // ∂value/∂d̂
    let mut g_hat = if grad { vec![0.0; d.len()] } else { Vec::new() };
    let mut visit = |i: usize, j: usize, norm: f64| {
        let diff = (d[j] - d[i]) / mean;
        let e = edge(i, j) / norm;
        value += diff.abs() * e;
        if grad {
            let s = abs_slope(diff, 1.0);
            g_hat[j] += s * e;
            g_hat[i] -= s * e;
        }
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                visit(i, i + 1, nx);
            }
            if y + 1 < h {
                visit(i, i + w, ny);
            }
        }
    }
    if !grad {
        return (value, Vec::new());
    }
    // d̂ = D/m, m = mean(D): ∂d̂ᵢ/∂Dⱼ = δᵢⱼ/m − Dᵢ/(m²n)
    let cross: f64 = g_hat.iter().zip(d).map(|(g, di)| g * di).sum::<f64>() / (mean * mean * n);
    let out = g_hat.iter().map(|g| g / mean - cross).collect();
    (value, out)
}

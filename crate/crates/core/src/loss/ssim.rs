//! Windowed SSIM with its adjoint with respect to the second image.
//!
//! Local statistics use a 3×3 uniform window with reflection at the image
//! border, `C1 = 0.01²` and `C2 = 0.03²` for unit dynamic range. For
//! multi-channel images the per-channel SSIM maps are averaged.

use crate::error::{domain, Result};
use crate::image::{reflect, ImageGrid};

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

#[inline]
fn window(x: usize, y: usize, w: usize, h: usize) -> [usize; 9] {
    let mut idx = [0; 9];
    let mut k = 0;
    for dy in -1isize..=1 {
        let yy = reflect(y as isize + dy, h);
        for dx in -1isize..=1 {
            idx[k] = yy * w + reflect(x as isize + dx, w);
            k += 1;
        }
    }
    idx
}

struct Stats {
    mu_a: f64,
    mu_b: f64,
    n1: f64,
    n2: f64,
    d1: f64,
    d2: f64,
}

#[inline]
fn stats(a: &[f64], b: &[f64], ch: usize, c: usize, idx: &[usize; 9]) -> Stats {
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &i in idx {
        let (va, vb) = (a[i * ch + c], b[i * ch + c]);
        sa += va;
        sb += vb;
        saa += va * va;
        sbb += vb * vb;
        sab += va * vb;
    }
    let n = 1.0 / 9.0;
    let (mu_a, mu_b) = (sa * n, sb * n);
    let var_a = saa * n - mu_a * mu_a;
    let var_b = sbb * n - mu_b * mu_b;
    let cov = sab * n - mu_a * mu_b;
    Stats {
        mu_a,
        mu_b,
        n1: 2.0 * mu_a * mu_b + C1,
        n2: 2.0 * cov + C2,
        d1: mu_a * mu_a + mu_b * mu_b + C1,
        d2: var_a + var_b + C2,
    }
}

/// Per-pixel SSIM of two same-shape images.
pub fn ssim_map(a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
    if !a.same_shape(b) {
        return Err(domain("ssim_map: images differ in shape"));
    }
    Ok(ssim_map_unchecked(a, b))
}

pub(crate) fn ssim_map_unchecked(a: &ImageGrid, b: &ImageGrid) -> ImageGrid {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let (da, db) = (a.data(), b.data());
    ImageGrid::from_fn(w, h, 1, |x, y, _| {
        let idx = window(x, y, w, h);
        (0..ch)
            .map(|c| {
                let s = stats(da, db, ch, c, &idx);
                (s.n1 * s.n2) / (s.d1 * s.d2)
            })
            .sum::<f64>()
            / ch as f64
    })
}

/// Accumulates `Σ_p grad(p) · ∂SSIM(p)/∂b` into `out` (same layout as `b`),
/// skipping pixels where `grad(p) = 0`.
pub(crate) fn ssim_backward(a: &ImageGrid, b: &ImageGrid, grad: &[f64], out: &mut [f64]) {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let (da, db) = (a.data(), b.data());
    let inv9 = 1.0 / 9.0;
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            if g == 0.0 {
                continue;
            }
            let g = g / ch as f64;
            let idx = window(x, y, w, h);
            for c in 0..ch {
                let s = stats(da, db, ch, c, &idx);
                let den = s.d1 * s.d2;
                let ssim = s.n1 * s.n2 / den;
                for &i in &idx {
                    let (va, vb) = (da[i * ch + c], db[i * ch + c]);
                    let dn1 = 2.0 * s.mu_a * inv9;
                    let dn2 = 2.0 * (va - s.mu_a) * inv9;
                    let dd1 = 2.0 * s.mu_b * inv9;
                    let dd2 = 2.0 * (vb - s.mu_b) * inv9;
                    let dnum = dn1 * s.n2 + s.n1 * dn2;
                    let dden = dd1 * s.d2 + s.d1 * dd2;
                    out[i * ch + c] += g * (dnum - ssim * dden) / den;
                }
            }
        }
    }
}

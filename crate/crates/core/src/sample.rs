//! Differentiable bilinear sampling.

use crate::image::ImageGrid;

const SNAP: f64 = 1e-9;

/// Rounds `v` to the nearest integer when it lies within `1e-9` of it.
#[inline]
pub(crate) fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// The four-neighbour stencil of a continuous sampling position.
///
/// Positions must lie in `[0, W−1] × [0, H−1]`. On the last row/column the
/// stencil shifts one cell back with a unit fraction, so the four taps are
/// always in bounds. Positions within `1e-9` px of an integer snap onto it,
/// so round-off from projecting and back-projecting neither drops edge
/// pixels nor perturbs integer-coordinate samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    pub x0: usize,
    pub y0: usize,
    pub tx: f64,
    pub ty: f64,
    width: usize,
}

impl BilinearTap {
    pub fn locate(width: usize, height: usize, x: f64, y: f64) -> Option<Self> {
        if width < 2 || height < 2 {
            return None;
        }
        let (x, y) = (snap(x), snap(y));
        let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= xmax && y <= ymax) {
            return None;
        }
        let x0 = (x.floor() as usize).min(width - 2);
        let y0 = (y.floor() as usize).min(height - 2);
        Some(Self {
            x0,
            y0,
            tx: x - x0 as f64,
            ty: y - y0 as f64,
            width,
        })
    }

    /// Flat pixel indices: `(x0,y0), (x0+1,y0), (x0,y0+1), (x0+1,y0+1)`.
    #[inline]
    pub fn indices(&self) -> [usize; 4] {
        let i = self.y0 * self.width + self.x0;
        [i, i + 1, i + self.width, i + self.width + 1]
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (tx, ty) = (self.tx, self.ty);
        [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ]
    }

    #[inline]
    pub fn sample(&self, img: &ImageGrid, c: usize) -> f64 {
        let ch = img.channels();
        let d = img.data();
        let [a, b, e, f] = self.indices();
        let [wa, wb, we, wf] = self.weights();
        wa * d[a * ch + c] + wb * d[b * ch + c] + we * d[e * ch + c] + wf * d[f * ch + c]
    }

    /// `∂value/∂(x, y)`. At integer coordinates this is the slope of the
    /// cell to the right/below (left/above on the last column/row).
    #[inline]
    pub fn coord_gradient(&self, img: &ImageGrid, c: usize) -> [f64; 2] {
        let ch = img.channels();
        let d = img.data();
        let [a, b, e, f] = self.indices();
        let (ia, ib, ie, iff) = (d[a * ch + c], d[b * ch + c], d[e * ch + c], d[f * ch + c]);
        [
            (1.0 - self.ty) * (ib - ia) + self.ty * (iff - ie),
            (1.0 - self.tx) * (ie - ia) + self.tx * (iff - ib),
        ]
    }

    /// Accumulates `g · ∂value/∂source` into a single-channel adjoint buffer.
    #[inline]
    pub fn scatter(&self, adjoint: &mut [f64], g: f64) {
        for (i, w) in self.indices().into_iter().zip(self.weights()) {
            adjoint[i] += w * g;
        }
    }

    /// True when every tap with nonzero weight is set in `mask`.
    #[inline]
    pub fn all_set(&self, mask: &[bool]) -> bool {
        self.indices()
            .into_iter()
            .zip(self.weights())
            .all(|(i, w)| w == 0.0 || mask[i])
    }
}

/// Samples every channel of `img` at `(x, y)`. Out-of-bounds positions give
/// zeros and `false`.
pub fn bilinear_sample(img: &ImageGrid, x: f64, y: f64) -> (Vec<f64>, bool) {
    match BilinearTap::locate(img.width(), img.height(), x, y) {
        Some(tap) => ((0..img.channels()).map(|c| tap.sample(img, c)).collect(), true),
        None => (vec![0.0; img.channels()], false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad() -> ImageGrid {
        ImageGrid::from_vec(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let img = ImageGrid::from_fn(5, 4, 2, |x, y, c| (x * 7 + y * 3 + c) as f64 * 0.01);
        for y in 0..4 {
            for x in 0..5 {
                let (v, ok) = bilinear_sample(&img, x as f64, y as f64);
                assert!(ok);
                assert_eq!(v, img.pixel(x, y));
            }
        }
    }

    #[test]
    fn midpoint_is_average() {
        assert_eq!(bilinear_sample(&quad(), 0.5, 0.5), (vec![1.5], true));
    }

    #[test]
    fn out_of_bounds_is_flagged_zero() {
        assert_eq!(bilinear_sample(&quad(), -0.01, 0.5), (vec![0.0], false));
        assert_eq!(bilinear_sample(&quad(), 0.5, 1.0001), (vec![0.0], false));
        assert_eq!(bilinear_sample(&quad(), f64::NAN, 0.0), (vec![0.0], false));
        assert!(bilinear_sample(&quad(), 1.0, 1.0).1);
    }

    #[test]
    fn coordinate_gradient_matches_differences() {
        let img = ImageGrid::from_fn(6, 5, 1, |x, y, _| (x * x) as f64 * 0.1 + (y as f64).sin());
        let tap = BilinearTap::locate(6, 5, 2.3, 1.7).unwrap();
        let g = tap.coord_gradient(&img, 0);
        let h = 1e-6;
        let f = |x, y| bilinear_sample(&img, x, y).0[0];
        assert!((g[0] - (f(2.3 + h, 1.7) - f(2.3 - h, 1.7)) / (2.0 * h)).abs() < 1e-8);
        assert!((g[1] - (f(2.3, 1.7 + h) - f(2.3, 1.7 - h)) / (2.0 * h)).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn exact_on_affine_fields(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64,
                                  x in 0.0..9.0f64, y in 0.0..6.0f64) {
            let img = ImageGrid::from_fn(10, 7, 1, |i, j, _| a + b * i as f64 + c * j as f64);
            let (v, ok) = bilinear_sample(&img, x, y);
            prop_assert!(ok);
            prop_assert!((v[0] - (a + b * x + c * y)).abs() < 1e-12);
        }

        #[test]
        fn linear_in_source(al in -2.0..2.0f64, be in -2.0..2.0f64, x in 0.0..4.0f64, y in 0.0..3.0f64,
                            seed in 0u64..1000) {
            let f = |s: u64, i: usize, j: usize| (((i * 31 + j * 17) as u64 + s) % 97) as f64 / 97.0;
            let i1 = ImageGrid::from_fn(5, 4, 1, |i, j, _| f(seed, i, j));
            let i2 = ImageGrid::from_fn(5, 4, 1, |i, j, _| f(seed * 7 + 3, i, j));
            let mix = i1.lin_comb(al, &i2, be);
            let lhs = bilinear_sample(&mix, x, y).0[0];
            let rhs = al * bilinear_sample(&i1, x, y).0[0] + be * bilinear_sample(&i2, x, y).0[0];
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

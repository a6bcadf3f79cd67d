//! Depth error/accuracy metrics and 5-frame pose metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::image::DepthMap;
use crate::se3::RigidPose;

/// Indoor depth cap in meters.
pub const INDOOR_CAP: f64 = 10.0;
/// Outdoor depth cap in meters.
pub const OUTDOOR_CAP: f64 = 80.0;
/// Frames per pose-evaluation window.
pub const POSE_WINDOW: usize = 5;

/// The seven standard depth metrics, in table column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

pub const DEPTH_COLUMNS: [&str; 7] = ["AbsRel", "SqRel", "RMS", "RMSlog", "<1.25", "<1.25^2", "<1.25^3"];

impl DepthMetrics {
    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rms, self.rms_log, self.a1, self.a2, self.a3]
    }

    /// Per-column mean over several images.
    pub fn mean(all: &[DepthMetrics]) -> Result<DepthMetrics> {
        if all.is_empty() {
            return Err(domain("no depth metrics to average"));
        }
        let n = all.len() as f64;
        let mut acc = [0.0; 7];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rms, rms_log, a1, a2, a3] = acc.map(|v| v / n);
        Ok(DepthMetrics { abs_rel, sq_rel, rms, rms_log, a1, a2, a3 })
    }
}

/// Renders labelled rows as an aligned plain-text table with the
/// error/accuracy column layout of the usual depth benchmarks.
pub fn depth_table(rows: &[(&str, DepthMetrics)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$} |", "Method");
    for (i, c) in DEPTH_COLUMNS.iter().enumerate() {
        if i == 4 {
            out.push_str(" |");
        }
        let _ = write!(out, " {c:>8}");
    }
    out.push('\n');
    let width = out.len() - 1;
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for (label, m) in rows {
        let _ = write!(out, "{label:<label_w$} |");
        for (i, v) in m.values().iter().enumerate() {
            if i == 4 {
                out.push_str(" |");
            }
            let _ = write!(out, " {v:>8.3}");
        }
        out.push('\n');
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Depth metrics over pixels with `0 < gt ≤ cap`.
///
/// With `median_scale` the prediction is first multiplied by
/// `median(gt) / median(pred)` over the valid pixels, removing the
/// monocular scale ambiguity. Predictions are not clipped.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64, median_scale: bool) -> Result<DepthMetrics> {
    if !pred.same_shape(gt) || pred.channels() != 1 {
        return Err(domain("prediction and ground truth must be single-channel maps of equal size"));
    }
    if !(cap > 0.0) {
        return Err(domain("depth cap must be positive"));
    }
    let (mut p, g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|&(_, &g)| g > 0.0 && g <= cap)
        .map(|(&p, &g)| (p, g))
        .unzip();
    if g.is_empty() {
        return Err(domain("no valid ground-truth pixels"));
    }
    if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(domain("predicted depth must be positive and finite on valid pixels"));
    }
    if median_scale {
        let s = median(&mut g.clone()) / median(&mut p.clone());
        p.iter_mut().for_each(|v| *v *= s);
    }

    let n = g.len() as f64;
    let mut m = DepthMetrics::default();
    let (mut sq, mut sq_log) = (0.0, 0.0);
    for (&p, &g) in p.iter().zip(&g) {
        let d = p - g;
        m.abs_rel += d.abs() / g;
        m.sq_rel += d * d / g;
        sq += d * d;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        m.a1 += f64::from(u8::from(ratio < 1.25));
        m.a2 += f64::from(u8::from(ratio < 1.25 * 1.25));
        m.a3 += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rms = (sq / n).sqrt();
    m.rms_log = (sq_log / n).sqrt();
    m.a1 /= n;
    m.a2 /= n;
    m.a3 /= n;
    Ok(m)
}

/// Mean and standard deviation of ATE (m) and RE (rad) over 5-frame windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate_mean: f64,
    pub ate_std: f64,
    pub re_mean: f64,
    pub re_std: f64,
    pub windows: usize,
}

impl PoseMetrics {
    pub fn table(&self) -> String {
        format!(
            "{:>6} | {:>17} | {:>17}\n{:>6} | {:>8.4} ± {:<6.4} | {:>8.4} ± {:<6.4}\n",
            "Frames",
            "ATE (m)",
            "RE (rad)",
            self.windows,
            self.ate_mean,
            self.ate_std,
            self.re_mean,
            self.re_std
        )
    }
}

/// ATE and RE of a single window of world-from-camera poses.
///
/// Both trajectories are re-anchored at their first frame; the predicted
/// translations are then scaled by the least-squares factor
/// `Σ⟨p, g⟩ / Σ⟨p, p⟩`. ATE is the RMS translation difference over the
/// window and RE the mean rotation angle of the per-step relative-pose error.
pub fn window_errors(pred: &[RigidPose], gt: &[RigidPose]) -> (f64, f64) {
    let anchor = |poses: &[RigidPose]| -> Vec<RigidPose> {
        let inv0 = poses[0].inverse();
        poses.iter().map(|p| inv0.compose(p)).collect()
    };
    let (p, g) = (anchor(pred), anchor(gt));
    let (num, den) = p.iter().zip(&g).fold((0.0, 0.0), |(n, d), (p, g)| {
        (n + p.translation.dot(&g.translation), d + p.translation.norm_squared())
    });
    let scale = if den > 0.0 { num / den } else { 1.0 };
    let sq: f64 = p
        .iter()
        .zip(&g)
        .map(|(p, g)| (p.translation * scale - g.translation).norm_squared())
        .sum();
    let ate = (sq / p.len() as f64).sqrt();

    let steps = p.len() - 1;
    let re = (0..steps)
        .map(|i| {
            let dp = p[i].inverse().compose(&p[i + 1]);
            let dg = g[i].inverse().compose(&g[i + 1]);
            dg.inverse().compose(&dp).rotation_angle()
        })
        .sum::<f64>()
        / steps as f64;
    (ate, re)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// 5-frame ATE/RE over every window of `POSE_WINDOW` consecutive frames
/// (stride 1). Poses are world-from-camera.
pub fn pose_metrics_5frame(pred: &[RigidPose], gt: &[RigidPose]) -> Result<PoseMetrics> {
    if pred.len() != gt.len() {
        return Err(domain(format!(
            "trajectory lengths differ ({} predicted, {} ground truth)",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < POSE_WINDOW {
        return Err(domain(format!("need at least {POSE_WINDOW} poses, got {}", gt.len())));
    }
    let (ate, re): (Vec<f64>, Vec<f64>) = pred
        .windows(POSE_WINDOW)
        .zip(gt.windows(POSE_WINDOW))
        .map(|(p, g)| window_errors(p, g))
        .unzip();
    let (ate_mean, ate_std) = mean_std(&ate);
    let (re_mean, re_std) = mean_std(&re);
    Ok(PoseMetrics { ate_mean, ate_std, re_mean, re_std, windows: ate.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageGrid;
    use crate::se3::rotation_about;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn ramp() -> DepthMap {
        ImageGrid::from_fn(8, 6, 1, |x, y, _| 1.0 + 0.3 * x as f64 + 0.2 * y as f64)
    }

    fn trajectory(n: usize) -> Vec<RigidPose> {
        let mut pose = RigidPose::identity();
        let mut out = vec![pose];
        for i in 1..n {
            let step = RigidPose::new(
                rotation_about(&Vector3::new(0.2, 1.0, 0.1 * i as f64), 0.05),
                Vector3::new(0.1, 0.02 * i as f64, 0.3),
            );
            pose = pose.compose(&step);
            out.push(pose);
        }
        out
    }

    #[test]
    fn identical_depth_is_perfect() {
        let m = depth_metrics(&ramp(), &ramp(), INDOOR_CAP, true).unwrap();
        assert_eq!(m, DepthMetrics { a1: 1.0, a2: 1.0, a3: 1.0, ..Default::default() });
    }

    #[test]
    fn doubled_depth_with_median_scaling_is_perfect() {
        let m = depth_metrics(&ramp().map(|v| 2.0 * v), &ramp(), INDOOR_CAP, true).unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn doubled_depth_without_scaling() {
        let gt = ramp();
        let m = depth_metrics(&gt.map(|v| 2.0 * v), &gt, INDOOR_CAP, false).unwrap();
        assert!((m.abs_rel - 1.0).abs() < 1e-15);
        assert!((m.rms_log - 2f64.ln()).abs() < 1e-15);
        assert_eq!((m.a1, m.a2, m.a3), (0.0, 0.0, 0.0));
        let mean_g = gt.data().iter().sum::<f64>() / gt.data().len() as f64;
        assert!((m.sq_rel - mean_g).abs() < 1e-12);
    }

    #[test]
    fn cap_and_missing_gt_are_excluded() {
        let mut gt = ramp();
        gt.set(0, 0, 0, 0.0);
        gt.set(1, 0, 0, 50.0);
        let mut pred = ramp();
        pred.set(0, 0, 0, 7.0);
        pred.set(1, 0, 0, 1.0);
        let m = depth_metrics(&pred, &gt, INDOOR_CAP, false).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert!(depth_metrics(&pred, &ImageGrid::new(8, 6, 1), INDOOR_CAP, true).is_err());
    }

    #[test]
    fn table_has_seven_metric_columns() {
        let t = depth_table(&[("Ours", DepthMetrics { abs_rel: 0.163, a1: 0.771, ..Default::default() })]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        for c in DEPTH_COLUMNS {
            assert!(lines[0].contains(c));
        }
        let row: Vec<&str> = lines[2].split_whitespace().filter(|s| *s != "|").collect();
        assert_eq!(row, ["Ours", "0.163", "0.000", "0.000", "0.000", "0.771", "0.000", "0.000"]);
    }

    #[test]
    fn identical_trajectories_give_zero() {
        let gt = trajectory(9);
        let m = pose_metrics_5frame(&gt, &gt).unwrap();
        assert_eq!(m.windows, 5);
        assert!(m.ate_mean < 1e-15 && m.ate_std < 1e-15 && m.re_mean < 1e-7 && m.re_std < 1e-7);
    }

    #[test]
    fn scaled_translations_are_aligned() {
        let gt = trajectory(8);
        let pred: Vec<_> = gt.iter().map(|p| RigidPose::new(p.rotation, p.translation * 3.0)).collect();
        let m = pose_metrics_5frame(&pred, &gt).unwrap();
        assert!(m.ate_mean < 1e-14 && m.ate_std < 1e-14);
        assert!(m.re_mean < 1e-7);
    }

    #[test]
    fn perturbed_steps_match_window_oracle() {
        let gt = trajectory(8);
        let tweak = RigidPose::new(rotation_about(&Vector3::z(), 1f64.to_radians()), Vector3::zeros());
        let mut pred = vec![gt[0]];
        for w in gt.windows(2) {
            let step = w[0].inverse().compose(&w[1]).compose(&tweak);
            pred.push(pred.last().unwrap().compose(&step));
        }
        let m = pose_metrics_5frame(&pred, &gt).unwrap();
        assert!((m.re_mean - 1f64.to_radians()).abs() < 1e-12);
        assert!(m.re_std < 1e-12);

        let mut ates = Vec::new();
        for k in 0..=gt.len() - POSE_WINDOW {
            let p0 = pred[k].inverse();
            let g0 = gt[k].inverse();
            let pt: Vec<_> = (k..k + 5).map(|i| p0.compose(&pred[i]).translation).collect();
            let gtt: Vec<_> = (k..k + 5).map(|i| g0.compose(&gt[i]).translation).collect();
            let s = pt.iter().zip(&gtt).map(|(p, g)| p.dot(g)).sum::<f64>()
                / pt.iter().map(|p| p.norm_squared()).sum::<f64>();
            let rms = (pt.iter().zip(&gtt).map(|(p, g)| (p * s - g).norm_squared()).sum::<f64>() / 5.0).sqrt();
            ates.push(rms);
        }
        let mean = ates.iter().sum::<f64>() / ates.len() as f64;
        assert!((m.ate_mean - mean).abs() < 1e-14);
        assert!(m.ate_mean > 0.0);
    }

    #[test]
    fn short_or_mismatched_sequences_are_rejected() {
        let gt = trajectory(4);
        assert!(pose_metrics_5frame(&gt, &gt).is_err());
        assert!(pose_metrics_5frame(&trajectory(6), &trajectory(5)).is_err());
    }

    proptest! {
        #[test]
        fn metrics_ignore_pixel_order(seed in 0u64..500, scale in 0.5..2.0f64) {
            let f = |i: usize| 0.5 + ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0;
            let gt = ImageGrid::from_fn(6, 5, 1, |x, y, _| f(y * 6 + x));
            let pred = ImageGrid::from_fn(6, 5, 1, |x, y, _| scale * f(y * 6 + x) * (1.0 + 0.1 * ((x + y) % 3) as f64));
            let flip = |m: &DepthMap| ImageGrid::from_fn(6, 5, 1, |x, y, _| m.get(5 - x, 4 - y, 0));
            let a = depth_metrics(&pred, &gt, OUTDOOR_CAP, true).unwrap();
            let b = depth_metrics(&flip(&pred), &flip(&gt), OUTDOOR_CAP, true).unwrap();
            for (u, v) in a.values().iter().zip(b.values()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
            prop_assert!(a.a1 <= a.a2 && a.a2 <= a.a3 && a.a3 <= 1.0);
            prop_assert!(a.values()[..4].iter().all(|&e| e >= 0.0));
        }
    }
}

//! Trajectory metrics: absolute trajectory error after alignment and relative error over
//! fixed arc-length windows.

use std::fmt;
use std::io::{self, Write};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TimedPose;
use crate::so3::Pose;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectories do not overlap in time")]
    NoOverlap,
    #[error("only {0} associated poses; at least 2 are needed")]
    TooFewPairs(usize),
    #[error("invalid evaluation parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Full rigid alignment.
    #[default]
    Se3,
    /// Translation plus rotation about the vertical axis.
    PositionYaw,
    None,
}

impl Alignment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Alignment::Se3 => "se3",
            Alignment::PositionYaw => "position-yaw",
            Alignment::None => "none",
        }
    }
}

impl std::str::FromStr for Alignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "se3" => Ok(Alignment::Se3),
            "position-yaw" => Ok(Alignment::PositionYaw),
            "none" => Ok(Alignment::None),
            _ => Err(format!("unknown alignment {s:?} (expected se3, position-yaw or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Relative-error window length along the ground truth path, meters.
    pub window_m: f64,
    pub alignment: Alignment,
    /// Largest timestamp difference accepted when pairing poses, seconds.
    pub max_time_diff: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_m: 4.0,
            alignment: Alignment::Se3,
            max_time_diff: 0.02,
        }
    }
}

/// Error of one associated pose after alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub timestamp: f64,
    /// Meters.
    pub translation: f64,
    /// Radians.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ate_trans_cm: f64,
    pub ate_rot_deg: f64,
    /// `None` when the ground truth is shorter than one window.
    pub re_trans_median_cm: Option<f64>,
    pub re_rot_median_deg: Option<f64>,
    pub window_m: f64,
    pub windows: usize,
    pub pairs: usize,
    pub alignment: Alignment,
    /// Transform applied to the estimate.
    pub aligning_transform: Pose,
    pub errors: Vec<PoseError>,
}

/// Mutual-nearest timestamp pairs `(estimate index, ground truth index)`.
///
/// A pair is kept only when each pose is the other's nearest neighbor in time and the
/// gap is within `max_dt`; the result does not depend on which side is the estimate.
pub fn associate(estimate: &[TimedPose], ground_truth: &[TimedPose], max_dt: f64) -> Vec<(usize, usize)> {
    let nearest = |t: f64, list: &[TimedPose]| -> Option<usize> {
        let pos = list.partition_point(|p| p.timestamp < t);
        let mut best: Option<usize> = None;
        for k in [pos.wrapping_sub(1), pos] {
            if k < list.len() {
                let better = match best {
                    None => true,
                    Some(b) => (list[k].timestamp - t).abs() < (list[b].timestamp - t).abs(),
                };
                if better {
                    best = Some(k);
                }
            }
        }
        best
    };
    let mut out = Vec::new();
    for (i, e) in estimate.iter().enumerate() {
        let Some(j) = nearest(e.timestamp, ground_truth) else {
            continue;
        };
        if (ground_truth[j].timestamp - e.timestamp).abs() > max_dt {
            continue;
        }
        if nearest(ground_truth[j].timestamp, estimate) == Some(i) {
            out.push((i, j));
        }
    }
    out
}

/// Rigid transform `T` minimizing `Σ |b_k - T a_k|²`.
pub fn umeyama(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Pose {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<Vector3<f64>>() / n;
    let mu_b = b.iter().sum::<Vector3<f64>>() / n;
    let sigma = a
        .iter()
        .zip(b)
        .fold(Matrix3::zeros(), |acc, (x, y)| acc + (y - mu_b) * (x - mu_a).transpose())
        / n;
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    Pose::new(r, mu_b - r * mu_a)
}

/// Best rotation about z plus translation mapping `a` onto `b`.
pub fn align_position_yaw(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Pose {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<Vector3<f64>>() / n;
    let mu_b = b.iter().sum::<Vector3<f64>>() / n;
    let (mut sin, mut cos) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - mu_a, y - mu_b);
        sin += x.x * y.y - x.y * y.x;
        cos += x.x * y.x + x.y * y.y;
    }
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), sin.atan2(cos)).into_inner();
    Pose::new(r, mu_b - r * mu_a)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    })
}

/// Relative errors over windows of `window` meters of ground-truth arc length, one
/// window per start pose. Returns `(translation m, rotation rad)` per window.
pub fn relative_errors(estimate: &[Pose], ground_truth: &[Pose], window: f64) -> Vec<(f64, f64)> {
    let mut arc = Vec::with_capacity(ground_truth.len());
    let mut s = 0.0;
    for (k, p) in ground_truth.iter().enumerate() {
        if k > 0 {
            s += (p.translation - ground_truth[k - 1].translation).norm();
        }
        arc.push(s);
    }
    let mut out = Vec::new();
    let mut j = 0;
    for i in 0..ground_truth.len() {
        j = j.max(i);
        while j < ground_truth.len() && arc[j] - arc[i] < window {
            j += 1;
        }
        if j == ground_truth.len() {
            break;
        }
        let d_gt = ground_truth[i].inverse().compose(&ground_truth[j]);
        let d_est = estimate[i].inverse().compose(&estimate[j]);
        let e = d_gt.inverse().compose(&d_est);
        out.push((e.translation.norm(), Pose::identity().angle_to(&e)));
    }
    out
}

pub fn evaluate(estimate: &[TimedPose], ground_truth: &[TimedPose], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if !(cfg.window_m > 0.0 && cfg.window_m.is_finite()) {
        return Err(EvalError::InvalidParameter(format!("window = {}", cfg.window_m)));
    }
    if !(cfg.max_time_diff >= 0.0) {
        return Err(EvalError::InvalidParameter(format!("max_time_diff = {}", cfg.max_time_diff)));
    }
    let pairs = associate(estimate, ground_truth, cfg.max_time_diff);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    if pairs.len() < 2 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let est: Vec<Pose> = pairs.iter().map(|&(i, _)| estimate[i].pose).collect();
    let gt: Vec<Pose> = pairs.iter().map(|&(_, j)| ground_truth[j].pose).collect();
    let a: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let b: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    let align = match cfg.alignment {
        Alignment::Se3 => umeyama(&a, &b),
        Alignment::PositionYaw => align_position_yaw(&a, &b),
        Alignment::None => Pose::identity(),
    };

    let errors: Vec<PoseError> = pairs
        .iter()
        .zip(est.iter().zip(&gt))
        .map(|(&(i, _), (e, g))| {
            let aligned = align.compose(e);
            PoseError {
                timestamp: estimate[i].timestamp,
                translation: (aligned.translation - g.translation).norm(),
                rotation: aligned.angle_to(g),
            }
        })
        .collect();
    let n = errors.len() as f64;
    let rmse = |f: fn(&PoseError) -> f64| (errors.iter().map(|e| f(e).powi(2)).sum::<f64>() / n).sqrt();

    let re = relative_errors(&est, &gt, cfg.window_m);
    let mut re_t: Vec<f64> = re.iter().map(|r| r.0).collect();
    let mut re_r: Vec<f64> = re.iter().map(|r| r.1).collect();

    Ok(EvalReport {
        ate_trans_cm: rmse(|e| e.translation) * 100.0,
        ate_rot_deg: rmse(|e| e.rotation).to_degrees(),
        re_trans_median_cm: median(&mut re_t).map(|v| v * 100.0),
        re_rot_median_deg: median(&mut re_r).map(f64::to_degrees),
        window_m: cfg.window_m,
        windows: re.len(),
        pairs: pairs.len(),
        alignment: cfg.alignment,
        aligning_transform: align,
        errors,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl EvalReport {
    /// Flat `key=value` lines.
    pub fn write_key_values<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "ate_trans_cm={}", self.ate_trans_cm)?;
        writeln!(w, "ate_rot_deg={}", self.ate_rot_deg)?;
        writeln!(w, "re_trans_median_cm={}", opt(self.re_trans_median_cm))?;
        writeln!(w, "re_rot_median_deg={}", opt(self.re_rot_median_deg))?;
        writeln!(w, "window_m={}", self.window_m)?;
        writeln!(w, "windows={}", self.windows)?;
        writeln!(w, "pairs={}", self.pairs)?;
        writeln!(w, "alignment={}", self.alignment.as_str())
    }

    /// Per-pose errors as CSV.
    pub fn write_errors_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["timestamp_s", "trans_err_m", "rot_err_deg"])?;
        for e in &self.errors {
            out.write_record([
                e.timestamp.to_string(),
                e.translation.to_string(),
                e.rotation.to_degrees().to_string(),
            ])?;
        }
        out.flush()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
        writeln!(f, "poses associated    {}", self.pairs)?;
        writeln!(f, "alignment           {}", self.alignment.as_str())?;
        writeln!(f, "ATE translation     {:.3} cm", self.ate_trans_cm)?;
        writeln!(f, "ATE rotation        {:.3} deg", self.ate_rot_deg)?;
        writeln!(
            f,
            "RE translation      {} cm (median over {} windows of {} m)",
            fmt_opt(self.re_trans_median_cm),
            self.windows,
            self.window_m
        )?;
        write!(f, "RE rotation         {} deg", fmt_opt(self.re_rot_median_deg))
    }
}

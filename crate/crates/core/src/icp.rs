//! Point-cloud-to-elevation-map registration.
//!
//! The cloud is pre-transformed by a prior camera pose and reduced to the highest point
//! per grid cell. Each remaining point is matched against the 3×3 cell neighborhood it
//! falls into, the matched cell supplies a Sobel normal, and a Cauchy-weighted
//! point-to-plane problem is solved for a small world-frame correction
//! `tau = (theta, p)`, linearized as `R ≈ I + skew(theta)`.
//!
//! The covariance of the estimate accounts for noise in both the residuals and the
//! normals: `σ_b² H⁻¹ + H⁻¹ (Σ b_k² Var(a_k)) H⁻¹` with `H = AᵀA`.

use nalgebra::{Matrix3, Matrix6, SMatrix, SymmetricEigen, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elevation_map::{CellIndex, ElevationGrid};
use crate::so3::{skew, Pose, Twist};

/// Relative Tikhonov weight added to the normal equations before inversion.
pub const TIKHONOV_EPS: f64 = 1e-10;
/// Condition number above which the regularized normal equations are refused.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("no cloud point falls inside the grid")]
    EmptyCloud,
    #[error("normal equations are singular (condition number {0:.3e})")]
    Singular(f64),
    #[error("invalid ICP configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    /// Correspondence distance gate, meters.
    pub d_max: f64,
    /// Maximum normal-to-vertical angle, radians.
    pub phi_max: f64,
    /// Cauchy loss scale, meters.
    pub cauchy_scale: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the translation increment, meters.
    pub translation_tol: f64,
    /// Convergence threshold on the rotation increment, radians.
    pub rotation_tol: f64,
    pub min_correspondences: usize,
    /// Residual noise standard deviation, meters.
    pub sigma_b: f64,
    /// Normal perturbation standard deviation.
    pub sigma_n: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            d_max: 0.05,
            phi_max: 20f64.to_radians(),
            cauchy_scale: 0.02,
            max_iterations: 30,
            translation_tol: 0.5e-3,
            rotation_tol: 0.05f64.to_radians(),
            min_correspondences: 50,
            sigma_b: 0.01,
            sigma_n: 0.1,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), IcpError> {
        let positive = [
            ("d_max", self.d_max),
            ("phi_max", self.phi_max),
            ("cauchy_scale", self.cauchy_scale),
            ("translation_tol", self.translation_tol),
            ("rotation_tol", self.rotation_tol),
            ("sigma_b", self.sigma_b),
            ("sigma_n", self.sigma_n),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(IcpError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(IcpError::InvalidConfig("max_iterations = 0".into()));
        }
        if self.min_correspondences < 6 {
            return Err(IcpError::InvalidConfig(format!(
                "min_correspondences = {} (< 6)",
                self.min_correspondences
            )));
        }
        Ok(())
    }
}

/// A cloud point after downsampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownsampledPoint {
    /// Point in the sensor frame.
    pub sensor: Vector3<f64>,
    /// Point in the world frame under the pose used for binning.
    pub world: Vector3<f64>,
    /// Distance to the camera origin, meters.
    pub distance: f64,
}

/// Keeps the highest point per grid cell after transforming every sensor point by `pose`.
///
/// Points outside the grid are dropped. The output is ordered by cell storage index; ties
/// in height keep the earliest input point, so the result does not depend on any
/// processing order.
pub fn bin_highest(sensor_points: &[Vector3<f64>], pose: &Pose, grid: &ElevationGrid) -> Vec<DownsampledPoint> {
    let mut keyed: Vec<(usize, u32, DownsampledPoint)> = Vec::with_capacity(sensor_points.len());
    for (i, s) in sensor_points.iter().enumerate() {
        let world = pose.transform_point(s);
        if !world.iter().all(|v| v.is_finite()) {
            continue;
        }
        if let Some(idx) = grid.cell_index(world.xy()) {
            keyed.push((
                grid.linear_index(idx),
                i as u32,
                DownsampledPoint {
                    sensor: *s,
                    world,
                    distance: s.norm(),
                },
            ));
        }
    }
    keyed.sort_unstable_by_key(|&(cell, i, _)| (cell, i));
    let mut out: Vec<DownsampledPoint> = Vec::new();
    let mut current: Option<usize> = None;
    for (cell, _, p) in keyed {
        if current == Some(cell) {
            let last = out.last_mut().unwrap();
            if p.world.z > last.world.z {
                *last = p;
            }
        } else {
            current = Some(cell);
            out.push(p);
        }
    }
    out
}

/// Transforms the cloud by the prior camera pose and keeps the highest point per cell.
pub fn downsample(
    cloud: &[Vector3<f64>],
    prior_camera_pose: &Pose,
    grid: &ElevationGrid,
) -> Result<Vec<DownsampledPoint>, IcpError> {
    let out = bin_highest(cloud, prior_camera_pose, grid);
    if out.is_empty() {
        return Err(IcpError::EmptyCloud);
    }
    Ok(out)
}

/// Matched point pair with the map normal and its robust weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Cloud point, world frame.
    pub q: Vector3<f64>,
    /// Map point `(cell center x, cell center y, h)`.
    pub q_prime: Vector3<f64>,
    /// Unit normal of the map at the matched cell.
    pub n: Vector3<f64>,
    /// Robust weight in `(0, 1]`.
    pub w: f64,
    /// Matched cell.
    pub cell: CellIndex,
    /// Index of `q` in the queried point list.
    pub source: usize,
}

/// Nearest occupied cell point among the 3×3 neighborhood of `q`'s cell, scanned in
/// row-major order with strict improvement (first candidate wins ties).
#[inline]
pub fn nearest_in_neighborhood(q: &Vector3<f64>, grid: &ElevationGrid) -> Option<(CellIndex, Vector3<f64>, f64)> {
    let center = grid.cell_index(Vector2::new(q.x, q.y))?;
    let n = grid.side_cells();
    let mut best: Option<(CellIndex, Vector3<f64>, f64)> = None;
    for dx in -1i64..=1 {
        let ix = center.ix as i64 + dx;
        if ix < 0 || ix >= n as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let iy = center.iy as i64 + dy;
            if iy < 0 || iy >= n as i64 {
                continue;
            }
            let idx = CellIndex::new(ix as usize, iy as usize);
            let Some(p) = grid.cell_point(idx) else { continue };
            let d2 = (p - q).norm_squared();
            if best.is_none_or(|(_, _, b)| d2 < b) {
                best = Some((idx, p, d2));
            }
        }
    }
    best.map(|(idx, p, d2)| (idx, p, d2.sqrt()))
}

/// Matches every point against the map. Unmatched points are dropped.
pub fn find_correspondences(points: &[Vector3<f64>], grid: &ElevationGrid, cfg: &IcpConfig) -> Vec<Correspondence> {
    let mut cache = NormalCache::new(points.len());
    find_correspondences_cached(points, grid, cfg, &mut cache)
}

/// Per-point memo of the last matched cell and its normal. Normals depend only on the
/// map, so they are recomputed only when a point's match moves to another cell.
struct NormalCache {
    entries: Vec<Option<(CellIndex, Option<Vector3<f64>>)>>,
}

impl NormalCache {
    fn new(len: usize) -> Self {
        Self {
            entries: vec![None; len],
        }
    }
}

fn find_correspondences_cached(
    points: &[Vector3<f64>],
    grid: &ElevationGrid,
    cfg: &IcpConfig,
    cache: &mut NormalCache,
) -> Vec<Correspondence> {
    let mut out = Vec::with_capacity(points.len());
    for (i, q) in points.iter().enumerate() {
        let Some((cell, q_prime, dist)) = nearest_in_neighborhood(q, grid) else {
            continue;
        };
        if dist > cfg.d_max {
            continue;
        }
        let normal = match cache.entries[i] {
            Some((c, n)) if c == cell => n,
            _ => {
                let n = grid.normal_at(cell, cfg.phi_max);
                cache.entries[i] = Some((cell, n));
                n
            }
        };
        if let Some(n) = normal {
            out.push(Correspondence {
                q: *q,
                q_prime,
                n,
                w: 1.0,
                cell,
                source: i,
            });
        }
    }
    out
}

/// Cauchy IRLS weight for residual `r` at scale `c`.
#[inline]
pub fn cauchy_weight(r: f64, c: f64) -> f64 {
    let u = r / c;
    1.0 / (1.0 + u * u)
}

/// Unweighted regressor `(q × n, n)` and target `nᵀ(q' - q)` of one pair.
#[inline]
fn regressor(c: &Correspondence) -> (Vector6<f64>, f64) {
    let qxn = c.q.cross(&c.n);
    let a = Vector6::new(qxn.x, qxn.y, qxn.z, c.n.x, c.n.y, c.n.z);
    (a, c.n.dot(&(c.q_prime - c.q)))
}

/// Point-to-plane residual of the linearized model at `tau`.
#[inline]
pub fn linearized_residual(c: &Correspondence, tau: &Twist) -> f64 {
    let theta = tau.fixed_rows::<3>(0).into_owned();
    let p = tau.fixed_rows::<3>(3).into_owned();
    c.n.dot(&(c.q + theta.cross(&c.q) + p - c.q_prime))
}

/// Output of [`solve_irls`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsSolution {
    pub tau: Twist,
    /// Final robust weights, one per correspondence.
    pub weights: Vec<f64>,
    /// Rows `a_k = √w_k (q_k × n_k, n_k)`.
    pub a: Vec<Vector6<f64>>,
    /// Entries `b_k = √w_k n_kᵀ(q'_k - q_k)`.
    pub b: Vec<f64>,
}

/// Inverse of `H + ε tr(H)/6 I`, refusing ill-conditioned or non-finite systems.
pub fn regularized_inverse(h: &Matrix6<f64>) -> Result<Matrix6<f64>, IcpError> {
    let trace = h.trace();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(IcpError::Singular(f64::INFINITY));
    }
    let reg = h + Matrix6::identity() * (TIKHONOV_EPS * trace / 6.0);
    let eig = SymmetricEigen::new(reg);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(IcpError::Singular(cond));
    }
    let inv_diag = eig.eigenvalues.map(|l| 1.0 / l);
    let inv = eig.eigenvectors * Matrix6::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();
    Ok(symmetrize(&inv))
}

#[inline]
pub fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// Robust point-to-plane solve over fixed correspondences.
///
/// Each of the `reweight_steps` rounds evaluates the linearized residuals at the current
/// `tau`, refreshes the Cauchy weights and re-solves the weighted normal equations.
pub fn solve_irls(
    correspondences: &[Correspondence],
    cfg: &IcpConfig,
    reweight_steps: usize,
) -> Result<IrlsSolution, IcpError> {
    let rows: Vec<(Vector6<f64>, f64)> = correspondences.iter().map(regressor).collect();
    let mut tau = Twist::zeros();
    let mut weights = vec![1.0; correspondences.len()];
    for _ in 0..reweight_steps.max(1) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for ((c, (a, b)), w) in correspondences.iter().zip(&rows).zip(weights.iter_mut()) {
            *w = cauchy_weight(linearized_residual(c, &tau), cfg.cauchy_scale);
            h += (*w * a) * a.transpose();
            g += (*w * b) * a;
        }
        tau = regularized_inverse(&h)? * g;
    }
    let (a, b) = rows
        .iter()
        .zip(&weights)
        .map(|((a, b), w)| {
            let s = w.sqrt();
            (a * s, b * s)
        })
        .unzip();
    Ok(IrlsSolution { tau, weights, a, b })
}

/// The two terms of the registration covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceTerms {
    /// `σ_b² H⁻¹`: residual noise with exactly known regressors.
    pub residual: Matrix6<f64>,
    /// `H⁻¹ (Σ b_k² Var(a_k)) H⁻¹`: noise propagated from the normals.
    pub normal: Matrix6<f64>,
}

impl CovarianceTerms {
    pub fn total(&self) -> Matrix6<f64> {
        symmetrize(&(self.residual + self.normal))
    }
}

/// `Var(a_k) = σ_n² w_k [skew(q); I] (I - n nᵀ) [-skew(q), I]`.
pub fn regressor_variance(q: &Vector3<f64>, n: &Vector3<f64>, w: f64, sigma_n: f64) -> Matrix6<f64> {
    let proj = Matrix3::identity() - n * n.transpose();
    let mut left = SMatrix::<f64, 6, 3>::zeros();
    left.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(q));
    left.fixed_view_mut::<3, 3>(3, 0).copy_from(&Matrix3::identity());
    left * proj * left.transpose() * (sigma_n * sigma_n * w)
}

/// Both covariance terms for a converged solve.
pub fn icp_covariance_terms(
    a: &[Vector6<f64>],
    b: &[f64],
    weights: &[f64],
    correspondences: &[Correspondence],
    cfg: &IcpConfig,
) -> Result<CovarianceTerms, IcpError> {
    let h = a.iter().fold(Matrix6::zeros(), |acc, a| acc + a * a.transpose());
    let h_inv = regularized_inverse(&h)?;
    let mut s = Matrix6::zeros();
    for ((c, &bk), &w) in correspondences.iter().zip(b).zip(weights) {
        s += regressor_variance(&c.q, &c.n, w, cfg.sigma_n) * (bk * bk);
    }
    Ok(CovarianceTerms {
        residual: h_inv * (cfg.sigma_b * cfg.sigma_b),
        normal: symmetrize(&(h_inv * s * h_inv)),
    })
}

/// Full registration covariance, rotation first.
pub fn icp_covariance(
    a: &[Vector6<f64>],
    b: &[f64],
    weights: &[f64],
    correspondences: &[Correspondence],
    cfg: &IcpConfig,
) -> Result<Matrix6<f64>, IcpError> {
    Ok(icp_covariance_terms(a, b, weights, correspondences, cfg)?.total())
}

/// Why a registration produced no usable estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationFailure {
    /// The map has fewer occupied cells than `min_correspondences`.
    InsufficientMap,
    /// No cloud point landed inside the grid.
    EmptyCloud,
    /// Fewer than `min_correspondences` pairs at some iteration.
    TooFewCorrespondences,
    /// The normal equations could not be inverted.
    Singular,
}

impl RegistrationFailure {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegistrationFailure::InsufficientMap => "insufficient_map",
            RegistrationFailure::EmptyCloud => "empty_cloud",
            RegistrationFailure::TooFewCorrespondences => "too_few_correspondences",
            RegistrationFailure::Singular => "singular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// World-frame correction mapping the pre-transformed cloud onto the map.
    pub correction: Pose,
    /// Full covariance of the correction over `(theta, p)`.
    pub covariance: Matrix6<f64>,
    /// Residual-only term `σ_b² H⁻¹` of the covariance.
    pub covariance_residual_only: Matrix6<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_corr: usize,
    /// Mean absolute point-to-plane residual of the last iteration, meters.
    pub mean_residual: f64,
    pub failure: Option<RegistrationFailure>,
}

impl IcpResult {
    fn failed(failure: RegistrationFailure, iterations: usize, n_corr: usize) -> Self {
        Self {
            correction: Pose::identity(),
            covariance: Matrix6::zeros(),
            covariance_residual_only: Matrix6::zeros(),
            iterations,
            converged: false,
            n_corr,
            mean_residual: f64::NAN,
            failure: Some(failure),
        }
    }

    pub fn is_success(&self) -> bool {
        self.failure.is_none()
    }

    /// Camera pose after applying the correction to `prior`.
    pub fn corrected_pose(&self, prior: &Pose) -> Pose {
        self.correction.compose(prior)
    }
}

/// Registration output plus the downsampled cloud reused by the map update.
#[derive(Debug, Clone)]
pub struct Registration {
    pub result: IcpResult,
    pub downsampled: Vec<DownsampledPoint>,
}

/// Registers a sensor-frame cloud against the grid, starting from `prior_camera_pose`.
pub fn register(
    cloud: &[Vector3<f64>],
    prior_camera_pose: &Pose,
    grid: &ElevationGrid,
    cfg: &IcpConfig,
) -> Registration {
    let downsampled = bin_highest(cloud, prior_camera_pose, grid);
    if grid.occupied_count() < cfg.min_correspondences {
        return Registration {
            result: IcpResult::failed(RegistrationFailure::InsufficientMap, 0, 0),
            downsampled,
        };
    }
    if downsampled.is_empty() {
        return Registration {
            result: IcpResult::failed(RegistrationFailure::EmptyCloud, 0, 0),
            downsampled,
        };
    }
    let result = register_downsampled(&downsampled, grid, cfg);
    Registration { result, downsampled }
}

/// Registration loop over an already downsampled cloud.
pub fn register_downsampled(downsampled: &[DownsampledPoint], grid: &ElevationGrid, cfg: &IcpConfig) -> IcpResult {
    let mut cache = NormalCache::new(downsampled.len());
    let mut correction = Pose::identity();
    let mut points: Vec<Vector3<f64>> = downsampled.iter().map(|p| p.world).collect();
    let mut last: Option<(IrlsSolution, Vec<Correspondence>)> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        for (dst, src) in points.iter_mut().zip(downsampled) {
            *dst = correction.transform_point(&src.world);
        }
        let mut corrs = find_correspondences_cached(&points, grid, cfg, &mut cache);
        if corrs.len() < cfg.min_correspondences {
            return IcpResult::failed(RegistrationFailure::TooFewCorrespondences, iterations, corrs.len());
        }
        let sol = match solve_irls(&corrs, cfg, 1) {
            Ok(s) => s,
            Err(_) => return IcpResult::failed(RegistrationFailure::Singular, iterations, corrs.len()),
        };
        for (c, w) in corrs.iter_mut().zip(&sol.weights) {
            c.w = *w;
        }
        let step = Pose::from_twist(&sol.tau);
        correction = step.compose(&correction);
        let dtheta = sol.tau.fixed_rows::<3>(0).norm();
        let dp = sol.tau.fixed_rows::<3>(3).norm();
        last = Some((sol, corrs));
        if dp < cfg.translation_tol && dtheta < cfg.rotation_tol {
            converged = true;
            break;
        }
    }

    let (sol, corrs) = last.expect("at least one iteration");
    let terms = match icp_covariance_terms(&sol.a, &sol.b, &sol.weights, &corrs, cfg) {
        Ok(t) => t,
        Err(_) => return IcpResult::failed(RegistrationFailure::Singular, iterations, corrs.len()),
    };
    let mean_residual = corrs
        .iter()
        .map(|c| linearized_residual(c, &Twist::zeros()).abs())
        .sum::<f64>()
        / corrs.len() as f64;
    IcpResult {
        correction,
        covariance: terms.total(),
        covariance_residual_only: terms.residual,
        iterations,
        converged,
        n_corr: corrs.len(),
        mean_residual,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elevation_map::Cell;
    use crate::so3::exp_so3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn cfg() -> IcpConfig {
        IcpConfig::default()
    }

    fn filled_grid(side: usize, f: impl Fn(f64, f64) -> f64) -> ElevationGrid {
        let mut grid = ElevationGrid::new(0.01, side, Vector2::new(-(side as f64) * 0.005, -(side as f64) * 0.005)).unwrap();
        for ix in 0..side {
            for iy in 0..side {
                let idx = CellIndex::new(ix, iy);
                let c = grid.cell_center(idx);
                *grid.cell_mut(idx) = Cell::Occupied { h: f(c.x, c.y), var: 1e-6 };
            }
        }
        grid
    }

    #[test]
    fn downsample_keeps_highest() {
        let grid = filled_grid(10, |_, _| 0.0);
        let cloud = [Vector3::new(0.001, 0.001, 0.1), Vector3::new(0.002, 0.003, 0.3)];
        let out = downsample(&cloud, &Pose::identity(), &grid).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].world, cloud[1]);
        assert_relative_eq!(out[0].distance, cloud[1].norm());

        let single = downsample(&cloud[..1], &Pose::identity(), &grid).unwrap();
        assert_eq!(single[0].world, cloud[0]);
        assert_eq!(single[0].sensor, cloud[0]);

        let far = [Vector3::new(10.0, 0.0, 0.0)];
        assert_eq!(downsample(&far, &Pose::identity(), &grid), Err(IcpError::EmptyCloud));
        assert_eq!(downsample(&[], &Pose::identity(), &grid), Err(IcpError::EmptyCloud));
    }

    #[test]
    fn downsample_counts_distinct_cells() {
        let grid = ElevationGrid::new(0.01, 400, Vector2::new(-2.0, -2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud: Vec<Vector3<f64>> = (0..10_000)
            .map(|_| Vector3::new(rng.random_range(-2.1..2.1), rng.random_range(-2.1..2.1), rng.random_range(0.0..1.0)))
            .collect();
        let distinct: HashSet<CellIndex> = cloud.iter().filter_map(|p| grid.cell_index(p.xy())).collect();
        let out = downsample(&cloud, &Pose::identity(), &grid).unwrap();
        assert_eq!(out.len(), distinct.len());
        let again: Vec<Vector3<f64>> = out.iter().map(|p| p.world).collect();
        let twice = downsample(&again, &Pose::identity(), &grid).unwrap();
        assert_eq!(twice, out);
    }

    #[test]
    fn correspondence_basic_cases() {
        let mut grid = filled_grid(20, |_, _| 0.2);
        let idx = CellIndex::new(10, 10);
        let c = grid.cell_center(idx);
        let q = Vector3::new(c.x, c.y, 0.23);
        let corrs = find_correspondences(&[q], &grid, &cfg());
        assert_eq!(corrs.len(), 1);
        assert_eq!(corrs[0].cell, idx);
        assert_relative_eq!(corrs[0].q_prime, Vector3::new(c.x, c.y, 0.2));
        assert_eq!(corrs[0].n, Vector3::z());
        assert_eq!(corrs[0].w, 1.0);

        // beyond the distance gate
        assert!(find_correspondences(&[Vector3::new(c.x, c.y, 0.26)], &grid, &cfg()).is_empty());

        for dx in 0..3 {
            for dy in 0..3 {
                *grid.cell_mut(CellIndex::new(9 + dx, 9 + dy)) = Cell::Empty;
            }
        }
        assert!(find_correspondences(&[q], &grid, &cfg()).is_empty());
    }

    #[test]
    fn correspondences_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut grid = ElevationGrid::new(0.01, 30, Vector2::zeros()).unwrap();
        for ix in 0..30 {
            for iy in 0..30 {
                if rng.random_bool(0.98) {
                    // gentle surface so most normals pass the angle gate
                    let h = 0.1 + 0.002 * rng.random_range(-1.0..1.0);
                    *grid.cell_mut(CellIndex::new(ix, iy)) = Cell::Occupied { h, var: 1e-4 };
                }
            }
        }
        let c = cfg();
        let points: Vec<Vector3<f64>> = (0..2000)
            .map(|_| Vector3::new(rng.random_range(-0.01..0.31), rng.random_range(-0.01..0.31), rng.random_range(0.06..0.14)))
            .collect();
        let got = find_correspondences(&points, &grid, &c);
        let mut expected = Vec::new();
        for (i, q) in points.iter().enumerate() {
            let Some(center) = grid.cell_index(q.xy()) else { continue };
            let mut best: Option<(CellIndex, f64)> = None;
            for ix in center.ix as i64 - 1..=center.ix as i64 + 1 {
                for iy in center.iy as i64 - 1..=center.iy as i64 + 1 {
                    if !(0..30).contains(&ix) || !(0..30).contains(&iy) {
                        continue;
                    }
                    let idx = CellIndex::new(ix as usize, iy as usize);
                    let Cell::Occupied { h, .. } = grid.cell(idx) else { continue };
                    let cc = grid.cell_center(idx);
                    let d = ((cc.x - q.x).powi(2) + (cc.y - q.y).powi(2) + (h - q.z).powi(2)).sqrt();
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((idx, d));
                    }
                }
            }
            if let Some((idx, d)) = best {
                if d <= c.d_max && grid.normal_at(idx, c.phi_max).is_some() {
                    expected.push((i, idx));
                }
            }
        }
        let got: Vec<(usize, CellIndex)> = got.iter().map(|c| (c.source, c.cell)).collect();
        assert!(expected.len() > 500);
        assert_eq!(got, expected);
    }

    #[test]
    fn tie_breaks_row_major() {
        let mut grid = ElevationGrid::new(1.0, 3, Vector2::zeros()).unwrap();
        for ix in 0..3 {
            for iy in 0..3 {
                *grid.cell_mut(CellIndex::new(ix, iy)) = Cell::Occupied { h: 0.0, var: 1.0 };
            }
        }
        // Equidistant from the centers of (0,0), (0,1), (1,0), (1,1).
        let q = Vector3::new(1.0, 1.0, 0.0);
        let (idx, _, _) = nearest_in_neighborhood(&q, &grid).unwrap();
        assert_eq!(idx, CellIndex::new(0, 0));
    }

    fn pair(q: Vector3<f64>, q_prime: Vector3<f64>, n: Vector3<f64>) -> Correspondence {
        Correspondence {
            q,
            q_prime,
            n: n.normalize(),
            w: 1.0,
            cell: CellIndex::new(0, 0),
            source: 0,
        }
    }

    fn floor_pairs(offset: f64) -> Vec<Correspondence> {
        let mut out = Vec::new();
        for i in -5..=5 {
            for j in -5..=5 {
                let p = Vector3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0);
                out.push(pair(p + Vector3::new(0.0, 0.0, offset), p, Vector3::z()));
            }
        }
        out
    }

    #[test]
    fn irls_zero_residual_fixed_point() {
        let corrs = floor_pairs(0.0);
        let sol = solve_irls(&corrs, &cfg(), 3).unwrap();
        assert!(sol.tau.norm() < 1e-12);
        assert!(sol.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn irls_vertical_shift() {
        let delta = 0.013;
        let expected = Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, -delta);
        // One round weights every pair at the initial residual delta.
        let sol = solve_irls(&floor_pairs(delta), &cfg(), 1).unwrap();
        assert!((sol.tau - expected).norm() < 1e-9, "{}", sol.tau);
        let w = cauchy_weight(delta, cfg().cauchy_scale);
        assert!(sol.weights.iter().all(|&x| (x - w).abs() < 1e-12));
        // Further rounds see zero residuals.
        let sol = solve_irls(&floor_pairs(delta), &cfg(), 3).unwrap();
        assert!((sol.tau - expected).norm() < 1e-9, "{}", sol.tau);
        assert!(sol.weights.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn irls_rejects_empty_system() {
        assert!(matches!(solve_irls(&[], &cfg(), 1), Err(IcpError::Singular(_))));
    }

    #[test]
    fn covariance_reduces_without_residuals() {
        let corrs = floor_pairs(0.0);
        let sol = solve_irls(&corrs, &cfg(), 1).unwrap();
        let terms = icp_covariance_terms(&sol.a, &sol.b, &sol.weights, &corrs, &cfg()).unwrap();
        assert_eq!(terms.normal, Matrix6::zeros());
        let h = sol.a.iter().fold(Matrix6::zeros(), |acc, a| acc + a * a.transpose());
        let expected = regularized_inverse(&h).unwrap() * cfg().sigma_b.powi(2);
        assert_relative_eq!(terms.total(), expected, epsilon = 1e-12);
    }

    #[test]
    fn regressor_variance_projector_structure() {
        let v = regressor_variance(&Vector3::zeros(), &Vector3::z(), 0.5, 0.1);
        let mut expected = Matrix6::zeros();
        expected[(3, 3)] = 0.01 * 0.5;
        expected[(4, 4)] = 0.01 * 0.5;
        assert_relative_eq!(v, expected, epsilon = 1e-18);
    }

    #[test]
    fn regressor_variance_matches_finite_differences() {
        // Var(a) = J Var(δn) Jᵀ with J the Jacobian of a(n ⊕ δ) at δ = 0.
        let q = Vector3::new(0.4, -1.2, 0.3);
        let n = Vector3::new(0.1, -0.2, 1.0).normalize();
        let (w, sigma): (f64, f64) = (0.7, 0.05);
        let a_of = |n: &Vector3<f64>| {
            let v = q.cross(n);
            Vector6::new(v.x, v.y, v.z, n.x, n.y, n.z) * w.sqrt()
        };
        let h = 1e-6;
        let mut jac = SMatrix::<f64, 6, 3>::zeros();
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = a_of(&crate::so3::s2_oplus(&n, &d).unwrap());
            let minus = a_of(&crate::so3::s2_oplus(&n, &(-d)).unwrap());
            jac.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        let numeric = jac * jac.transpose() * sigma * sigma;
        assert_relative_eq!(regressor_variance(&q, &n, w, sigma), numeric, epsilon = 1e-10);
    }

    #[test]
    fn register_fails_on_sparse_map() {
        let grid = ElevationGrid::new(0.01, 50, Vector2::zeros()).unwrap();
        let reg = register(&[Vector3::new(0.1, 0.1, 0.0)], &Pose::identity(), &grid, &cfg());
        assert_eq!(reg.result.failure, Some(RegistrationFailure::InsufficientMap));
        assert!(!reg.result.converged);
    }

    #[test]
    fn register_self_alignment_on_bowl() {
        // A bowl constrains every direction.
        let grid = filled_grid(120, |x, y| 0.15 * (x * x + y * y) / 0.36);
        let mut cloud = Vec::new();
        for i in 0..100 {
            for j in 0..100 {
                let (x, y) = (-0.5 + i as f64 * 0.0101, -0.5 + j as f64 * 0.0101);
                cloud.push(Vector3::new(x, y, 0.15 * (x * x + y * y) / 0.36));
            }
        }
        let reg = register(&cloud, &Pose::identity(), &grid, &cfg());
        let r = &reg.result;
        assert!(r.converged, "{r:?}");
        assert!(crate::so3::log_so3(&r.correction.rotation).unwrap().norm() < 1e-3);
        assert!(r.correction.translation.norm() < 1e-3);
        let eig = SymmetricEigen::new(r.covariance).eigenvalues;
        assert!(eig.min() >= -1e-10 * r.covariance.trace());

        let offset = Pose::new(exp_so3(&Vector3::new(0.0, 0.0, 0.0)), Vector3::new(0.0, 0.0, 0.02));
        let reg = register(&cloud, &offset, &grid, &cfg());
        assert!(reg.result.converged);
        assert!((reg.result.correction.translation.z + 0.02).abs() < 2e-3);
    }

    proptest! {
        #[test]
        fn cauchy_weight_monotone(r1 in 0.0f64..1.0, r2 in 0.0f64..1.0, c in 0.001f64..0.1) {
            prop_assert_eq!(cauchy_weight(0.0, c), 1.0);
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(cauchy_weight(hi, c) <= cauchy_weight(lo, c));
            prop_assert_eq!(cauchy_weight(-r1, c), cauchy_weight(r1, c));
        }
    }
}

//! Synthetic terrain, depth sensor and legged-walk datasets.
//!
//! Terrain is a floor slab plus axis-aligned boxes and ramps. Every primitive is a convex
//! polytope, so ray casting is an exact half-space clip and the first hit over all
//! primitives is the first hit on their union.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Frame, TimedIncrement, TimedPose};
use crate::ekf::{Extrinsics, OdometryIncrement};
use crate::pipeline::PipelineConfig;
use crate::so3::{exp_so3, Pose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Parse(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    /// Footprint corner with the smallest x and y, meters.
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Wedge whose top rises linearly from `start_height` at the `min` edge to `end_height`
/// at the `max` edge along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub axis: Axis,
    pub start_height: f64,
    pub end_height: f64,
}

impl RampSpec {
    pub fn slope(&self) -> f64 {
        let (lo, hi) = match self.axis {
            Axis::X => (self.min[0], self.max[0]),
            Axis::Y => (self.min[1], self.max[1]),
        };
        (self.end_height - self.start_height) / (hi - lo)
    }

    fn height_at(&self, xy: Vector2<f64>) -> f64 {
        let u = match self.axis {
            Axis::X => xy.x - self.min[0],
            Axis::Y => xy.y - self.min[1],
        };
        self.start_height + self.slope() * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    /// Floor extent, meters. Rays leaving it hit nothing.
    pub extent_min: [f64; 2],
    pub extent_max: [f64; 2],
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub ramps: Vec<RampSpec>,
}

/// Half-space `n·x <= d` with unit outward normal `n`.
#[derive(Debug, Clone, Copy)]
struct HalfSpace {
    n: Vector3<f64>,
    d: f64,
}

impl HalfSpace {
    fn new(n: Vector3<f64>, d: f64) -> Self {
        let norm = n.norm();
        Self { n: n / norm, d: d / norm }
    }
}

/// Convex polytope as an intersection of half-spaces.
#[derive(Debug, Clone)]
struct Solid {
    planes: Vec<HalfSpace>,
}

impl Solid {
    fn prism(min: [f64; 2], max: [f64; 2], bottom: f64) -> Vec<HalfSpace> {
        vec![
            HalfSpace::new(Vector3::new(-1.0, 0.0, 0.0), -min[0]),
            HalfSpace::new(Vector3::new(1.0, 0.0, 0.0), max[0]),
            HalfSpace::new(Vector3::new(0.0, -1.0, 0.0), -min[1]),
            HalfSpace::new(Vector3::new(0.0, 1.0, 0.0), max[1]),
            HalfSpace::new(Vector3::new(0.0, 0.0, -1.0), -bottom),
        ]
    }

    /// First entry of the ray `o + t d`, `t > 0`.
    fn entry(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let mut t_in = f64::NEG_INFINITY;
        let mut t_out = f64::INFINITY;
        for h in &self.planes {
            let denom = h.n.dot(d);
            let num = h.d - h.n.dot(o);
            if denom.abs() < 1e-300 {
                if num < 0.0 {
                    return None;
                }
                continue;
            }
            let t = num / denom;
            if denom < 0.0 {
                t_in = t_in.max(t);
            } else {
                t_out = t_out.min(t);
            }
        }
        (t_in > 0.0 && t_in <= t_out).then_some(t_in)
    }

    /// `max_i (n_i·p - d_i)`: zero on the boundary, negative inside.
    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.planes
            .iter()
            .map(|h| h.n.dot(p) - h.d)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Ray caster over a validated [`TerrainSpec`].
#[derive(Debug, Clone)]
pub struct Terrain {
    spec: TerrainSpec,
    solids: Vec<Solid>,
}

/// Thickness of the floor slab below z = 0.
const FLOOR_DEPTH: f64 = 1.0;

impl TerrainSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let footprint_ok = |min: [f64; 2], max: [f64; 2]| finite(&min) && finite(&max) && min[0] < max[0] && min[1] < max[1];
        if !footprint_ok(self.extent_min, self.extent_max) {
            return Err(invalid("terrain extent must be finite and non-empty"));
        }
        for b in &self.boxes {
            if !footprint_ok(b.min, b.max) || !(b.height >= 0.0 && b.height.is_finite()) {
                return Err(invalid(format!("bad box {b:?}")));
            }
        }
        for r in &self.ramps {
            let heights = [r.start_height, r.end_height];
            if !footprint_ok(r.min, r.max) || !heights.iter().all(|h| *h >= 0.0 && h.is_finite()) {
                return Err(invalid(format!("bad ramp {r:?}")));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Terrain, SimError> {
        self.validate()?;
        let mut solids = Vec::new();
        let mut floor = Solid::prism(self.extent_min, self.extent_max, -FLOOR_DEPTH);
        floor.push(HalfSpace::new(Vector3::z(), 0.0));
        solids.push(Solid { planes: floor });
        for b in &self.boxes {
            let mut planes = Solid::prism(b.min, b.max, 0.0);
            planes.push(HalfSpace::new(Vector3::z(), b.height));
            solids.push(Solid { planes });
        }
        for r in &self.ramps {
            // z <= h0 + s (u - u0)  <=>  -s u + z <= h0 - s u0
            let s = r.slope();
            let (n, u0) = match r.axis {
                Axis::X => (Vector3::new(-s, 0.0, 1.0), r.min[0]),
                Axis::Y => (Vector3::new(0.0, -s, 1.0), r.min[1]),
            };
            let mut planes = Solid::prism(r.min, r.max, 0.0);
            planes.push(HalfSpace::new(n, r.start_height - s * u0));
            solids.push(Solid { planes });
        }
        Ok(Terrain {
            spec: self.clone(),
            solids,
        })
    }
}

fn inside(min: [f64; 2], max: [f64; 2], xy: Vector2<f64>) -> bool {
    xy.x >= min[0] && xy.x <= max[0] && xy.y >= min[1] && xy.y <= max[1]
}

impl Terrain {
    pub fn spec(&self) -> &TerrainSpec {
        &self.spec
    }

    /// Surface height at `xy`, or `None` outside the floor extent.
    pub fn height(&self, xy: Vector2<f64>) -> Option<f64> {
        let s = &self.spec;
        if !inside(s.extent_min, s.extent_max, xy) {
            return None;
        }
        let mut h = 0.0f64;
        for b in s.boxes.iter().filter(|b| inside(b.min, b.max, xy)) {
            h = h.max(b.height);
        }
        for r in s.ramps.iter().filter(|r| inside(r.min, r.max, xy)) {
            h = h.max(r.height_at(xy));
        }
        Some(h)
    }

    /// Distance along the unit ray `o + t d` to the first surface hit.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        self.solids
            .iter()
            .filter_map(|s| s.entry(o, d))
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Distance from `p` to the terrain surface measured through the primitives' face
    /// planes; zero for any point on the surface.
    pub fn surface_residual(&self, p: &Vector3<f64>) -> f64 {
        let nearest = self
            .solids
            .iter()
            .map(|s| s.signed_distance(p))
            .fold(f64::INFINITY, |acc, v| if v.abs() < acc.abs() { v } else { acc });
        nearest.abs()
    }
}

/// Pinhole depth camera in the optical convention: z forward, x right, y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub fov_h: f64,
    /// Vertical field of view, radians.
    pub fov_v: f64,
    /// Range noise standard deviation at zero range, meters.
    pub depth_noise_std: f64,
    /// Additional standard deviation per squared meter of range.
    pub depth_noise_quadratic: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 40,
            fov_h: 87f64.to_radians(),
            fov_v: 58f64.to_radians(),
            depth_noise_std: 0.005,
            depth_noise_quadratic: 0.0,
            min_range: 0.1,
            max_range: 3.0,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.width > 0
            && self.height > 0
            && self.fov_h > 0.0
            && self.fov_h < PI
            && self.fov_v > 0.0
            && self.fov_v < PI
            && self.depth_noise_std >= 0.0
            && self.depth_noise_quadratic >= 0.0
            && self.min_range >= 0.0
            && self.max_range > self.min_range
            && self.max_range.is_finite();
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("bad sensor {self:?}")))
        }
    }

    pub fn noise_std(&self, range: f64) -> f64 {
        self.depth_noise_std + self.depth_noise_quadratic * range * range
    }

    /// Unit ray of pixel `(u, v)` through its center, optical frame.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vector3<f64> {
        let tx = (self.fov_h * 0.5).tan();
        let ty = (self.fov_v * 0.5).tan();
        let x = ((u as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tx;
        let y = ((v as f64 + 0.5) / self.height as f64 * 2.0 - 1.0) * ty;
        Vector3::new(x, y, 1.0).normalize()
    }

    /// Whether a sensor-frame point lies inside the frustum (with a relative slack).
    pub fn in_frustum(&self, p: &Vector3<f64>, slack: f64) -> bool {
        p.z > 0.0
            && p.x.abs() <= p.z * (self.fov_h * 0.5).tan() * (1.0 + slack)
            && p.y.abs() <= p.z * (self.fov_v * 0.5).tan() * (1.0 + slack)
    }
}

/// Renders one depth frame; points are in the camera frame.
///
/// Range noise is added along each ray, so every point stays on its pixel ray. Pixels
/// whose true range falls outside `[min_range, max_range]` return nothing.
pub fn render_depth(terrain: &Terrain, camera: &Pose, sensor: &SensorSpec, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_with(terrain, camera, sensor, &mut rng)
}

fn render_with(terrain: &Terrain, camera: &Pose, sensor: &SensorSpec, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(sensor.width * sensor.height);
    for v in 0..sensor.height {
        for u in 0..sensor.width {
            let ray = sensor.pixel_ray(u, v);
            // One draw per pixel keeps the noise of a pixel independent of the others' hits.
            let n: f64 = StandardNormal.sample(rng);
            let Some(range) = terrain.cast(&camera.translation, &(camera.rotation * ray)) else {
                continue;
            };
            if range < sensor.min_range || range > sensor.max_range {
                continue;
            }
            let noisy = range + sensor.noise_std(range) * n;
            if noisy > 0.0 {
                out.push(ray * noisy);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaitSpec {
    /// Step frequency, Hz.
    pub frequency: f64,
    /// Amplitude of the vertical body oscillation, meters.
    pub height_amplitude: f64,
    /// Amplitude of the pitch oscillation, radians.
    pub pitch_amplitude: f64,
}

impl Default for GaitSpec {
    fn default() -> Self {
        Self {
            frequency: 1.0,
            height_amplitude: 0.01,
            pitch_amplitude: 2f64.to_radians(),
        }
    }
}

/// Odometry bias, accumulated per meter of horizontal travel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSpec {
    /// World-frame translation error per meter, meters.
    pub translation_per_m: [f64; 3],
    /// Body-frame rotation-vector error per meter, radians.
    pub rotation_per_m: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryNoise {
    /// Rotation noise density, rad/√s.
    pub rotation: f64,
    /// Translation noise density, m/√s.
    pub translation: f64,
}

impl OdometryNoise {
    pub fn covariance(&self, dt: f64) -> Matrix6<f64> {
        let r = self.rotation * self.rotation * dt;
        let t = self.translation * self.translation * dt;
        Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    /// Path corners, meters. The walker turns in place at each corner.
    pub waypoints: Vec<[f64; 2]>,
    /// Walking speed, m/s.
    pub speed: f64,
    /// In-place turning rate, rad/s.
    pub turn_rate: f64,
    /// Body height above the supporting terrain, meters.
    pub body_height: f64,
    pub gait: GaitSpec,
    pub drift: DriftSpec,
    pub odometry_noise: OdometryNoise,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            waypoints: vec![[-1.0, 0.0], [1.0, 0.0]],
            speed: 0.25,
            turn_rate: 0.8,
            body_height: 0.95,
            gait: GaitSpec::default(),
            drift: DriftSpec::default(),
            odometry_noise: OdometryNoise::default(),
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(invalid("trajectory needs at least two waypoints"));
        }
        if self.waypoints.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("consecutive waypoints must differ"));
        }
        let positive = [self.speed, self.turn_rate, self.body_height];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("speed, turn rate and body height must be positive"));
        }
        let g = &self.gait;
        if !(g.frequency >= 0.0 && g.height_amplitude >= 0.0 && g.pitch_amplitude >= 0.0) {
            return Err(invalid("gait parameters must be non-negative"));
        }
        let n = &self.odometry_noise;
        if !(n.rotation >= 0.0 && n.translation >= 0.0) {
            return Err(invalid("odometry noise must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub odometry_hz: f64,
    pub frame_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            odometry_hz: 100.0,
            frame_hz: 10.0,
        }
    }
}

/// Camera mounting on the body: pitched down and offset toward the knee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MountSpec {
    /// Downward pitch of the optical axis below the body's forward axis, radians.
    pub pitch: f64,
    /// Camera position in the body frame (x forward, y left, z up), meters.
    pub translation: [f64; 3],
}

impl Default for MountSpec {
    fn default() -> Self {
        Self {
            pitch: 45f64.to_radians(),
            translation: [0.1, -0.1, -0.45],
        }
    }
}

impl MountSpec {
    pub fn extrinsics(&self) -> Extrinsics {
        let (s, c) = self.pitch.sin_cos();
        let forward = Vector3::new(c, 0.0, -s);
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = forward.cross(&right);
        Extrinsics {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: Vector3::from(self.translation),
        }
    }
}

/// Everything needed to generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub terrain: TerrainSpec,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub mount: MountSpec,
    #[serde(default)]
    pub rates: Rates,
    /// Pipeline settings copied into the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineConfig>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Self = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.terrain.validate()?;
        self.sensor.validate()?;
        self.trajectory.validate()?;
        let r = &self.rates;
        if !(r.odometry_hz > 0.0 && r.frame_hz > 0.0 && r.frame_hz <= r.odometry_hz) {
            return Err(invalid("rates must be positive with frame_hz <= odometry_hz"));
        }
        if let Some(p) = &self.pipeline {
            p.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Four-meter arena with a 1.2 × 0.8 × 0.11 m box, crossed back and forth, with
    /// +1 cm/m vertical odometry drift and 5 mm depth noise.
    pub fn experiment_one(seed: u64) -> Self {
        Self {
            seed,
            terrain: TerrainSpec {
                extent_min: [-2.0, -2.0],
                extent_max: [2.0, 2.0],
                boxes: vec![BoxSpec {
                    min: [-0.6, -0.4],
                    max: [0.6, 0.4],
                    height: 0.11,
                }],
                ramps: vec![],
            },
            sensor: SensorSpec::default(),
            trajectory: TrajectorySpec {
                waypoints: vec![[-1.5, -0.15], [1.5, -0.15], [1.5, 0.15], [-1.5, 0.15], [-1.5, -0.15], [1.5, -0.15]],
                drift: DriftSpec {
                    translation_per_m: [0.0, 0.0, 0.01],
                    rotation_per_m: [0.0, 0.0, 0.0],
                },
                odometry_noise: OdometryNoise {
                    rotation: 1e-4,
                    translation: 5e-4,
                },
                ..TrajectorySpec::default()
            },
            mount: MountSpec::default(),
            rates: Rates::default(),
            pipeline: None,
        }
    }

    /// Featureless floor walked in a straight line.
    pub fn flat_floor(seed: u64) -> Self {
        Self {
            seed,
            terrain: TerrainSpec {
                extent_min: [-3.0, -3.0],
                extent_max: [3.0, 3.0],
                boxes: vec![],
                ramps: vec![],
            },
            trajectory: TrajectorySpec {
                waypoints: vec![[-1.5, 0.0], [1.5, 0.0]],
                odometry_noise: OdometryNoise {
                    rotation: 1e-4,
                    translation: 5e-4,
                },
                ..TrajectorySpec::default()
            },
            ..Self::experiment_one(seed)
        }
    }

    /// Floor with two perpendicular 15° ramps; every pose component is observable.
    pub fn two_ramps(seed: u64) -> Self {
        Self {
            seed,
            terrain: two_ramp_terrain(),
            trajectory: TrajectorySpec {
                waypoints: vec![[-1.2, -0.3], [1.2, -0.3]],
                odometry_noise: OdometryNoise {
                    rotation: 1e-4,
                    translation: 5e-4,
                },
                ..TrajectorySpec::default()
            },
            ..Self::experiment_one(seed)
        }
    }
}

/// Floor with a ramp rising along +x and another rising along +y, both at 15°.
pub fn two_ramp_terrain() -> TerrainSpec {
    let s = 15f64.to_radians().tan();
    TerrainSpec {
        extent_min: [-2.0, -2.0],
        extent_max: [2.0, 2.0],
        boxes: vec![],
        ramps: vec![
            RampSpec {
                min: [0.0, -0.5],
                max: [0.5, 0.0],
                axis: Axis::X,
                start_height: 0.0,
                end_height: 0.5 * s,
            },
            RampSpec {
                min: [-0.5, 0.0],
                max: [0.0, 0.5],
                axis: Axis::Y,
                start_height: 0.0,
                end_height: 0.5 * s,
            },
        ],
    }
}

/// Planar path sample: position, heading, arc length walked so far.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PathSample {
    xy: Vector2<f64>,
    yaw: f64,
    arc: f64,
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Turn { xy: Vector2<f64>, from: f64, to: f64 },
    Walk { from: Vector2<f64>, to: Vector2<f64>, yaw: f64 },
}

/// Piecewise walk: turn in place toward the next waypoint, then walk straight to it.
#[derive(Debug, Clone)]
struct WalkPath {
    phases: Vec<(f64, f64, f64, Phase)>, // (start time, duration, arc at start, phase)
    duration: f64,
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl WalkPath {
    fn new(spec: &TrajectorySpec) -> Self {
        let pts: Vec<Vector2<f64>> = spec.waypoints.iter().map(|w| Vector2::new(w[0], w[1])).collect();
        let mut phases = Vec::new();
        let mut t = 0.0;
        let mut arc = 0.0;
        let first = pts[1] - pts[0];
        let mut yaw = first.y.atan2(first.x);
        for w in pts.windows(2) {
            let seg = w[1] - w[0];
            let heading = seg.y.atan2(seg.x);
            let turn = wrap_angle(heading - yaw);
            if turn.abs() > 1e-12 {
                let dur = turn.abs() / spec.turn_rate;
                phases.push((
                    t,
                    dur,
                    arc,
                    Phase::Turn {
                        xy: w[0],
                        from: yaw,
                        to: yaw + turn,
                    },
                ));
                t += dur;
            }
            yaw = heading;
            let len = seg.norm();
            let dur = len / spec.speed;
            phases.push((
                t,
                dur,
                arc,
                Phase::Walk {
                    from: w[0],
                    to: w[1],
                    yaw: heading,
                },
            ));
            t += dur;
            arc += len;
        }
        Self { phases, duration: t }
    }

    fn sample(&self, t: f64) -> PathSample {
        let idx = self
            .phases
            .iter()
            .rposition(|(start, ..)| *start <= t)
            .unwrap_or(0);
        let (start, dur, arc, phase) = self.phases[idx];
        let s = ((t - start) / dur).clamp(0.0, 1.0);
        match phase {
            Phase::Turn { xy, from, to } => PathSample {
                xy,
                yaw: from + (to - from) * s,
                arc,
            },
            Phase::Walk { from, to, yaw } => PathSample {
                xy: from + (to - from) * s,
                yaw,
                arc: arc + (to - from).norm() * s,
            },
        }
    }
}

fn rot_z(a: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a).into_inner()
}

fn rot_y(a: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a).into_inner()
}

/// True body pose at time `t`.
fn body_pose(path: &WalkPath, terrain: &Terrain, spec: &TrajectorySpec, t: f64) -> Pose {
    let s = path.sample(t);
    // Support height: terrain averaged over ±15 cm along the heading.
    let dir = Vector2::new(s.yaw.cos(), s.yaw.sin());
    let support = (-3..=3)
        .map(|k| terrain.height(s.xy + dir * (0.05 * k as f64)).unwrap_or(0.0))
        .sum::<f64>()
        / 7.0;
    let phase = 2.0 * PI * spec.gait.frequency * t;
    let z = support + spec.body_height + spec.gait.height_amplitude * phase.sin();
    let pitch = spec.gait.pitch_amplitude * phase.cos();
    Pose::new(rot_z(s.yaw) * rot_y(pitch), Vector3::new(s.xy.x, s.xy.y, z))
}

/// Generates odometry, frames and ground truth for a scenario.
pub fn generate_dataset(scenario: &Scenario) -> Result<Dataset, SimError> {
    scenario.validate()?;
    let terrain = scenario.terrain.build()?;
    let spec = &scenario.trajectory;
    let path = WalkPath::new(spec);
    let extrinsics = scenario.mount.extrinsics();
    let dt = 1.0 / scenario.rates.odometry_hz;
    let frame_every = (scenario.rates.odometry_hz / scenario.rates.frame_hz).round().max(1.0) as usize;
    let ticks = (path.duration / dt).ceil() as usize;

    let truth: Vec<TimedPose> = (0..=ticks)
        .map(|k| {
            let t = k as f64 * dt;
            TimedPose {
                timestamp: t,
                pose: body_pose(&path, &terrain, spec, t),
            }
        })
        .collect();

    let mut odo_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise_cov = spec.odometry_noise.covariance(dt);
    let sd_r = (noise_cov[(0, 0)]).sqrt();
    let sd_t = (noise_cov[(3, 3)]).sqrt();
    let drift_t = Vector3::from(spec.drift.translation_per_m);
    let drift_r = Vector3::from(spec.drift.rotation_per_m);
    let mut odometry = Vec::with_capacity(ticks);
    for k in 1..=ticks {
        let a = &truth[k - 1].pose;
        let b = &truth[k].pose;
        let d_rot = a.rotation.transpose() * b.rotation;
        let d_pos_world = b.translation - a.translation;
        let travelled = d_pos_world.xy().norm();
        let mut d_pos = a.rotation.transpose() * (d_pos_world + drift_t * travelled);
        let mut d_rot = d_rot * exp_so3(&(drift_r * travelled));
        let n: [f64; 6] = std::array::from_fn(|_| StandardNormal.sample(&mut odo_rng));
        if sd_r > 0.0 {
            d_rot *= exp_so3(&(Vector3::new(n[0], n[1], n[2]) * sd_r));
        }
        if sd_t > 0.0 {
            d_pos += Vector3::new(n[3], n[4], n[5]) * sd_t;
        }
        odometry.push(TimedIncrement {
            timestamp: truth[k].timestamp,
            increment: OdometryIncrement {
                dt,
                delta_rotation: d_rot,
                delta_translation: d_pos,
                noise: noise_cov,
            },
        });
    }

    let mut frames = Vec::new();
    for (i, k) in (0..=ticks).step_by(frame_every).enumerate() {
        let camera = truth[k].pose.compose(&extrinsics.as_pose());
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(i as u64 + 1);
        let points = render_with(&terrain, &camera, &scenario.sensor, &mut rng)
            .into_iter()
            .map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect();
        frames.push(Frame {
            timestamp: truth[k].timestamp,
            points,
        });
    }

    Ok(Dataset {
        odometry,
        frames,
        extrinsics,
        initial_pose: truth[0],
        ground_truth: Some(truth),
        config: scenario.pipeline.clone(),
    })
}

/// Generates a dataset and writes it to `dir`.
pub fn write_scenario_dataset(scenario: &Scenario, dir: &Path) -> Result<Dataset, SimError> {
    let ds = generate_dataset(scenario)?;
    ds.write(dir)?;
    Ok(ds)
}

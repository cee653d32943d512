//! Frame-by-frame odometry and mapping: predict, register, correct, integrate.

use std::io::{self, Write};

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, TimedIncrement, TimedPose};
use crate::ekf::{
    camera_pose_from_state, icp_measurement_covariance, predict, update_with_icp, EkfConfig, EkfState,
    Extrinsics, IcpMeasurement,
};
use crate::elevation_map::{ElevationGrid, GridGeometry, IntegrationStats, MapError, MapPoint, MapUpdateConfig};
use crate::icp::{bin_highest, register, DownsampledPoint, IcpConfig, IcpResult, RegistrationFailure};
use crate::so3::Pose;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Odometry only; clouds are integrated at the dead-reckoned pose.
    ProprioceptiveOnly,
    /// Registration corrects the filter before each integration.
    #[default]
    IcpFused,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ProprioceptiveOnly => "proprioceptive-only",
            Mode::IcpFused => "icp-fused",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proprioceptive-only" => Ok(Mode::ProprioceptiveOnly),
            "icp-fused" => Ok(Mode::IcpFused),
            _ => Err(format!("unknown mode {s:?} (expected proprioceptive-only or icp-fused)")),
        }
    }
}

/// Process noise densities used for increments that carry an all-zero covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessNoise {
    /// Rotation noise, rad/√s.
    pub rotation: f64,
    /// Translation noise, m/√s.
    pub translation: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            rotation: 1e-3,
            translation: 2e-3,
        }
    }
}

impl ProcessNoise {
    pub fn covariance(&self, dt: f64) -> Matrix6<f64> {
        let r = self.rotation * self.rotation * dt;
        let t = self.translation * self.translation * dt;
        Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub icp: IcpConfig,
    pub map: MapUpdateConfig,
    pub grid: GridGeometry,
    pub ekf: EkfConfig,
    pub process_noise: ProcessNoise,
    /// Registration starts once the grid holds this many times `min_correspondences`
    /// occupied cells.
    pub bootstrap_factor: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            icp: IcpConfig::default(),
            map: MapUpdateConfig::default(),
            grid: GridGeometry::default(),
            ekf: EkfConfig::default(),
            process_noise: ProcessNoise::default(),
            bootstrap_factor: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| PipelineError::Config(m);
        self.icp.validate().map_err(|e| err(e.to_string()))?;
        self.map.validate().map_err(|e| err(e.to_string()))?;
        self.ekf.gate_threshold().map_err(|e| err(e.to_string()))?;
        if !(self.grid.resolution > 0.0 && self.grid.resolution.is_finite()) || self.grid.side_cells < 3 {
            return Err(err(format!(
                "grid resolution {} and side {} must be positive (side ≥ 3)",
                self.grid.resolution, self.grid.side_cells
            )));
        }
        let noise = [self.process_noise.rotation, self.process_noise.translation];
        if noise.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(err("process noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn bootstrap_cells(&self) -> usize {
        self.bootstrap_factor * self.icp.min_correspondences
    }
}

/// Outcome of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    /// The grid was too sparse to register against; integrated at the prior pose.
    Bootstrap,
    /// Registration disabled by the mode.
    ProprioceptiveOnly,
    /// Registration succeeded and corrected the filter.
    Fused,
    /// Registration failed; integrated at the prior pose.
    RegistrationFailed(RegistrationFailure),
    /// The innovation gate rejected the registration; integrated at the prior pose.
    GateRejected,
    /// No point of the frame fell inside the grid.
    EmptyCloud,
}

impl FrameStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameStatus::Bootstrap => "bootstrap",
            FrameStatus::ProprioceptiveOnly => "proprioceptive_only",
            FrameStatus::Fused => "fused",
            FrameStatus::RegistrationFailed(_) => "registration_failed",
            FrameStatus::GateRejected => "gate_rejected",
            FrameStatus::EmptyCloud => "empty_cloud",
        }
    }
}

/// Registration diagnostics kept per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpSummary {
    pub iterations: usize,
    pub converged: bool,
    pub n_corr: usize,
    pub mean_residual: f64,
    pub correction: Pose,
    pub covariance: Matrix6<f64>,
}

impl From<&IcpResult> for IcpSummary {
    fn from(r: &IcpResult) -> Self {
        Self {
            iterations: r.iterations,
            converged: r.converged,
            n_corr: r.n_corr,
            mean_residual: r.mean_residual,
            correction: r.correction,
            covariance: r.covariance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub status: FrameStatus,
    pub prior_camera_pose: Pose,
    pub posterior_camera_pose: Pose,
    /// Pose the cloud was integrated at.
    pub integration_pose: Pose,
    pub icp: Option<IcpSummary>,
    /// Normalized innovation squared of the correction, when one was attempted.
    pub nis: Option<f64>,
    pub state: EkfState,
    pub downsampled: usize,
    pub integration: IntegrationStats,
}

/// Processes one frame against `grid`, which is updated in place.
///
/// `state` must already be propagated to the frame time.
pub fn process_frame(
    state: &EkfState,
    grid: &mut ElevationGrid,
    timestamp: f64,
    cloud: &[Vector3<f64>],
    extrinsics: &Extrinsics,
    cfg: &PipelineConfig,
    gate_threshold: f64,
) -> (EkfState, TrajectoryRecord) {
    let prior = camera_pose_from_state(state, extrinsics);
    let mut next = *state;
    let mut icp = None;
    let mut nis = None;

    let (status, integration_pose, downsampled) = if cfg.mode == Mode::ProprioceptiveOnly {
        (FrameStatus::ProprioceptiveOnly, prior, bin_highest(cloud, &prior, grid))
    } else if grid.occupied_count() < cfg.bootstrap_cells() {
        (FrameStatus::Bootstrap, prior, bin_highest(cloud, &prior, grid))
    } else {
        let reg = register(cloud, &prior, grid, &cfg.icp);
        icp = Some(IcpSummary::from(&reg.result));
        match reg.result.failure {
            Some(RegistrationFailure::EmptyCloud) => (FrameStatus::EmptyCloud, prior, reg.downsampled),
            Some(f) => (FrameStatus::RegistrationFailed(f), prior, reg.downsampled),
            None => {
                let measured = reg.result.corrected_pose(&prior);
                let meas = IcpMeasurement {
                    camera_pose: measured,
                    covariance: icp_measurement_covariance(&reg.result.covariance, &measured),
                };
                match update_with_icp(state, extrinsics, &meas, gate_threshold) {
                    Ok(out) if out.accepted => {
                        nis = Some(out.nis);
                        next = out.state;
                        let posterior = camera_pose_from_state(&next, extrinsics);
                        let sensor: Vec<Vector3<f64>> = reg.downsampled.iter().map(|p| p.sensor).collect();
                        (FrameStatus::Fused, posterior, bin_highest(&sensor, &posterior, grid))
                    }
                    Ok(out) => {
                        nis = Some(out.nis);
                        (FrameStatus::GateRejected, prior, reg.downsampled)
                    }
                    Err(_) => (
                        FrameStatus::RegistrationFailed(RegistrationFailure::Singular),
                        prior,
                        reg.downsampled,
                    ),
                }
            }
        }
    };

    let status = if downsampled.is_empty() {
        FrameStatus::EmptyCloud
    } else {
        status
    };
    let integration = integrate(grid, &downsampled, &cfg.map);
    grid.recenter(next.position.xy());

    let record = TrajectoryRecord {
        timestamp,
        status,
        prior_camera_pose: prior,
        posterior_camera_pose: camera_pose_from_state(&next, extrinsics),
        integration_pose,
        icp,
        nis,
        state: next,
        downsampled: downsampled.len(),
        integration,
    };
    (next, record)
}

/// Fuses binned points into the grid with the range-dependent variance `k d²`.
pub fn integrate(grid: &mut ElevationGrid, points: &[DownsampledPoint], cfg: &MapUpdateConfig) -> IntegrationStats {
    let map_points: Vec<MapPoint> = points
        .iter()
        .map(|p| MapPoint {
            position: p.world,
            var: cfg.measurement_variance(p.distance),
        })
        .collect();
    grid.integrate_cloud(&map_points, cfg)
}

/// Stateful driver around [`process_frame`] and [`predict`].
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    extrinsics: Extrinsics,
    gate_threshold: f64,
    state: EkfState,
    grid: ElevationGrid,
    timestamp: f64,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, extrinsics: Extrinsics, initial: TimedPose) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if !initial.pose.is_finite() {
            return Err(PipelineError::Config("initial pose is not finite".into()));
        }
        let gate_threshold = cfg.ekf.gate_threshold().map_err(|e| PipelineError::Config(e.to_string()))?;
        let grid = ElevationGrid::centered(cfg.grid, initial.pose.translation.xy())?;
        let state = EkfState::new(initial.pose, cfg.ekf.initial_covariance());
        Ok(Self {
            cfg,
            extrinsics,
            gate_threshold,
            state,
            grid,
            timestamp: initial.timestamp,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EkfState {
        &self.state
    }

    pub fn grid(&self) -> &ElevationGrid {
        &self.grid
    }

    pub fn into_grid(self) -> ElevationGrid {
        self.grid
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn timed_pose(&self) -> TimedPose {
        TimedPose {
            timestamp: self.timestamp,
            pose: self.state.pose(),
        }
    }

    pub fn predict(&mut self, inc: &TimedIncrement) {
        let mut step = inc.increment;
        if step.noise == Matrix6::zeros() {
            step.noise = self.cfg.process_noise.covariance(step.dt);
        }
        self.state = predict(&self.state, &step);
        self.timestamp = inc.timestamp;
    }

    pub fn process_frame(&mut self, timestamp: f64, cloud: &[Vector3<f64>]) -> TrajectoryRecord {
        let (state, record) = process_frame(
            &self.state,
            &mut self.grid,
            timestamp,
            cloud,
            &self.extrinsics,
            &self.cfg,
            self.gate_threshold,
        );
        self.state = state;
        record
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<TrajectoryRecord>,
    /// Body pose at the initial time and after every odometry increment.
    pub trajectory: Vec<TimedPose>,
    pub grid: ElevationGrid,
}

/// Runs the whole dataset. Odometry increments with a timestamp up to and including a
/// frame's timestamp are applied before that frame.
pub fn run(dataset: &Dataset, cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    dataset.validate()?;
    let mut pipeline = Pipeline::new(cfg.clone(), dataset.extrinsics, dataset.initial_pose)?;
    let mut trajectory = Vec::with_capacity(dataset.odometry.len() + 1);
    trajectory.push(pipeline.timed_pose());
    let mut records = Vec::with_capacity(dataset.frames.len());
    let mut odometry = dataset.odometry.iter().peekable();
    for frame in &dataset.frames {
        while let Some(inc) = odometry.next_if(|o| o.timestamp <= frame.timestamp) {
            pipeline.predict(inc);
            trajectory.push(pipeline.timed_pose());
        }
        records.push(pipeline.process_frame(frame.timestamp, &frame.points_f64()));
    }
    for inc in odometry {
        pipeline.predict(inc);
        trajectory.push(pipeline.timed_pose());
    }
    Ok(RunOutput {
        records,
        trajectory,
        grid: pipeline.into_grid(),
    })
}

/// Per-frame diagnostics as CSV.
pub fn write_records_csv<W: Write>(w: W, records: &[TrajectoryRecord]) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "timestamp_s",
        "status",
        "failure",
        "n_corr",
        "iterations",
        "converged",
        "mean_residual",
        "nis",
        "downsampled",
        "inserted",
        "fused",
        "inflated",
        "prior_x",
        "prior_y",
        "prior_z",
        "posterior_x",
        "posterior_y",
        "posterior_z",
    ])?;
    for r in records {
        let failure = match r.status {
            FrameStatus::RegistrationFailed(f) => f.as_str(),
            _ => "",
        };
        let opt = |v: Option<String>| v.unwrap_or_default();
        let a = r.prior_camera_pose.translation;
        let b = r.posterior_camera_pose.translation;
        out.write_record([
            r.timestamp.to_string(),
            r.status.as_str().to_string(),
            failure.to_string(),
            opt(r.icp.map(|s| s.n_corr.to_string())),
            opt(r.icp.map(|s| s.iterations.to_string())),
            opt(r.icp.map(|s| s.converged.to_string())),
            opt(r.icp.map(|s| s.mean_residual.to_string())),
            opt(r.nis.map(|v| v.to_string())),
            r.downsampled.to_string(),
            r.integration.inserted.to_string(),
            r.integration.fused.to_string(),
            r.integration.inflated.to_string(),
            a.x.to_string(),
            a.y.to_string(),
            a.z.to_string(),
            b.x.to_string(),
            b.y.to_string(),
            b.z.to_string(),
        ])?;
    }
    out.flush()
}

//! On-disk dataset layout and trajectory files.
//!
//! ```text
//! <dir>/dataset.toml        extrinsics, initial pose, optional pipeline config
//! <dir>/odometry.csv        one increment per row
//! <dir>/frames/index.csv    timestamp_s,file,count
//! <dir>/frames/NNNNNN.bin   f64 timestamp, u32 count, count × 3 f32 (little-endian)
//! <dir>/ground_truth.tum    optional body poses
//! ```

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::{Extrinsics, OdometryIncrement};
use crate::pipeline::PipelineConfig;
use crate::so3::{check_rotation, exp_so3, log_so3, Pose};

pub const DATASET_FILE: &str = "dataset.toml";
pub const ODOMETRY_FILE: &str = "odometry.csv";
pub const FRAMES_DIR: &str = "frames";
pub const FRAME_INDEX_FILE: &str = "index.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tum";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{stream} timestamps are not strictly increasing at entry {index} ({previous} then {current})")]
    Unordered {
        stream: &'static str,
        index: usize,
        previous: f64,
        current: f64,
    },
}

impl DatasetError {
    fn io(path: &Path, source: io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        DatasetError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Odometry increment ending at `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedIncrement {
    pub timestamp: f64,
    pub increment: OdometryIncrement,
}

/// One depth frame in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub points: Vec<[f32; 3]>,
}

impl Frame {
    pub fn points_f64(&self) -> Vec<Vector3<f64>> {
        self.points
            .iter()
            .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub odometry: Vec<TimedIncrement>,
    pub frames: Vec<Frame>,
    pub extrinsics: Extrinsics,
    /// Body pose at `initial_pose.timestamp`, before the first increment.
    pub initial_pose: TimedPose,
    pub ground_truth: Option<Vec<TimedPose>>,
    /// Pipeline settings stored alongside the data, if any.
    pub config: Option<PipelineConfig>,
}

impl Dataset {
    /// Checks that every stream is strictly increasing in time.
    pub fn validate(&self) -> Result<(), DatasetError> {
        check_order("odometry", self.odometry.iter().map(|o| o.timestamp))?;
        check_order("frame", self.frames.iter().map(|f| f.timestamp))?;
        if let Some(gt) = &self.ground_truth {
            check_order("ground truth", gt.iter().map(|p| p.timestamp))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, DatasetError> {
        let meta_path = dir.join(DATASET_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| DatasetError::io(&meta_path, e))?;
        let meta: DatasetMeta = toml::from_str(&text).map_err(|e| DatasetError::format(&meta_path, e.to_string()))?;
        let extrinsics = Extrinsics {
            rotation: meta.extrinsics.to_pose(&meta_path)?.rotation,
            translation: Vector3::from(meta.extrinsics.translation),
        };
        let initial_pose = TimedPose {
            timestamp: meta.initial_pose.timestamp,
            pose: meta.initial_pose.pose.to_pose(&meta_path)?,
        };

        let odometry = read_odometry(&dir.join(ODOMETRY_FILE))?;
        let frames = read_frames(&dir.join(FRAMES_DIR))?;
        let gt_path = dir.join(GROUND_TRUTH_FILE);
        let ground_truth = if gt_path.exists() {
            Some(read_tum(&gt_path)?)
        } else {
            None
        };
        let dataset = Dataset {
            odometry,
            frames,
            extrinsics,
            initial_pose,
            ground_truth,
            config: meta.pipeline,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        let frames_dir = dir.join(FRAMES_DIR);
        fs::create_dir_all(&frames_dir).map_err(|e| DatasetError::io(&frames_dir, e))?;

        let meta = DatasetMeta {
            extrinsics: StoredPose::from_pose(&self.extrinsics.as_pose()),
            initial_pose: StoredTimedPose {
                timestamp: self.initial_pose.timestamp,
                pose: StoredPose::from_pose(&self.initial_pose.pose),
            },
            pipeline: self.config.clone(),
        };
        let meta_path = dir.join(DATASET_FILE);
        let text = toml::to_string(&meta).map_err(|e| DatasetError::format(&meta_path, e.to_string()))?;
        fs::write(&meta_path, text).map_err(|e| DatasetError::io(&meta_path, e))?;

        write_odometry(&dir.join(ODOMETRY_FILE), &self.odometry)?;
        write_frames(&frames_dir, &self.frames)?;
        if let Some(gt) = &self.ground_truth {
            write_tum(&dir.join(GROUND_TRUTH_FILE), gt)?;
        }
        Ok(())
    }
}

fn check_order(stream: &'static str, timestamps: impl Iterator<Item = f64>) -> Result<(), DatasetError> {
    let mut previous = f64::NEG_INFINITY;
    for (index, current) in timestamps.enumerate() {
        if !(current > previous) {
            return Err(DatasetError::Unordered {
                stream,
                index,
                previous,
                current,
            });
        }
        previous = current;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredPose {
    /// Rotation as a unit quaternion, `[x, y, z, w]`.
    rotation_xyzw: [f64; 4],
    translation: [f64; 3],
}

impl StoredPose {
    fn from_pose(pose: &Pose) -> Self {
        Self {
            rotation_xyzw: pose.quaternion_xyzw(),
            translation: pose.translation.into(),
        }
    }

    fn to_pose(&self, path: &Path) -> Result<Pose, DatasetError> {
        let q = self.rotation_xyzw;
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(DatasetError::format(path, format!("quaternion norm {norm} is not 1")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(DatasetError::format(path, "translation is not finite"));
        }
        Ok(Pose::from_quaternion_xyzw(Vector3::from(self.translation), q))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredTimedPose {
    timestamp: f64,
    #[serde(flatten)]
    pose: StoredPose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    extrinsics: StoredPose,
    initial_pose: StoredTimedPose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pipeline: Option<PipelineConfig>,
}

const ODOMETRY_FIXED_COLUMNS: [&str; 8] = [
    "timestamp_s",
    "dt",
    "rotvec_x",
    "rotvec_y",
    "rotvec_z",
    "dp_x",
    "dp_y",
    "dp_z",
];

fn odometry_header() -> Vec<String> {
    let mut cols: Vec<String> = ODOMETRY_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for r in 0..6 {
        for c in r..6 {
            cols.push(format!("q{r}{c}"));
        }
    }
    cols
}

pub fn read_odometry(path: &Path) -> Result<Vec<TimedIncrement>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let header = reader
        .headers()
        .map_err(|e| DatasetError::format(path, e.to_string()))?
        .clone();
    let expected = odometry_header();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(DatasetError::format(
            path,
            format!("expected header {}", expected.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| DatasetError::format(path, e.to_string()))?;
        let mut v = [0.0; 29];
        for (dst, field) in v.iter_mut().zip(record.iter()) {
            *dst = field
                .parse::<f64>()
                .map_err(|_| DatasetError::format(path, format!("line {line}: bad number {field:?}")))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DatasetError::format(path, format!("line {line}: non-finite value")));
        }
        if !(v[1] > 0.0) {
            return Err(DatasetError::format(path, format!("line {line}: dt must be positive")));
        }
        let mut q = Matrix6::zeros();
        let mut k = 8;
        for r in 0..6 {
            for c in r..6 {
                q[(r, c)] = v[k];
                q[(c, r)] = v[k];
                k += 1;
            }
        }
        out.push(TimedIncrement {
            timestamp: v[0],
            increment: OdometryIncrement {
                dt: v[1],
                delta_rotation: exp_so3(&Vector3::new(v[2], v[3], v[4])),
                delta_translation: Vector3::new(v[5], v[6], v[7]),
                noise: q,
            },
        });
    }
    Ok(out)
}

pub fn write_odometry(path: &Path, odometry: &[TimedIncrement]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| DatasetError::format(path, e.to_string());
    w.write_record(odometry_header()).map_err(csv_err)?;
    for o in odometry {
        let inc = &o.increment;
        let rv = log_so3(&inc.delta_rotation).map_err(|e| DatasetError::format(path, e.to_string()))?;
        let mut row: Vec<String> = vec![o.timestamp.to_string(), inc.dt.to_string()];
        row.extend(rv.iter().map(|v| v.to_string()));
        row.extend(inc.delta_translation.iter().map(|v| v.to_string()));
        for r in 0..6 {
            for c in r..6 {
                row.push(inc.noise[(r, c)].to_string());
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameIndexRow {
    timestamp_s: f64,
    file: String,
    count: u32,
}

pub fn read_frames(dir: &Path) -> Result<Vec<Frame>, DatasetError> {
    let index_path = dir.join(FRAME_INDEX_FILE);
    let file = File::open(&index_path).map_err(|e| DatasetError::io(&index_path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let mut frames = Vec::new();
    for row in reader.deserialize::<FrameIndexRow>() {
        let row = row.map_err(|e| DatasetError::format(&index_path, e.to_string()))?;
        let path = dir.join(&row.file);
        let bytes = fs::read(&path).map_err(|e| DatasetError::io(&path, e))?;
        let frame = decode_frame(&bytes).map_err(|m| DatasetError::format(&path, m))?;
        if frame.timestamp != row.timestamp_s || frame.points.len() != row.count as usize {
            return Err(DatasetError::format(&path, "header disagrees with the frame index"));
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<(), DatasetError> {
    let index_path = dir.join(FRAME_INDEX_FILE);
    let file = File::create(&index_path).map_err(|e| DatasetError::io(&index_path, e))?;
    let mut index = csv::Writer::from_writer(BufWriter::new(file));
    for (i, frame) in frames.iter().enumerate() {
        let name = format!("{i:06}.bin");
        let path = dir.join(&name);
        fs::write(&path, encode_frame(frame)).map_err(|e| DatasetError::io(&path, e))?;
        index
            .serialize(FrameIndexRow {
                timestamp_s: frame.timestamp,
                file: name,
                count: frame.points.len() as u32,
            })
            .map_err(|e| DatasetError::format(&index_path, e.to_string()))?;
    }
    index.flush().map_err(|e| DatasetError::io(&index_path, e))
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 12 * frame.points.len());
    out.extend_from_slice(&frame.timestamp.to_le_bytes());
    out.extend_from_slice(&(frame.points.len() as u32).to_le_bytes());
    for p in &frame.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(mut bytes: &[u8]) -> Result<Frame, String> {
    let mut b8 = [0u8; 8];
    let mut b4 = [0u8; 4];
    bytes.read_exact(&mut b8).map_err(|_| "truncated header")?;
    let timestamp = f64::from_le_bytes(b8);
    bytes.read_exact(&mut b4).map_err(|_| "truncated header")?;
    let count = u32::from_le_bytes(b4) as usize;
    if bytes.len() != count * 12 {
        return Err(format!("expected {} point bytes, found {}", count * 12, bytes.len()));
    }
    let points = bytes
        .chunks_exact(12)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..8].try_into().unwrap()),
                f32::from_le_bytes(c[8..12].try_into().unwrap()),
            ]
        })
        .collect();
    Ok(Frame { timestamp, points })
}

/// Reads `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
pub fn read_tum(path: &Path) -> Result<Vec<TimedPose>, DatasetError> {
    let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
    parse_tum(BufReader::new(file)).map_err(|e| match e {
        TumError::Io(e) => DatasetError::io(path, e),
        TumError::Line(line, m) => DatasetError::format(path, format!("line {line}: {m}")),
    })
}

enum TumError {
    Io(io::Error),
    Line(usize, String),
}

fn parse_tum<R: BufRead>(reader: R) -> Result<Vec<TimedPose>, TumError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(TumError::Io)?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<f64> = body
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| TumError::Line(i + 1, "bad number".into()))?;
        if fields.len() != 8 {
            return Err(TumError::Line(i + 1, format!("expected 8 fields, found {}", fields.len())));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(TumError::Line(i + 1, "non-finite value".into()));
        }
        let q = [fields[4], fields[5], fields[6], fields[7]];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(TumError::Line(i + 1, format!("quaternion norm {norm}")));
        }
        let pose = Pose::from_quaternion_xyzw(Vector3::new(fields[1], fields[2], fields[3]), q);
        if check_rotation(&pose.rotation).is_err() {
            return Err(TumError::Line(i + 1, "invalid rotation".into()));
        }
        out.push(TimedPose {
            timestamp: fields[0],
            pose,
        });
    }
    Ok(out)
}

pub fn write_tum(path: &Path, poses: &[TimedPose]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| DatasetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tum_to(&mut w, poses)
        .and_then(|_| w.flush())
        .map_err(|e| DatasetError::io(path, e))
}

/// Shortest round-trip formatting, so a write/read cycle is lossless.
pub fn write_tum_to<W: Write>(w: &mut W, poses: &[TimedPose]) -> io::Result<()> {
    writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
    for p in poses {
        let t = p.pose.translation;
        let q = p.pose.quaternion_xyzw();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp_so3;

    fn sample_dataset() -> Dataset {
        let q = Matrix6::from_fn(|r, c| if r == c { 1e-6 * (r + 1) as f64 } else { 1e-9 });
        let odometry = (1..=5)
            .map(|i| TimedIncrement {
                timestamp: i as f64 * 0.01,
                increment: OdometryIncrement {
                    dt: 0.01,
                    delta_rotation: exp_so3(&Vector3::new(0.001, -0.002, 0.01 * i as f64)),
                    delta_translation: Vector3::new(0.0025, 0.0001, -0.00003),
                    noise: q,
                },
            })
            .collect();
        let frames = vec![
            Frame {
                timestamp: 0.02,
                points: vec![[0.1, 0.2, 0.3], [-1.5, 2.25, 1e-3]],
            },
            Frame {
                timestamp: 0.04,
                points: vec![],
            },
        ];
        Dataset {
            odometry,
            frames,
            extrinsics: Extrinsics {
                rotation: exp_so3(&Vector3::new(0.0, 0.7, 0.1)),
                translation: Vector3::new(0.1, -0.1, -0.45),
            },
            initial_pose: TimedPose {
                timestamp: 0.0,
                pose: Pose::new(exp_so3(&Vector3::new(0.0, 0.0, 0.3)), Vector3::new(1.0, 2.0, 0.9)),
            },
            ground_truth: Some(vec![
                TimedPose {
                    timestamp: 0.0,
                    pose: Pose::identity(),
                },
                TimedPose {
                    timestamp: 0.01,
                    pose: Pose::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(0.3, 0.2, 0.1)),
                },
            ]),
            config: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.frames, ds.frames);
        assert_eq!(back.odometry.len(), ds.odometry.len());
        for (a, b) in back.odometry.iter().zip(&ds.odometry) {
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.increment.delta_translation, b.increment.delta_translation);
            assert_eq!(a.increment.noise, b.increment.noise);
            assert!((a.increment.delta_rotation - b.increment.delta_rotation).amax() < 1e-15);
        }
        assert!((back.extrinsics.rotation - ds.extrinsics.rotation).amax() < 1e-15);
        assert_eq!(back.extrinsics.translation, ds.extrinsics.translation);
        let gt = back.ground_truth.unwrap();
        assert!((gt[1].pose.rotation - ds.ground_truth.as_ref().unwrap()[1].pose.rotation).amax() < 1e-15);
    }

    #[test]
    fn unordered_odometry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        ds.write(dir.path()).unwrap();
        let path = dir.path().join(ODOMETRY_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(2, 3);
        fs::write(&path, lines.join("\n")).unwrap();
        match Dataset::read(dir.path()) {
            Err(DatasetError::Unordered { stream, index, .. }) => {
                assert_eq!(stream, "odometry");
                assert_eq!(index, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let bytes = encode_frame(&Frame {
            timestamp: 1.0,
            points: vec![[1.0, 2.0, 3.0]],
        });
        assert!(decode_frame(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_frame(&bytes[..5]).is_err());
    }

    #[test]
    fn tum_parsing() {
        let text = "# comment\n\n1.5 1 2 3 0 0 0 1\n2.5 0 0 0 0 0 0.7071067811865476 0.7071067811865476 # yaw\n";
        let poses = parse_tum(text.as_bytes()).ok().unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[0].pose.translation, Vector3::new(1.0, 2.0, 3.0));
        assert!((poses[1].pose.rotation[(1, 0)] - 1.0).abs() < 1e-12);
        assert!(parse_tum("1 2 3".as_bytes()).is_err());
        assert!(parse_tum("1 0 0 0 0 0 0 2".as_bytes()).is_err());
    }
}

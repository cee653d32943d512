//! Robot-centric probabilistic 2.5D elevation grid.
//!
//! Each cell stores one elevation estimate with its variance. Cells are addressed by
//! `CellIndex { ix, iy }`: `ix` counts cells along world x (the grid "row"), `iy` along
//! world y (the "column"). Storage is dense and row-major in `(ix, iy)`.
//!
//! The grid origin is kept as a fixed anchor plus an integer cell offset, so recentering
//! is a pure integer shift and retained cells never move relative to the world.

use std::io::{self, Read, Write};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("measurement variance must be positive and finite, got {0}")]
    InvalidMeasurement(f64),
    #[error("invalid map update parameters: {0}")]
    InvalidConfig(String),
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Cell {
    #[default]
    Empty,
    Occupied {
        /// Elevation, meters.
        h: f64,
        /// Elevation variance, meters².
        var: f64,
    },
}

impl Cell {
    #[inline]
    pub fn elevation(&self) -> Option<f64> {
        match *self {
            Cell::Occupied { h, .. } => Some(h),
            Cell::Empty => None,
        }
    }

    #[inline]
    pub fn is_occupied(&self) -> bool {
        matches!(self, Cell::Occupied { .. })
    }
}

/// Parameters of the per-cell update rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapUpdateConfig {
    /// Variance inflation rate applied to measurements outside the 2σ band.
    pub lambda: f64,
    /// `k` in `σ_z² = k d²`, with `d` the point-to-camera distance.
    pub sigma_z_coeff: f64,
}

impl Default for MapUpdateConfig {
    fn default() -> Self {
        Self {
            lambda: 0.025,
            sigma_z_coeff: 1e-4,
        }
    }
}

impl MapUpdateConfig {
    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MapError::InvalidConfig(format!("lambda = {}", self.lambda)));
        }
        if !(self.sigma_z_coeff > 0.0 && self.sigma_z_coeff.is_finite()) {
            return Err(MapError::InvalidConfig(format!(
                "sigma_z_coeff = {}",
                self.sigma_z_coeff
            )));
        }
        Ok(())
    }

    /// Measurement variance for a point at `distance` meters from the camera.
    #[inline]
    pub fn measurement_variance(&self, distance: f64) -> f64 {
        self.sigma_z_coeff * distance * distance
    }
}

/// Which branch of the update rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Inserted,
    Fused,
    Inflated,
}

/// Applies one elevation measurement `z` with variance `var_z` to `cell`.
///
/// * empty cell: the measurement is taken as is;
/// * `z` inside `[h - 2σ_h, h + 2σ_h]`: product-of-Gaussians fusion;
/// * otherwise: `h` is kept and the variance grows by `λ (z - h)²`.
pub fn update_cell(
    cell: Cell,
    z: f64,
    var_z: f64,
    cfg: &MapUpdateConfig,
) -> Result<(Cell, UpdateKind), MapError> {
    if !(var_z > 0.0 && var_z.is_finite()) || !z.is_finite() {
        return Err(MapError::InvalidMeasurement(var_z));
    }
    Ok(match cell {
        Cell::Empty => (Cell::Occupied { h: z, var: var_z }, UpdateKind::Inserted),
        Cell::Occupied { h, var } => {
            let band = 2.0 * var.sqrt();
            if z >= h - band && z <= h + band {
                let sum = var + var_z;
                (
                    Cell::Occupied {
                        h: (var * z + var_z * h) / sum,
                        var: var * var_z / sum,
                    },
                    UpdateKind::Fused,
                )
            } else {
                let d = z - h;
                (
                    Cell::Occupied {
                        h,
                        var: var + cfg.lambda * d * d,
                    },
                    UpdateKind::Inflated,
                )
            }
        }
    })
}

/// Integer cell coordinates; `ix` along world x, `iy` along world y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub ix: usize,
    pub iy: usize,
}

impl CellIndex {
    pub fn new(ix: usize, iy: usize) -> Self {
        Self { ix, iy }
    }
}

/// A world-frame point to fuse into the grid, with its vertical variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub position: Vector3<f64>,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub inserted: usize,
    pub fused: usize,
    pub inflated: usize,
    pub out_of_bounds: usize,
    pub invalid: usize,
}

impl IntegrationStats {
    /// Number of cells whose content changed.
    pub fn touched(&self) -> usize {
        self.inserted + self.fused + self.inflated
    }
}

/// Grid geometry as it appears in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridGeometry {
    /// Cell edge length, meters.
    pub resolution: f64,
    /// Number of cells along each side.
    pub side_cells: usize,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            resolution: 0.01,
            side_cells: 400,
        }
    }
}

/// Dense square elevation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationGrid {
    resolution: f64,
    side_cells: usize,
    anchor: Vector2<f64>,
    offset: [i64; 2],
    cells: Vec<Cell>,
}

impl ElevationGrid {
    /// Empty grid whose cell `(0, 0)` has its lower corner at `origin`.
    pub fn new(resolution: f64, side_cells: usize, origin: Vector2<f64>) -> Result<Self, MapError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(MapError::InvalidGeometry(format!("resolution = {resolution}")));
        }
        if side_cells == 0 || side_cells > u32::MAX as usize {
            return Err(MapError::InvalidGeometry(format!("side_cells = {side_cells}")));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(MapError::InvalidGeometry("origin is not finite".into()));
        }
        Ok(Self {
            resolution,
            side_cells,
            anchor: origin,
            offset: [0, 0],
            cells: vec![Cell::Empty; side_cells * side_cells],
        })
    }

    /// Empty grid centered on `center`, with its origin snapped to the cell lattice.
    pub fn centered(geometry: GridGeometry, center: Vector2<f64>) -> Result<Self, MapError> {
        let res = geometry.resolution;
        if !(res > 0.0) {
            return Err(MapError::InvalidGeometry(format!("resolution = {res}")));
        }
        let half = geometry.side_cells as f64 * 0.5;
        let origin = Vector2::new(
            ((center.x / res) - half).round() * res,
            ((center.y / res) - half).round() * res,
        );
        Self::new(res, geometry.side_cells, origin)
    }

    #[inline]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    #[inline]
    pub fn side_cells(&self) -> usize {
        self.side_cells
    }

    /// World coordinate of the lower corner of cell `(0, 0)`.
    #[inline]
    pub fn origin(&self) -> Vector2<f64> {
        Vector2::new(
            self.anchor.x + self.offset[0] as f64 * self.resolution,
            self.anchor.y + self.offset[1] as f64 * self.resolution,
        )
    }

    /// Side length in meters.
    pub fn extent(&self) -> f64 {
        self.side_cells as f64 * self.resolution
    }

    pub fn center(&self) -> Vector2<f64> {
        self.origin() + Vector2::repeat(self.extent() * 0.5)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    #[inline]
    fn linear(&self, idx: CellIndex) -> usize {
        idx.ix * self.side_cells + idx.iy
    }

    #[inline]
    pub fn cell(&self, idx: CellIndex) -> Cell {
        self.cells[self.linear(idx)]
    }

    #[inline]
    pub fn cell_mut(&mut self, idx: CellIndex) -> &mut Cell {
        let i = self.linear(idx);
        &mut self.cells[i]
    }

    /// Linear storage index of `idx`.
    #[inline]
    pub fn linear_index(&self, idx: CellIndex) -> usize {
        self.linear(idx)
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_occupied()).count()
    }

    /// Cell containing `xy`, using half-open intervals `[origin + i res, origin + (i+1) res)`.
    #[inline]
    pub fn cell_index(&self, xy: Vector2<f64>) -> Option<CellIndex> {
        let origin = self.origin();
        let ix = lattice_coordinate((xy.x - origin.x) / self.resolution)?;
        let iy = lattice_coordinate((xy.y - origin.y) / self.resolution)?;
        (ix < self.side_cells && iy < self.side_cells).then_some(CellIndex { ix, iy })
    }

    /// World xy of a cell center.
    #[inline]
    pub fn cell_center(&self, idx: CellIndex) -> Vector2<f64> {
        let origin = self.origin();
        Vector2::new(
            origin.x + (idx.ix as f64 + 0.5) * self.resolution,
            origin.y + (idx.iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell as a 3D point `(center x, center y, h)`, if occupied.
    #[inline]
    pub fn cell_point(&self, idx: CellIndex) -> Option<Vector3<f64>> {
        let h = self.cell(idx).elevation()?;
        let c = self.cell_center(idx);
        Some(Vector3::new(c.x, c.y, h))
    }

    /// Fuses a measurement into one cell.
    pub fn update(
        &mut self,
        idx: CellIndex,
        z: f64,
        var_z: f64,
        cfg: &MapUpdateConfig,
    ) -> Result<UpdateKind, MapError> {
        let cell = self.cell_mut(idx);
        let (next, kind) = update_cell(*cell, z, var_z, cfg)?;
        *cell = next;
        Ok(kind)
    }

    /// Applies [`update_cell`] for every point. Out-of-bounds points and points with an
    /// invalid variance are skipped and counted.
    pub fn integrate_cloud(&mut self, points: &[MapPoint], cfg: &MapUpdateConfig) -> IntegrationStats {
        let mut stats = IntegrationStats::default();
        for p in points {
            let Some(idx) = self.cell_index(p.position.xy()) else {
                stats.out_of_bounds += 1;
                continue;
            };
            match self.update(idx, p.position.z, p.var, cfg) {
                Ok(UpdateKind::Inserted) => stats.inserted += 1,
                Ok(UpdateKind::Fused) => stats.fused += 1,
                Ok(UpdateKind::Inflated) => stats.inflated += 1,
                Err(_) => stats.invalid += 1,
            }
        }
        stats
    }

    /// Surface normal at `idx` from Sobel derivatives of the elevation field.
    ///
    /// Returns `None` when any cell of the 3×3 neighborhood is empty or outside the grid,
    /// or when the normal is more than `phi_max` radians from vertical.
    pub fn normal_at(&self, idx: CellIndex, phi_max: f64) -> Option<Vector3<f64>> {
        let n = self.side_cells;
        if idx.ix == 0 || idx.iy == 0 || idx.ix + 1 >= n || idx.iy + 1 >= n {
            return None;
        }
        let mut f = [[0.0f64; 3]; 3];
        for (a, row) in f.iter_mut().enumerate() {
            let base = (idx.ix + a - 1) * n + idx.iy - 1;
            for (b, v) in row.iter_mut().enumerate() {
                *v = self.cells[base + b].elevation()?;
            }
        }
        // f[a][b] = elevation at (ix + a - 1, iy + b - 1)
        let scale = 1.0 / (8.0 * self.resolution);
        let dfdx = ((f[2][0] + 2.0 * f[2][1] + f[2][2]) - (f[0][0] + 2.0 * f[0][1] + f[0][2])) * scale;
        let dfdy = ((f[0][2] + 2.0 * f[1][2] + f[2][2]) - (f[0][0] + 2.0 * f[1][0] + f[2][0])) * scale;
        let normal = Vector3::new(-dfdx, -dfdy, 1.0).normalize();
        // angle to vertical = acos(n_z)
        (normal.z >= phi_max.cos()).then_some(normal)
    }

    /// Shifts the grid window by whole cells: the old content of cell `(ix, iy)` ends up
    /// at `(ix - d_ix, iy - d_iy)`. Cells that leave the window are dropped; cells that
    /// enter it are empty.
    pub fn shift(&mut self, d_ix: i64, d_iy: i64) {
        if d_ix == 0 && d_iy == 0 {
            return;
        }
        let n = self.side_cells as i64;
        let mut next = vec![Cell::Empty; self.cells.len()];
        if d_ix.abs() < n && d_iy.abs() < n {
            for ix in 0..n {
                let src_ix = ix + d_ix;
                if !(0..n).contains(&src_ix) {
                    continue;
                }
                let (lo, hi) = ((-d_iy).max(0), (n - d_iy).min(n));
                let dst = (ix * n + lo) as usize..(ix * n + hi) as usize;
                let src = (src_ix * n + lo + d_iy) as usize..(src_ix * n + hi + d_iy) as usize;
                next[dst].copy_from_slice(&self.cells[src]);
            }
        }
        self.cells = next;
        self.offset[0] += d_ix;
        self.offset[1] += d_iy;
    }

    /// Re-centers the window on `robot_xy` when the robot has left the central square
    /// (half the side length, a quarter of the area). Returns the applied cell shift.
    pub fn recenter(&mut self, robot_xy: Vector2<f64>) -> (i64, i64) {
        let offset = robot_xy - self.center();
        let quarter = self.extent() * 0.25;
        if offset.x.abs() <= quarter && offset.y.abs() <= quarter {
            return (0, 0);
        }
        let d_ix = (offset.x / self.resolution).round() as i64;
        let d_iy = (offset.y / self.resolution).round() as i64;
        self.shift(d_ix, d_iy);
        (d_ix, d_iy)
    }

    /// Writes the binary snapshot.
    ///
    /// Layout, little-endian: magic `EMAP`, `u32` version (1), `f64` resolution,
    /// `u32` side_cells, `f64` origin x, `f64` origin y, then `side_cells²` cells in
    /// storage order as `(f32 h, f32 var)`. Empty cells have `h = NaN`, `var = 0`.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), MapError> {
        let origin = self.origin();
        let mut buf = Vec::with_capacity(SNAPSHOT_HEADER_LEN + self.cells.len() * 8);
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.resolution.to_le_bytes());
        buf.extend_from_slice(&(self.side_cells as u32).to_le_bytes());
        buf.extend_from_slice(&origin.x.to_le_bytes());
        buf.extend_from_slice(&origin.y.to_le_bytes());
        for cell in &self.cells {
            let (h, var) = match *cell {
                Cell::Occupied { h, var } => (h as f32, var as f32),
                Cell::Empty => (f32::NAN, 0.0),
            };
            buf.extend_from_slice(&h.to_le_bytes());
            buf.extend_from_slice(&var.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, MapError> {
        let mut header = [0u8; SNAPSHOT_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| MapError::Format(format!("truncated header: {e}")))?;
        if &header[0..4] != SNAPSHOT_MAGIC {
            return Err(MapError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(MapError::Format(format!("unsupported version {version}")));
        }
        let resolution = f64::from_le_bytes(header[8..16].try_into().unwrap());
        let side = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let ox = f64::from_le_bytes(header[20..28].try_into().unwrap());
        let oy = f64::from_le_bytes(header[28..36].try_into().unwrap());
        let mut grid = Self::new(resolution, side, Vector2::new(ox, oy))
            .map_err(|e| MapError::Format(e.to_string()))?;
        let mut body = vec![0u8; side * side * 8];
        r.read_exact(&mut body)
            .map_err(|e| MapError::Format(format!("truncated cell data: {e}")))?;
        for (cell, chunk) in grid.cells.iter_mut().zip(body.chunks_exact(8)) {
            let h = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
            let var = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
            if !h.is_nan() {
                if !(var > 0.0) {
                    return Err(MapError::Format(format!("occupied cell with variance {var}")));
                }
                *cell = Cell::Occupied {
                    h: h as f64,
                    var: var as f64,
                };
            }
        }
        Ok(grid)
    }

    /// 16-bit binary PGM render.
    ///
    /// Image column `u` is cell `ix = u`, image row `v` is cell `iy = side - 1 - v`
    /// (north up). Empty cells are 0; an occupied elevation `h` maps to
    /// `1 + round(65534 (h - lo) / (hi - lo))`, clamped, where `[lo, hi]` is `range`
    /// or the occupied min/max. A degenerate range renders every occupied cell as 32768.
    pub fn write_pgm<W: Write>(&self, mut w: W, range: Option<(f64, f64)>) -> Result<(), MapError> {
        let (lo, hi) = range.unwrap_or_else(|| {
            self.cells
                .iter()
                .filter_map(Cell::elevation)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| (lo.min(h), hi.max(h)))
        });
        let n = self.side_cells;
        let mut buf = format!("P5\n{n} {n}\n65535\n").into_bytes();
        buf.reserve(n * n * 2);
        for v in 0..n {
            let iy = n - 1 - v;
            for ix in 0..n {
                let gray = self.cells[ix * n + iy]
                    .elevation()
                    .map_or(0u16, |h| elevation_to_gray(h, lo, hi));
                buf.extend_from_slice(&gray.to_be_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// Affine elevation-to-gray mapping used by [`ElevationGrid::write_pgm`].
pub fn elevation_to_gray(h: f64, lo: f64, hi: f64) -> u16 {
    if !(hi > lo) || !h.is_finite() {
        return 32768;
    }
    let t = ((h - lo) / (hi - lo)).clamp(0.0, 1.0);
    1 + (t * 65534.0).round() as u16
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"EMAP";
const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_HEADER_LEN: usize = 36;

/// Floor of a lattice coordinate, snapping values within 1e-9 cells of an integer so
/// that cell boundaries computed through floating point stay half-open.
#[inline]
fn lattice_coordinate(f: f64) -> Option<usize> {
    if !f.is_finite() {
        return None;
    }
    let r = f.round();
    let i = if (f - r).abs() < 1e-9 { r } else { f.floor() };
    (i >= 0.0).then_some(i as usize)
}

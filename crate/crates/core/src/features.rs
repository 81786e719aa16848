//! BEV feature maps: the evidence encoder, projection onto the shared global
//! grid, the collaborator pose embedding, and sparse (query-masked) maps.

use std::f64::consts::PI;

use thiserror::Error;

use crate::geometry::{Point, Pose};
use crate::grid::GridSpec;
use crate::scenario::EvidenceGrid;

pub const BEVF_MAGIC: &[u8; 4] = b"BEVF";
pub const BEVF_HEADER_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("feature maps need at least {min} channels, got {got}")]
    TooFewChannels { min: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed feature map file: {0}")]
    Malformed(String),
}

/// Dense `H x W x D` grid of feature vectors, row-major and channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub grid: GridSpec,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl BevFeatureMap {
    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        BevFeatureMap {
            grid,
            channels,
            values: vec![0.0; grid.n_cells() * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = self.grid.index(row, col) * self.channels;
        &self.values[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = self.grid.index(row, col) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    /// Feature vector of the flat cell index `idx`.
    pub fn at(&self, idx: usize) -> &[f32] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn channel(&self, ch: usize) -> Vec<f32> {
        self.values
            .chunks_exact(self.channels)
            .map(|v| v[ch])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `BEVF` little-endian dump: magic, `u32` H, W, D, then `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BEVF_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(BEVF_MAGIC);
        for dim in [self.height(), self.width(), self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a `BEVF` dump; the grid placement is supplied by the caller.
    pub fn from_bytes(bytes: &[u8], cell_size: f64, origin: Point) -> Result<Self, FeatureError> {
        if bytes.len() < BEVF_HEADER_LEN {
            return Err(FeatureError::Malformed("truncated header".into()));
        }
        if &bytes[..4] != BEVF_MAGIC {
            return Err(FeatureError::Malformed("bad magic".into()));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        };
        let (h, w, d) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| FeatureError::Malformed("dimension overflow".into()))?;
        if bytes.len() != BEVF_HEADER_LEN + 4 * n {
            return Err(FeatureError::Malformed(format!(
                "expected {} payload bytes, found {}",
                4 * n,
                bytes.len() - BEVF_HEADER_LEN
            )));
        }
        let values = bytes[BEVF_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(BevFeatureMap {
            grid: GridSpec {
                height: h,
                width: w,
                cell_size,
                origin,
            },
            channels: d,
            values,
        })
    }
}

/// Fixed sinusoidal code of a position; fills `out` with `sin/cos` pairs,
/// alternating x and y, with frequencies doubling every two pairs.
fn positional_code(p: Point, extent: f64, out: &mut [f32]) {
    for (j, slot) in out.iter_mut().enumerate() {
        let freq = (j / 4) as i32;
        let coord = if (j / 2) % 2 == 0 { p.x } else { p.y };
        let omega = PI / extent * 2f64.powi(freq);
        let phase = omega * coord;
        *slot = if j % 2 == 0 { phase.sin() } else { phase.cos() } as f32;
    }
}

/// Encodes an evidence grid into `channels` features per cell.
///
/// Channel 0 holds the evidence, channel 1 the range decay
/// `exp(-d / sensor_range)` from the observing agent, and the rest a fixed
/// positional code of the cell.
pub fn encode(obs: &EvidenceGrid, channels: usize) -> Result<BevFeatureMap, FeatureError> {
    if channels < 2 {
        return Err(FeatureError::TooFewChannels {
            min: 2,
            got: channels,
        });
    }
    let grid = obs.grid;
    let extent = (grid.width.max(grid.height) as f64) * grid.cell_size;
    let mut map = BevFeatureMap::zeros(grid, channels);
    for (r, c) in grid.cells() {
        let center = grid.cell_center(r, c);
        let d = center.dist(Point::new(0.0, 0.0));
        let cell = map.cell_mut(r, c);
        cell[0] = f32::from(obs.get(r, c));
        cell[1] = (-d / obs.sensor_range).exp() as f32;
        positional_code(center, extent, &mut cell[2..]);
    }
    Ok(map)
}

/// Resamples an agent-frame map onto `target` (global frame) with nearest-neighbor lookup.
///
/// `pose` places the source map's frame in the global frame. Target cells whose
/// centers fall outside the source footprint are zero.
pub fn to_global_frame(map: &BevFeatureMap, pose: &Pose, target: &GridSpec) -> BevFeatureMap {
    let mut out = BevFeatureMap::zeros(*target, map.channels);
    for (r, c) in target.cells() {
        let local = pose.to_local(target.cell_center(r, c));
        if let Some((sr, sc)) = map.grid.cell_of(local) {
            let src = map.cell(sr, sc).to_vec();
            out.cell_mut(r, c).copy_from_slice(&src);
        }
    }
    out
}

/// Proximity field per collaborator: `exp(-dist(cell, collaborator) / area_side)`.
///
/// Returns one plane of `H * W` values per collaborator.
pub fn pose_embedding(poses: &[Pose], grid: &GridSpec, area_side: f64) -> Vec<Vec<f64>> {
    poses
        .iter()
        .map(|p| {
            grid.cells()
                .map(|(r, c)| (-grid.cell_center(r, c).dist(p.position()) / area_side).exp())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEntry {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f32>,
}

/// Query-masked feature map; only activated cells are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub entries: Vec<SparseEntry>,
}

impl SparseFeatureMap {
    pub fn empty(height: usize, width: usize, channels: usize) -> Self {
        SparseFeatureMap {
            height,
            width,
            channels,
            entries: Vec::new(),
        }
    }

    /// Keeps the cells where `bits` is set, in row-major order.
    pub fn sparsify(map: &BevFeatureMap, bits: &[u8]) -> Result<Self, FeatureError> {
        if bits.len() != map.grid.n_cells() {
            return Err(FeatureError::ShapeMismatch(format!(
                "query map has {} cells, feature map {}",
                bits.len(),
                map.grid.n_cells()
            )));
        }
        let entries = map
            .grid
            .cells()
            .zip(bits)
            .filter(|(_, &b)| b != 0)
            .map(|((row, col), _)| SparseEntry {
                row,
                col,
                values: map.cell(row, col).to_vec(),
            })
            .collect();
        Ok(SparseFeatureMap {
            height: map.height(),
            width: map.width(),
            channels: map.channels,
            entries,
        })
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let mut seen = vec![false; self.height * self.width];
        for e in &self.entries {
            if e.row >= self.height || e.col >= self.width {
                return Err(FeatureError::ShapeMismatch(format!(
                    "entry ({}, {}) outside {}x{}",
                    e.row, e.col, self.height, self.width
                )));
            }
            if e.values.len() != self.channels {
                return Err(FeatureError::ShapeMismatch("entry width".into()));
            }
            let idx = e.row * self.width + e.col;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(FeatureError::ShapeMismatch(format!(
                    "duplicate entry ({}, {})",
                    e.row, e.col
                )));
            }
        }
        Ok(())
    }

    /// Dense map on `grid`, zero where no entry exists.
    pub fn densify(&self, grid: GridSpec) -> BevFeatureMap {
        let mut out = BevFeatureMap::zeros(grid, self.channels);
        for e in &self.entries {
            out.cell_mut(e.row, e.col).copy_from_slice(&e.values);
        }
        out
    }

    /// Per-cell lookup table into `entries`.
    pub fn presence(&self) -> Vec<Option<usize>> {
        let mut idx = vec![None; self.height * self.width];
        for (i, e) in self.entries.iter().enumerate() {
            idx[e.row * self.width + e.col] = Some(i);
        }
        idx
    }
}

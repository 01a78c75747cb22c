//! Binary voxel grids and their cache file.
//!
//! Cache layout, little-endian:
//!
//! ```text
//! [8]  magic "SSVGRID1"
//! u32  channels   u32 timesteps   u32 height   u32 width
//! u64  bin_width_us
//! u64  record_count
//! record_count × { u32 t, u16 x, u16 y, i8 value }   sorted by (t, y, x)
//! ```

use std::collections::BTreeMap;

use super::EventStream;
use crate::error::{Error, Result};
use crate::sparse_tensor::{Shape2D, Site, SparseTensor2D};

pub const GRID_CACHE_MAGIC: &[u8; 8] = b"SSVGRID1";
const GRID_HEADER_LEN: usize = 8 + 4 * 4 + 8 + 8;
const GRID_RECORD_LEN: usize = 4 + 2 + 2 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Voxel {
    pub x: u16,
    pub y: u16,
    /// `+1` or `-1`.
    pub value: i8,
}

/// `C×T×H×W` binary event-presence tensor with a single polarity channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVoxelGrid {
    timesteps: usize,
    height: usize,
    width: usize,
    bin_width_us: u64,
    /// One list per timestep, sorted by `(y, x)`.
    frames: Vec<Vec<Voxel>>,
}

impl BinaryVoxelGrid {
    pub fn empty(timesteps: usize, height: usize, width: usize, bin_width_us: u64) -> Self {
        BinaryVoxelGrid {
            timesteps,
            height,
            width,
            bin_width_us,
            frames: vec![Vec::new(); timesteps],
        }
    }

    pub fn channels(&self) -> usize {
        1
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bin_width_us(&self) -> u64 {
        self.bin_width_us
    }

    pub fn frame_voxels(&self, t: usize) -> &[Voxel] {
        self.frames.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn get(&self, t: usize, x: u16, y: u16) -> Option<i8> {
        let frame = self.frames.get(t)?;
        frame
            .binary_search_by_key(&(y, x), |v| (v.y, v.x))
            .ok()
            .map(|i| frame[i].value)
    }

    pub fn nonzero_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Fraction of zero voxels, in `[0, 1]`.
    pub fn sparsity(&self) -> f64 {
        let size = self.timesteps * self.height * self.width;
        if size == 0 {
            1.0
        } else {
            1.0 - self.nonzero_count() as f64 / size as f64
        }
    }

    /// Timestep `t` as a `1×1×H×W` sparse tensor. Timesteps past the end of
    /// the grid are empty.
    pub fn frame(&self, t: usize) -> SparseTensor2D {
        let shape = Shape2D::new(1, 1, self.height, self.width);
        let mut tensor = SparseTensor2D::empty(shape);
        for voxel in self.frame_voxels(t) {
            tensor.push_sorted(
                Site::new(0, voxel.x as u32, voxel.y as u32),
                &[voxel.value as f64],
            );
        }
        tensor
    }

    /// Truncates or pads with empty timesteps.
    pub fn with_timesteps(&self, timesteps: usize) -> BinaryVoxelGrid {
        let mut frames = self.frames.clone();
        frames.resize(timesteps, Vec::new());
        BinaryVoxelGrid {
            timesteps,
            frames,
            ..*self
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Voxel)> + '_ {
        self.frames
            .iter()
            .enumerate()
            .flat_map(|(t, frame)| frame.iter().map(move |v| (t, *v)))
    }
}

/// Bins events into `timesteps` windows of `bin_width_us`, keeping only
/// presence: each occupied `(t, x, y)` holds `±1` however many events fell
/// in it. When both polarities land in one bin the latest event wins.
/// Events at or after `clip_us` are dropped.
pub fn build_voxel_grid(
    stream: &EventStream,
    bin_width_us: u64,
    timesteps: usize,
    clip_us: u64,
) -> Result<BinaryVoxelGrid> {
    if bin_width_us == 0 || timesteps == 0 {
        return Err(Error::Config(format!(
            "voxel grid needs a positive bin width and timestep count, got {bin_width_us} us x {timesteps}"
        )));
    }
    let mut cells: BTreeMap<(usize, u16, u16), i8> = BTreeMap::new();
    for event in stream.events() {
        if event.timestamp >= clip_us {
            continue;
        }
        let t = (event.timestamp / bin_width_us) as usize;
        if t >= timesteps {
            continue;
        }
        cells.insert((t, event.y, event.x), event.polarity.sign());
    }
    let mut grid = BinaryVoxelGrid::empty(
        timesteps,
        stream.height() as usize,
        stream.width() as usize,
        bin_width_us,
    );
    for ((t, y, x), value) in cells {
        grid.frames[t].push(Voxel { x, y, value });
    }
    Ok(grid)
}

pub fn write_grid_cache(grid: &BinaryVoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER_LEN + grid.nonzero_count() * GRID_RECORD_LEN);
    out.extend_from_slice(GRID_CACHE_MAGIC);
    for dim in [1, grid.timesteps, grid.height, grid.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&grid.bin_width_us.to_le_bytes());
    out.extend_from_slice(&(grid.nonzero_count() as u64).to_le_bytes());
    for (t, voxel) in grid.iter() {
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&voxel.x.to_le_bytes());
        out.extend_from_slice(&voxel.y.to_le_bytes());
        out.push(voxel.value as u8);
    }
    out
}

pub fn read_grid_cache(bytes: &[u8]) -> Result<BinaryVoxelGrid> {
    if bytes.len() < GRID_HEADER_LEN {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            message: format!("grid header needs {GRID_HEADER_LEN} bytes"),
        });
    }
    if &bytes[..8] != GRID_CACHE_MAGIC {
        return Err(Error::format("magic", "not a voxel-grid cache file"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let channels = u32_at(8);
    if channels != 1 {
        return Err(Error::format("channels", format!("expected 1, found {channels}")));
    }
    let (timesteps, height, width) = (u32_at(12), u32_at(16), u32_at(20));
    let bin_width_us = u64_at(24);
    let count = u64_at(32) as usize;
    let mut grid = BinaryVoxelGrid::empty(timesteps, height, width, bin_width_us);
    let mut previous: Option<(usize, u16, u16)> = None;
    for i in 0..count {
        let at = GRID_HEADER_LEN + i * GRID_RECORD_LEN;
        if bytes.len() < at + GRID_RECORD_LEN {
            return Err(Error::Truncated {
                offset: at as u64,
                message: format!("record {i} of {count} is incomplete"),
            });
        }
        let t = u32_at(at);
        let x = u16::from_le_bytes([bytes[at + 4], bytes[at + 5]]);
        let y = u16::from_le_bytes([bytes[at + 6], bytes[at + 7]]);
        let value = bytes[at + 8] as i8;
        if t >= timesteps || x as usize >= width || y as usize >= height {
            return Err(Error::format(
                "record",
                format!("record {i} at (t={t}, x={x}, y={y}) is outside the grid"),
            ));
        }
        if value != 1 && value != -1 {
            return Err(Error::format("record", format!("record {i} has value {value}")));
        }
        if previous.is_some_and(|p| p >= (t, y, x)) {
            return Err(Error::format("record", format!("record {i} is out of (t, y, x) order")));
        }
        previous = Some((t, y, x));
        grid.frames[t].push(Voxel { x, y, value });
    }
    Ok(grid)
}

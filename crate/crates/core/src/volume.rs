//! Volumes and orientation-aware slicing.
//!
//! Storage is row-major with `z` outermost and `x` innermost. The three
//! orientations fix one axis each:
//!
//! | orientation | fixed axis | slice rows | slice cols |
//! |-------------|------------|------------|------------|
//! | axial       | z          | y          | x          |
//! | coronal     | y          | z          | x          |
//! | sagittal    | x          | z          | y          |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Axial,
    Coronal,
    Sagittal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Axial, Orientation::Coronal, Orientation::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        }
    }

    /// Number of slices along this orientation for a volume of `dims`.
    pub fn slice_count(self, dims: Dims) -> usize {
        match self {
            Orientation::Axial => dims.nz,
            Orientation::Coronal => dims.ny,
            Orientation::Sagittal => dims.nx,
        }
    }

    /// `(rows, cols)` of each slice.
    pub fn slice_dims(self, dims: Dims) -> (usize, usize) {
        match self {
            Orientation::Axial => (dims.ny, dims.nx),
            Orientation::Coronal => (dims.nz, dims.nx),
            Orientation::Sagittal => (dims.nz, dims.ny),
        }
    }

    /// Maps (slice index, row, col) to the volume coordinate `(z, y, x)`.
    #[inline]
    pub fn to_zyx(self, slice: usize, row: usize, col: usize) -> (usize, usize, usize) {
        match self {
            Orientation::Axial => (slice, row, col),
            Orientation::Coronal => (row, slice, col),
            Orientation::Sagittal => (row, col, slice),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" | "a" => Ok(Orientation::Axial),
            "coronal" | "c" => Ok(Orientation::Coronal),
            "sagittal" | "s" => Ok(Orientation::Sagittal),
            other => Err(Error::Config(format!("unknown orientation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Dims {
    pub fn new(nz: usize, ny: usize, nx: usize) -> Self {
        Dims { nz, ny, nx }
    }

    pub fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nz, self.ny, self.nx)
    }
}

/// A 3D scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.nz == 0 || dims.ny == 0 || dims.nx == 0 {
            return Err(Error::InvalidVolume(format!("all dims must be >= 1, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {dims} ({})",
                data.len(),
                dims.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Volume::new(dims, vec![value; dims.len()])
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Volume::filled(dims, 0.0)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, value: f32) {
        let i = self.dims.index(z, y, x);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// True when every voxel lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// A 2D scalar grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Slice {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "slice data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Slice { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Slice {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// The slices of a volume along one orientation, ordered by ascending fixed-axis index.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub orientation: Orientation,
    pub slice_dims: (usize, usize),
    pub slices: Vec<Slice>,
}

impl SliceStack {
    pub fn new(orientation: Orientation, slices: Vec<Slice>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidVolume("slice stack needs at least one slice".into()))?;
        let slice_dims = (first.rows, first.cols);
        if let Some((i, s)) = slices
            .iter()
            .enumerate()
            .find(|(_, s)| (s.rows, s.cols) != slice_dims)
        {
            return Err(Error::DimMismatch(format!(
                "slice {i} is {}x{}, expected {}x{}",
                s.rows, s.cols, slice_dims.0, slice_dims.1
            )));
        }
        Ok(SliceStack {
            orientation,
            slice_dims,
            slices,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Cuts `v` into slices along `o`.
pub fn extract_slices(v: &Volume, o: Orientation) -> SliceStack {
    let dims = v.dims();
    let n = o.slice_count(dims);
    let (rows, cols) = o.slice_dims(dims);
    let slices = (0..n)
        .map(|i| extract_slice(v, o, i))
        .collect::<Vec<_>>();
    SliceStack {
        orientation: o,
        slice_dims: (rows, cols),
        slices,
    }
}

/// Single slice `index` along `o`.
pub fn extract_slice(v: &Volume, o: Orientation, index: usize) -> Slice {
    let dims = v.dims();
    let (rows, cols) = o.slice_dims(dims);
    let src = v.data();
    let mut data = Vec::with_capacity(rows * cols);
    match o {
        Orientation::Axial => {
            let start = dims.index(index, 0, 0);
            data.extend_from_slice(&src[start..start + rows * cols]);
        }
        Orientation::Coronal => {
            for z in 0..dims.nz {
                let start = dims.index(z, index, 0);
                data.extend_from_slice(&src[start..start + dims.nx]);
            }
        }
        Orientation::Sagittal => {
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    data.push(src[dims.index(z, y, index)]);
                }
            }
        }
    }
    Slice { rows, cols, data }
}

/// Reassembles a volume from slices taken along `o`.
pub fn stack_slices(s: &SliceStack, o: Orientation) -> Result<Volume> {
    if s.orientation != o {
        return Err(Error::OrientationMismatch {
            stack: s.orientation.to_string(),
            requested: o.to_string(),
        });
    }
    if s.slices.is_empty() {
        return Err(Error::InvalidVolume("cannot stack zero slices".into()));
    }
    let (rows, cols) = (s.slices[0].rows, s.slices[0].cols);
    for (i, sl) in s.slices.iter().enumerate() {
        if sl.rows != rows || sl.cols != cols || sl.data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "slice {i} is {}x{}, expected {rows}x{cols}",
                sl.rows, sl.cols
            )));
        }
    }
    let n = s.slices.len();
    let dims = match o {
        Orientation::Axial => Dims::new(n, rows, cols),
        Orientation::Coronal => Dims::new(rows, n, cols),
        Orientation::Sagittal => Dims::new(rows, cols, n),
    };
    let mut out = vec![0.0f32; dims.len()];
    for (i, sl) in s.slices.iter().enumerate() {
        match o {
            Orientation::Axial => {
                let start = dims.index(i, 0, 0);
                out[start..start + rows * cols].copy_from_slice(&sl.data);
            }
            Orientation::Coronal => {
                for z in 0..rows {
                    let start = dims.index(z, i, 0);
                    out[start..start + cols].copy_from_slice(&sl.data[z * cols..(z + 1) * cols]);
                }
            }
            Orientation::Sagittal => {
                for z in 0..rows {
                    for y in 0..cols {
                        out[dims.index(z, y, i)] = sl.data[z * cols + y];
                    }
                }
            }
        }
    }
    Volume::new(dims, out)
}

/// Divisor used to bring a volume into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub max_intensity: f32,
}

impl ScaleRecord {
    pub fn new(max_intensity: f32) -> Result<Self> {
        if !(max_intensity.is_finite() && max_intensity >= f32::MIN_POSITIVE) {
            return Err(Error::InvalidVolume(format!(
                "scale divisor must be positive and finite, got {max_intensity}"
            )));
        }
        Ok(ScaleRecord { max_intensity })
    }

    pub fn identity() -> Self {
        ScaleRecord { max_intensity: 1.0 }
    }
}

/// Per-volume max normalization. An all-zero volume keeps divisor 1.
pub fn normalize_volume(v: &Volume) -> Result<(Volume, ScaleRecord)> {
    if let Some(bad) = v.data().iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidVolume(format!(
            "normalization requires finite non-negative intensities, found {bad}"
        )));
    }
    let max = v.max();
    if max <= 0.0 {
        return Ok((v.clone(), ScaleRecord::identity()));
    }
    let record = ScaleRecord::new(max)?;
    // Divide in f64 so values equal to the max map to exactly 1.0.
    let out = v.map(|x| ((x as f64) / (max as f64)).min(1.0) as f32);
    Ok((out, record))
}

pub fn denormalize_volume(v: &Volume, s: ScaleRecord) -> Volume {
    let m = s.max_intensity as f64;
    v.map(|x| (x as f64 * m) as f32)
}

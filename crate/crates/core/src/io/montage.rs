//! Binary PGM montages: one row per volume, columns are the center axial,
//! coronal and sagittal slices. Tiles are top-left aligned; when `ny != nz`
//! the shorter tiles are padded with black up to the row height `max(ny, nz)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{extract_slice, Orientation, Slice, Volume};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn center_slice(v: &Volume, o: Orientation) -> Slice {
    extract_slice(v, o, o.slice_count(v.dims()) / 2)
}

/// Width and height of the montage for `rows` volumes of dims `d`.
pub fn montage_size(rows: usize, v: &Volume) -> (usize, usize) {
    let d = v.dims();
    (2 * d.nx + d.ny, rows * d.ny.max(d.nz))
}

/// P5 bytes for the labelled volumes, in the given row order.
pub fn montage_bytes(volumes: &[(&str, &Volume)]) -> Result<Vec<u8>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidVolume("montage needs at least one volume".into()))?
        .1;
    let dims = first.dims();
    for (label, v) in volumes {
        if v.dims() != dims {
            return Err(Error::DimMismatch(format!("{label} is {}, expected {dims}", v.dims())));
        }
    }
    let (width, height) = montage_size(volumes.len(), first);
    let row_h = dims.ny.max(dims.nz);
    let mut pixels = vec![0u8; width * height];
    for (r, (_, v)) in volumes.iter().enumerate() {
        let mut x0 = 0;
        for o in Orientation::ALL {
            let s = center_slice(v, o);
            for i in 0..s.rows {
                let row = (r * row_h + i) * width + x0;
                for j in 0..s.cols {
                    pixels[row + j] = to_byte(s.get(i, j));
                }
            }
            x0 += s.cols;
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_montage(volumes: &[(&str, &Volume)], path: &Path) -> Result<()> {
    std::fs::write(path, montage_bytes(volumes)?).map_err(|e| Error::io(path, e))
}

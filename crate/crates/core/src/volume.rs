//! Scalar volumes, multilinear interpolation, and the portable `.pvol` format.
//!
//! The on-disk format is a single UTF-8 JSON header line terminated by `\n`,
//! followed immediately by raw little-endian IEEE-754 data, row-major with
//! the last axis fastest. Intensities are held as `f64` in memory regardless
//! of the on-disk precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Point, MAX_DIM};

#[derive(Debug, Clone)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
    modality: String,
}

/// Result of sampling a volume at a physical point.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub value: f64,
    pub inside: bool,
    /// Derivative of the interpolant with respect to physical coordinates.
    pub gradient: Point,
}

impl Sample {
    fn outside() -> Self {
        Sample { value: 0.0, inside: false, gradient: [0.0; MAX_DIM] }
    }
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>, modality: impl Into<String>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), actual: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData);
        }
        Ok(Self { grid, data, modality: modality.into() })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Multilinear interpolation at a physical point.
    ///
    /// Points outside the node bounding box report `inside = false` with a
    /// zero value and gradient; no extrapolation is performed.
    pub fn sample(&self, p: &Point) -> Sample {
        let d = self.grid.ndim();
        let t = self.grid.to_index_space(p);
        for a in 0..d {
            if !(t[a] >= 0.0 && t[a] <= (self.grid.dims()[a] - 1) as f64) {
                return Sample::outside();
            }
        }
        // Anchor cell and fractional offsets; the top node clamps into the
        // last cell so boundary points stay exact.
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for a in 0..d {
            let max_cell = (self.grid.dims()[a] - 2) as f64;
            let i = t[a].floor().min(max_cell);
            base[a] = i as usize;
            frac[a] = t[a] - i;
        }
        let mut value = 0.0;
        let mut grad_idx = [0.0f64; MAX_DIM]; // d value / d index coordinate
        for corner in 0..1usize << d {
            let mut w = 1.0;
            let mut idx = [0usize; MAX_DIM];
            for a in 0..d {
                let hi = corner >> a & 1 == 1;
                idx[a] = base[a] + hi as usize;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            let v = self.data[self.grid.linear_index(&idx[..d])];
            value += w * v;
            for a in 0..d {
                // weight derivative along axis a: +/-1 times the other factors
                let mut dw = 1.0;
                for b in 0..d {
                    let hi = corner >> b & 1 == 1;
                    if b == a {
                        dw *= if hi { 1.0 } else { -1.0 };
                    } else {
                        dw *= if hi { frac[b] } else { 1.0 - frac[b] };
                    }
                }
                grad_idx[a] += dw * v;
            }
        }
        let mut gradient = [0.0f64; MAX_DIM];
        for a in 0..d {
            gradient[a] = grad_idx[a] / self.grid.spacing()[a];
        }
        Sample { value, inside: true, gradient }
    }

    /// Value at a grid node by linear index.
    pub fn at(&self, linear: usize) -> f64 {
        self.data[linear]
    }
}

#[derive(Serialize, Deserialize)]
struct PvolHeader {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
    dtype: String,
    modality: String,
}

/// Save a volume in the portable format with the requested precision
/// (`"f32"` or `"f64"`).
pub fn save_volume_as(v: &Volume, path: &Path, dtype: &str) -> Result<()> {
    if dtype != "f32" && dtype != "f64" {
        return Err(Error::MalformedHeader(format!("unsupported dtype '{dtype}'")));
    }
    let header = PvolHeader {
        dims: v.grid().dims().to_vec(),
        spacing: v.grid().spacing().to_vec(),
        origin: v.grid().origin().to_vec(),
        dtype: dtype.to_string(),
        modality: v.modality().to_string(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    match dtype {
        "f32" => {
            for &x in v.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        _ => {
            for &x in v.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Save with full `f64` precision.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    save_volume_as(v, path, "f64")
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::MalformedHeader("missing newline after header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 16 {
            return Err(Error::MalformedHeader("header exceeds 64 KiB".into()));
        }
    }
    let header_str = std::str::from_utf8(&header_bytes)
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: PvolHeader = serde_json::from_str(header_str)
        .map_err(|e| Error::MalformedHeader(format!("header is not valid JSON: {e}")))?;
    if header.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(header.spacing));
    }
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let n = grid.len();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let data: Vec<f64> = match header.dtype.as_str() {
        "f32" => {
            if payload.len() != 4 * n {
                return Err(Error::DimensionMismatch { expected: n, actual: payload.len() / 4 });
            }
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        "f64" => {
            if payload.len() != 8 * n {
                return Err(Error::DimensionMismatch { expected: n, actual: payload.len() / 8 });
            }
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect()
        }
        other => return Err(Error::MalformedHeader(format!("unknown dtype '{other}'"))),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData);
    }
    Volume::new(grid, data, header.modality)
}

/// Read an 8- or 16-bit grayscale PNG as a 2D volume with intensities in
/// [0, 1], unit spacing and zero origin.
pub fn load_png(path: &Path, modality: &str) -> Result<Volume> {
    let img = image::open(path).map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    let (data, w, h) = match img {
        image::DynamicImage::ImageLuma8(im) => {
            let (w, h) = im.dimensions();
            (im.into_raw().iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>(), w, h)
        }
        image::DynamicImage::ImageLuma16(im) => {
            let (w, h) = im.dimensions();
            (im.into_raw().iter().map(|&v| v as f64 / 65535.0).collect::<Vec<_>>(), w, h)
        }
        other => {
            let im = other.into_luma16();
            let (w, h) = im.dimensions();
            (im.into_raw().iter().map(|&v| v as f64 / 65535.0).collect::<Vec<_>>(), w, h)
        }
    };
    // PNG scanlines are row-major with x fastest; store as dims [rows, cols].
    let grid = Grid::isotropic(vec![h as usize, w as usize])?;
    Volume::new(grid, data, modality)
}

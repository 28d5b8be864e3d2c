//! Gaussian smoothing and grid decimation for multi-resolution schedules.

use crate::grid::Grid;
use crate::volume::Volume;

/// Separable Gaussian filter (sigma in voxels, truncated at 3 sigma,
/// mirrored boundaries). `sigma <= 0` returns the input unchanged.
pub fn gaussian_smooth(v: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return v.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let grid = v.grid().clone();
    let d = grid.ndim();
    let dims = grid.dims().to_vec();
    let mut data = v.data().to_vec();
    let mut scratch = vec![0.0; data.len()];
    // stride of axis a in row-major (last axis fastest)
    let mut strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    for axis in 0..d {
        let n = dims[axis] as isize;
        let stride = strides[axis] as isize;
        let lines = data.len() / dims[axis];
        // iterate all 1D lines along `axis`
        let mut line_starts = Vec::with_capacity(lines);
        let mut idx = vec![0usize; d];
        'collect: loop {
            if idx[axis] == 0 {
                let mut lin = 0usize;
                for a in 0..d {
                    lin = lin * dims[a] + idx[a];
                }
                line_starts.push(lin);
            }
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    continue 'collect;
                }
                idx[a] = 0;
                if a == 0 {
                    break 'collect;
                }
            }
        }
        for &start in &line_starts {
            for i in 0..n {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let mut j = i + ki as isize - radius;
                    // mirror boundary
                    if j < 0 {
                        j = -j;
                    }
                    if j >= n {
                        j = 2 * n - 2 - j;
                    }
                    let j = j.clamp(0, n - 1);
                    acc += w * data[(start as isize + j * stride) as usize];
                }
                scratch[(start as isize + i * stride) as usize] = acc;
            }
        }
        std::mem::swap(&mut data, &mut scratch);
    }
    Volume::new(grid, data, v.modality()).expect("smoothing preserves shape")
}

/// Keep every `factor`-th node per axis; spacing scales accordingly and the
/// origin is unchanged. `factor = 1` clones.
pub fn downsample(v: &Volume, factor: usize) -> Volume {
    if factor <= 1 {
        return v.clone();
    }
    let grid = v.grid();
    let d = grid.ndim();
    let dims = grid.dims();
    let new_dims: Vec<usize> = dims.iter().map(|&n| (n - 1) / factor + 1).collect();
    let new_spacing: Vec<f64> = grid.spacing().iter().map(|&s| s * factor as f64).collect();
    let new_grid = Grid::new(new_dims.clone(), new_spacing, grid.origin().to_vec())
        .expect("downsampled grid stays valid");
    let mut data = Vec::with_capacity(new_grid.len());
    let mut idx = vec![0usize; d];
    'outer: loop {
        let mut lin = 0usize;
        for a in 0..d {
            lin = lin * dims[a] + idx[a] * factor;
        }
        data.push(v.data()[lin]);
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < new_dims[a] {
                continue 'outer;
            }
            idx[a] = 0;
            if a == 0 {
                break 'outer;
            }
        }
    }
    Volume::new(new_grid, data, v.modality()).expect("decimation preserves invariants")
}

/// Smooth-then-decimate in one call.
pub fn pyramid_level(v: &Volume, sigma: f64, factor: usize) -> Volume {
    let smoothed = gaussian_smooth(v, sigma);
    downsample(&smoothed, factor)
}

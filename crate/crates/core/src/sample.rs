//! Spatial sample sets drawn from the common-space grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{Grid, Point};

/// Points in common space together with per-image inside flags.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// Linear grid indices of the sampled nodes (ascending).
    pub indices: Vec<usize>,
    /// Physical coordinates, one per index.
    pub points: Vec<Point>,
    /// `inside[j][s]`: whether image j's warped position of sample s lies
    /// inside that image's grid. Filled by the resampling pass.
    pub inside: Vec<Vec<bool>>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// A sample belongs to the overlap region iff it is inside every image.
    pub fn overlap_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut mask = vec![true; n];
        for per_image in &self.inside {
            for (m, &b) in mask.iter_mut().zip(per_image) {
                *m &= b;
            }
        }
        mask
    }
}

/// Draw `ceil(rate * |grid|)` distinct grid nodes uniformly at random.
///
/// `rate = 1` returns every node in index order; smaller rates produce a
/// deterministic subset for a given seed, reported in ascending index order.
pub fn draw_samples(grid: &Grid, rate: f64, seed: u64) -> SampleSet {
    assert!(rate > 0.0 && rate <= 1.0, "sample rate must lie in (0, 1]");
    let total = grid.len();
    let count = ((rate * total as f64).ceil() as usize).clamp(1, total);
    let indices: Vec<usize> = if count == total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, count).into_vec();
        idx.sort_unstable();
        idx
    };
    let points = indices.iter().map(|&i| grid.point_at(i)).collect();
    SampleSet { indices, points, inside: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rate_returns_all_points_in_order() {
        let g = Grid::isotropic(vec![4, 4]).unwrap();
        let s = draw_samples(&g, 1.0, 7);
        assert_eq!(s.len(), 16);
        assert_eq!(s.indices, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let g = Grid::isotropic(vec![10, 10]).unwrap();
        let a = draw_samples(&g, 0.5, 42);
        let b = draw_samples(&g, 0.5, 42);
        assert_eq!(a.indices, b.indices);
        let c = draw_samples(&g, 0.5, 43);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn count_and_distinctness() {
        let g = Grid::isotropic(vec![100, 100]).unwrap();
        let s = draw_samples(&g, 0.1, 3);
        assert_eq!(s.len(), 1000);
        let mut uniq = s.indices.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 1000);
    }

    #[test]
    fn overlap_requires_all_images() {
        let g = Grid::isotropic(vec![2, 2]).unwrap();
        let mut s = draw_samples(&g, 1.0, 0);
        s.inside = vec![vec![true, true, false, true], vec![true, false, false, true]];
        assert_eq!(s.overlap_mask(), vec![true, false, false, true]);
    }
}

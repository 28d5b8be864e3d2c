//! Free-form deformation on a tensor-product cubic B-spline control mesh.

use serde::{Deserialize, Serialize};

use crate::density::{bspline3, bspline3_deriv};
use crate::grid::{Grid, Point, MAX_DIM};

use super::ParamJacobian;

/// Control-point lattice covering a physical bounding box with one extra
/// ring on every side so interior points always have full cubic support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfdMesh {
    pub dim: usize,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub shape: Vec<usize>,
}

impl FfdMesh {
    /// Mesh whose support covers `grid`'s bounding box; control points start
    /// one mesh spacing before the grid origin.
    pub fn covering(grid: &Grid, mesh_spacing: &[f64]) -> Self {
        let d = grid.ndim();
        let lo = grid.phys_min();
        let hi = grid.phys_max();
        let mut origin = vec![0.0; d];
        let mut shape = vec![0usize; d];
        for a in 0..d {
            let h = mesh_spacing[a];
            origin[a] = lo[a] - h;
            let extent = hi[a] - lo[a];
            // s ranges over [1, 1 + extent/h]; need indices floor(s)+2
            shape[a] = (extent / h + 1.0).floor() as usize + 3;
        }
        FfdMesh { dim: d, spacing: mesh_spacing[..d].to_vec(), origin, shape }
    }

    pub fn num_points(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn linear_index(&self, idx: &[isize]) -> Option<usize> {
        let mut lin = 0usize;
        for a in 0..self.dim {
            if idx[a] < 0 || idx[a] >= self.shape[a] as isize {
                return None;
            }
            lin = lin * self.shape[a] + idx[a] as usize;
        }
        Some(lin)
    }

    /// Physical position of a control point.
    pub fn point_at(&self, linear: usize) -> Point {
        let mut p = [0.0; MAX_DIM];
        let mut rem = linear;
        for a in (0..self.dim).rev() {
            let i = rem % self.shape[a];
            rem /= self.shape[a];
            p[a] = self.origin[a] + i as f64 * self.spacing[a];
        }
        p
    }
}

/// Cubic B-spline free-form deformation: `y = x + sum_c w_c(x) d_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ffd {
    pub mesh: FfdMesh,
    /// Control displacements, control-major with axis fastest:
    /// `displacements[c * dim + a]`.
    pub displacements: Vec<f64>,
}

impl Ffd {
    pub fn identity(mesh: FfdMesh) -> Self {
        let n = mesh.num_points() * mesh.dim;
        Ffd { mesh, displacements: vec![0.0; n] }
    }

    /// Support weights at `x`: up to `4^d` pairs of control index and
    /// tensor-product basis weight. Control points outside the lattice are
    /// skipped, which zero-pads the displacement field.
    pub fn support_weights(&self, x: &Point) -> Vec<(u32, f64)> {
        let d = self.mesh.dim;
        let mut base = [0isize; MAX_DIM];
        let mut w = [[0.0f64; 4]; MAX_DIM];
        for a in 0..d {
            let s = (x[a] - self.mesh.origin[a]) / self.mesh.spacing[a];
            let fl = s.floor();
            base[a] = fl as isize - 1;
            let t = s - fl;
            for m in 0..4 {
                w[a][m] = bspline3(t + 1.0 - m as f64);
            }
        }
        let mut out = Vec::with_capacity(1 << (2 * d));
        let combos = 4usize.pow(d as u32);
        let mut idx = [0isize; MAX_DIM];
        for combo in 0..combos {
            let mut rem = combo;
            let mut weight = 1.0;
            for a in 0..d {
                let m = rem % 4;
                rem /= 4;
                idx[a] = base[a] + m as isize;
                weight *= w[a][m];
            }
            if weight == 0.0 {
                continue;
            }
            if let Some(lin) = self.mesh.linear_index(&idx[..d]) {
                out.push((lin as u32, weight));
            }
        }
        out
    }

    pub fn apply(&self, x: &Point) -> Point {
        let d = self.mesh.dim;
        let mut y = *x;
        for (c, w) in self.support_weights(x) {
            let base = c as usize * d;
            for a in 0..d {
                y[a] += w * self.displacements[base + a];
            }
        }
        y
    }

    pub fn jacobian(&self, x: &Point) -> ParamJacobian {
        ParamJacobian::SparseFfd {
            dim: self.mesh.dim,
            n_params: self.displacements.len(),
            entries: self.support_weights(x),
        }
    }

    /// Largest control displacement magnitude.
    pub fn max_displacement(&self) -> f64 {
        let d = self.mesh.dim;
        self.displacements
            .chunks_exact(d)
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Thin-plate bending energy of the displacement field, averaged over
    /// interior mesh nodes, with its analytic parameter gradient.
    ///
    /// Second derivatives are evaluated analytically at node locations from
    /// the B-spline representation; mixed terms are counted twice.
    pub fn bending_energy(&self) -> (f64, Vec<f64>) {
        let d = self.mesh.dim;
        let shape = &self.mesh.shape;
        let mut grad = vec![0.0; self.displacements.len()];
        if shape.iter().any(|&n| n < 3) {
            return (0.0, grad);
        }
        // per-axis stencils over offsets {-1, 0, 1}
        let b0 = [bspline3(1.0), bspline3(0.0), bspline3(-1.0)];
        let mut b1 = [0.0; 3];
        let mut b2 = [0.0; 3];
        for (o, off) in (-1..=1).enumerate() {
            let s = -(off as f64);
            b1[o] = bspline3_deriv(s);
            b2[o] = bspline3_second_deriv(s);
        }
        // derivative axis pairs (p, q) with multiplicity
        let mut pairs = Vec::new();
        for p in 0..d {
            for q in p..d {
                pairs.push((p, q, if p == q { 1.0 } else { 2.0 }));
            }
        }
        let interior: Vec<std::ops::Range<isize>> =
            (0..d).map(|a| 1..(shape[a] as isize - 1)).collect();
        let n_interior: usize = interior.iter().map(|r| (r.end - r.start) as usize).product();
        if n_interior == 0 {
            return (0.0, grad);
        }
        let norm = 1.0 / n_interior as f64;
        let mut value = 0.0;
        let mut node = [0isize; MAX_DIM];
        let mut offs = [0isize; MAX_DIM];
        // iterate interior nodes
        let mut cursor = vec![0usize; d];
        let counts: Vec<usize> = interior.iter().map(|r| (r.end - r.start) as usize).collect();
        'outer: loop {
            for a in 0..d {
                node[a] = interior[a].start + cursor[a] as isize;
            }
            for &(p, q, mult) in &pairs {
                // Hessian entry per displacement axis
                let mut h = [0.0f64; MAX_DIM];
                for combo in 0..3usize.pow(d as u32) {
                    let mut rem = combo;
                    let mut w = 1.0;
                    for a in 0..d {
                        let o = rem % 3;
                        rem /= 3;
                        offs[a] = o as isize - 1;
                        let stencil = if a == p && a == q {
                            b2[o] / (self.mesh.spacing[a] * self.mesh.spacing[a])
                        } else if a == p || a == q {
                            b1[o] / self.mesh.spacing[a]
                        } else {
                            b0[o]
                        };
                        w *= stencil;
                    }
                    if w == 0.0 {
                        continue;
                    }
                    let mut idx = [0isize; MAX_DIM];
                    for a in 0..d {
                        idx[a] = node[a] + offs[a];
                    }
                    if let Some(lin) = self.mesh.linear_index(&idx[..d]) {
                        for a in 0..d {
                            h[a] += w * self.displacements[lin * d + a];
                        }
                    }
                }
                for ha in h.iter().take(d) {
                    value += mult * ha * ha * norm;
                }
                // gradient scatter: d(value)/d(disp) = 2 mult h * stencil
                for combo in 0..3usize.pow(d as u32) {
                    let mut rem = combo;
                    let mut w = 1.0;
                    for a in 0..d {
                        let o = rem % 3;
                        rem /= 3;
                        offs[a] = o as isize - 1;
                        let stencil = if a == p && a == q {
                            b2[o] / (self.mesh.spacing[a] * self.mesh.spacing[a])
                        } else if a == p || a == q {
                            b1[o] / self.mesh.spacing[a]
                        } else {
                            b0[o]
                        };
                        w *= stencil;
                    }
                    if w == 0.0 {
                        continue;
                    }
                    let mut idx = [0isize; MAX_DIM];
                    for a in 0..d {
                        idx[a] = node[a] + offs[a];
                    }
                    if let Some(lin) = self.mesh.linear_index(&idx[..d]) {
                        for a in 0..d {
                            grad[lin * d + a] += 2.0 * mult * h[a] * w * norm;
                        }
                    }
                }
            }
            // advance cursor
            for a in (0..d).rev() {
                cursor[a] += 1;
                if cursor[a] < counts[a] {
                    continue 'outer;
                }
                cursor[a] = 0;
                if a == 0 {
                    break 'outer;
                }
            }
        }
        (value, grad)
    }
}

/// Second derivative of the centered cubic B-spline.
fn bspline3_second_deriv(s: f64) -> f64 {
    let a = s.abs();
    if a < 1.0 {
        3.0 * a - 2.0
    } else if a < 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{jacobian_fd, Transform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_mesh() -> FfdMesh {
        let grid = Grid::isotropic(vec![9, 9]).unwrap();
        FfdMesh::covering(&grid, &[4.0, 4.0])
    }

    #[test]
    fn mesh_covers_grid_with_full_support() {
        let grid = Grid::isotropic(vec![9, 9]).unwrap();
        let mesh = FfdMesh::covering(&grid, &[4.0, 4.0]);
        assert_eq!(mesh.origin, vec![-4.0, -4.0]);
        // extent 8, h 4: floor(8/4 + 1) + 3 = 6 control points per axis
        assert_eq!(mesh.shape, vec![6, 6]);
        let ffd = Ffd::identity(mesh);
        for i in 0..grid.len() {
            let p = grid.point_at(i);
            let w: f64 = ffd.support_weights(&p).iter().map(|(_, w)| w).sum();
            assert!((w - 1.0).abs() < 1e-12, "partition of unity at {p:?}");
            assert!(ffd.support_weights(&p).len() <= 16);
        }
    }

    #[test]
    fn zero_displacements_are_identity() {
        let ffd = Ffd::identity(small_mesh());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0), 0.0];
            let y = ffd.apply(&x);
            assert!((y[0] - x[0]).abs() < 1e-15 && (y[1] - x[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn node_derivative_is_kernel_power() {
        let mesh = small_mesh();
        let ffd = Ffd::identity(mesh.clone());
        // x exactly at a control point: weight of that control point is (2/3)^d
        let c = mesh.linear_index(&[2, 3]).unwrap();
        let p = mesh.point_at(c);
        let weights = ffd.support_weights(&p);
        let w = weights.iter().find(|(i, _)| *i as usize == c).unwrap().1;
        assert!((w - (2.0f64 / 3.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mesh = small_mesh();
        let mut ffd = Ffd::identity(mesh);
        for v in &mut ffd.displacements {
            *v = rng.gen_range(-0.5..0.5);
        }
        let t = Transform::Ffd(ffd);
        for _ in 0..5 {
            let x = [rng.gen_range(0.5..7.5), rng.gen_range(0.5..7.5), 0.0];
            let analytic = t.jacobian_wrt_params(&x).to_dense();
            let fd = jacobian_fd(&t, &x, 1e-5);
            for (a, f) in analytic.iter().zip(&fd) {
                assert!((a - f).abs() < 1e-7, "{a} vs {f}");
            }
        }
    }

    #[test]
    fn bending_energy_vanishes_for_zero_and_affine_fields() {
        let mesh = small_mesh();
        let ffd = Ffd::identity(mesh.clone());
        let (v, g) = ffd.bending_energy();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));

        // affine displacement field: d(p) = M p + c at every control point
        let mut aff = Ffd::identity(mesh.clone());
        for c in 0..mesh.num_points() {
            let p = mesh.point_at(c);
            aff.displacements[c * 2] = 0.3 * p[0] - 0.1 * p[1] + 2.0;
            aff.displacements[c * 2 + 1] = 0.05 * p[0] + 0.2 * p[1] - 1.0;
        }
        let (v, _) = aff.bending_energy();
        assert!(v.abs() < 1e-10, "affine field energy {v}");
    }

    #[test]
    fn bending_energy_ignores_global_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ffd = Ffd::identity(small_mesh());
        for v in &mut ffd.displacements {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (v0, _) = ffd.bending_energy();
        for c in 0..ffd.mesh.num_points() {
            ffd.displacements[c * 2] += 5.0;
            ffd.displacements[c * 2 + 1] -= 3.0;
        }
        let (v1, _) = ffd.bending_energy();
        assert!((v0 - v1).abs() < 1e-9 * v0.max(1.0));
    }

    #[test]
    fn bending_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut ffd = Ffd::identity(small_mesh());
        for v in &mut ffd.displacements {
            *v = rng.gen_range(-0.2..0.2);
        }
        let (_, grad) = ffd.bending_energy();
        let h = 1e-6;
        for p in (0..ffd.displacements.len()).step_by(7) {
            let mut hi = ffd.clone();
            hi.displacements[p] += h;
            let mut lo = ffd.clone();
            lo.displacements[p] -= h;
            let fd = (hi.bending_energy().0 - lo.bending_energy().0) / (2.0 * h);
            let rel = (grad[p] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "param {p}: {} vs {fd}", grad[p]);
        }
    }
}

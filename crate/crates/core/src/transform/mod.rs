//! Parametric spatial transforms from common space to image space.
//!
//! Every kind exposes a flat parameter vector, an exact analytic Jacobian of
//! the mapped point with respect to those parameters, and JSON serialization
//! with lossless float round trips.

mod ffd;
mod group;

pub use ffd::{Ffd, FfdMesh};
pub use group::TransformGroup;

use serde::{Deserialize, Serialize};

use crate::grid::{Point, MAX_DIM};

/// Translation by a physical offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub dim: usize,
    pub offset: Vec<f64>,
}

impl Translation {
    pub fn zero(dim: usize) -> Self {
        Translation { dim, offset: vec![0.0; dim] }
    }

    pub fn new(offset: Vec<f64>) -> Self {
        Translation { dim: offset.len(), offset }
    }
}

/// Rigid map: rotation about `center` applied after translation,
/// `y = R (x + offset - center) + center`.
///
/// Angles are radians; 3D uses extrinsic x -> y -> z order. The parameter
/// vector is `[center, angles, offset]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub dim: usize,
    pub center: Vec<f64>,
    pub angles: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Rigid {
    pub fn identity(dim: usize, center: &[f64]) -> Self {
        let n_angles = if dim == 2 { 1 } else { 3 };
        Rigid {
            dim,
            center: center[..dim].to_vec(),
            angles: vec![0.0; n_angles],
            offset: vec![0.0; dim],
        }
    }

    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    /// Rotation matrix (row-major d x d).
    pub fn rotation(&self) -> Vec<f64> {
        rotation_matrix(self.dim, &self.angles)
    }
}

/// General affine map `y = A x + b` with `A` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for a in 0..dim {
            matrix[a * dim + a] = 1.0;
        }
        Affine { dim, matrix, offset: vec![0.0; dim] }
    }

    pub fn determinant(&self) -> f64 {
        match self.dim {
            2 => self.matrix[0] * self.matrix[3] - self.matrix[1] * self.matrix[2],
            _ => {
                let m = &self.matrix;
                m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                    + m[2] * (m[3] * m[7] - m[4] * m[6])
            }
        }
    }
}

/// Evaluation-order composition: `outer` applied after `inner`. Parameters
/// are the outer transform's; the inner map is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composed {
    pub outer: Transform,
    pub inner: Transform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    Translation(Translation),
    Rigid(Rigid),
    Affine(Affine),
    Ffd(Ffd),
    Composed(Box<Composed>),
}

/// Jacobian of the mapped point with respect to the parameter vector.
pub enum ParamJacobian {
    /// Row-major `dim x n_params`.
    Dense { dim: usize, n_params: usize, data: Vec<f64> },
    /// Free-form deformation: per control point `c` in `entries`, the block
    /// d(y)/d(displacement of c) equals `w * I`.
    SparseFfd { dim: usize, n_params: usize, entries: Vec<(u32, f64)> },
}

impl ParamJacobian {
    pub fn n_params(&self) -> usize {
        match self {
            ParamJacobian::Dense { n_params, .. } => *n_params,
            ParamJacobian::SparseFfd { n_params, .. } => *n_params,
        }
    }

    /// Accumulate `out += row^T * J` for a row vector of length `dim`.
    pub fn accumulate(&self, row: &[f64], out: &mut [f64]) {
        match self {
            ParamJacobian::Dense { dim, n_params, data } => {
                for a in 0..*dim {
                    let r = row[a];
                    if r == 0.0 {
                        continue;
                    }
                    let start = a * n_params;
                    for p in 0..*n_params {
                        out[p] += r * data[start + p];
                    }
                }
            }
            ParamJacobian::SparseFfd { dim, entries, .. } => {
                for &(c, w) in entries {
                    let base = c as usize * dim;
                    for a in 0..*dim {
                        out[base + a] += w * row[a];
                    }
                }
            }
        }
    }

    /// Densify (test helper for finite-difference checks).
    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            ParamJacobian::Dense { data, .. } => data.clone(),
            ParamJacobian::SparseFfd { dim, n_params, entries } => {
                let mut out = vec![0.0; dim * n_params];
                for &(c, w) in entries {
                    for a in 0..*dim {
                        out[a * n_params + c as usize * dim + a] = w;
                    }
                }
                out
            }
        }
    }
}

fn rotation_matrix(dim: usize, angles: &[f64]) -> Vec<f64> {
    match dim {
        2 => {
            let (s, c) = angles[0].sin_cos();
            vec![c, -s, s, c]
        }
        3 => {
            let (sx, cx) = angles[0].sin_cos();
            let (sy, cy) = angles[1].sin_cos();
            let (sz, cz) = angles[2].sin_cos();
            let rx = [1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx];
            let ry = [cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy];
            let rz = [cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0];
            mat_mul3(&mat_mul3(&rz, &ry), &rx).to_vec()
        }
        _ => unreachable!("unsupported dimension"),
    }
}

/// Derivative of the rotation matrix with respect to angle `i`.
fn rotation_matrix_deriv(dim: usize, angles: &[f64], i: usize) -> Vec<f64> {
    match dim {
        2 => {
            let (s, c) = angles[0].sin_cos();
            vec![-s, -c, c, -s]
        }
        3 => {
            let (sx, cx) = angles[0].sin_cos();
            let (sy, cy) = angles[1].sin_cos();
            let (sz, cz) = angles[2].sin_cos();
            let rx = [1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx];
            let ry = [cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy];
            let rz = [cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0];
            let dx = [0.0, 0.0, 0.0, 0.0, -sx, -cx, 0.0, cx, -sx];
            let dy = [-sy, 0.0, cy, 0.0, 0.0, 0.0, -cy, 0.0, -sy];
            let dz = [-sz, -cz, 0.0, cz, -sz, 0.0, 0.0, 0.0, 0.0];
            let m = match i {
                0 => mat_mul3(&mat_mul3(&rz, &ry), &dx),
                1 => mat_mul3(&mat_mul3(&rz, &dy), &rx),
                _ => mat_mul3(&mat_mul3(&dz, &ry), &rx),
            };
            m.to_vec()
        }
        _ => unreachable!(),
    }
}

fn mat_mul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

impl Transform {
    pub fn ndim(&self) -> usize {
        match self {
            Transform::Translation(t) => t.dim,
            Transform::Rigid(t) => t.dim,
            Transform::Affine(t) => t.dim,
            Transform::Ffd(t) => t.mesh.dim,
            Transform::Composed(c) => c.outer.ndim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Transform::Translation(_) => "translation",
            Transform::Rigid(_) => "rigid",
            Transform::Affine(_) => "affine",
            Transform::Ffd(_) => "ffd",
            Transform::Composed(_) => "composed",
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Transform::Translation(t) => t.dim,
            Transform::Rigid(t) => 2 * t.dim + t.num_angles(),
            Transform::Affine(t) => t.dim * t.dim + t.dim,
            Transform::Ffd(t) => t.displacements.len(),
            Transform::Composed(c) => c.outer.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Transform::Translation(t) => t.offset.clone(),
            Transform::Rigid(t) => {
                let mut p = t.center.clone();
                p.extend_from_slice(&t.angles);
                p.extend_from_slice(&t.offset);
                p
            }
            Transform::Affine(t) => {
                let mut p = t.matrix.clone();
                p.extend_from_slice(&t.offset);
                p
            }
            Transform::Ffd(t) => t.displacements.clone(),
            Transform::Composed(c) => c.outer.params(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        debug_assert_eq!(p.len(), self.num_params());
        match self {
            Transform::Translation(t) => t.offset.copy_from_slice(p),
            Transform::Rigid(t) => {
                let d = t.dim;
                let na = t.num_angles();
                t.center.copy_from_slice(&p[..d]);
                t.angles.copy_from_slice(&p[d..d + na]);
                t.offset.copy_from_slice(&p[d + na..]);
            }
            Transform::Affine(t) => {
                let d2 = t.dim * t.dim;
                t.matrix.copy_from_slice(&p[..d2]);
                t.offset.copy_from_slice(&p[d2..]);
            }
            Transform::Ffd(t) => t.displacements.copy_from_slice(p),
            Transform::Composed(c) => c.outer.set_params(p),
        }
    }

    pub fn apply(&self, x: &Point) -> Point {
        match self {
            Transform::Translation(t) => {
                let mut y = *x;
                for a in 0..t.dim {
                    y[a] += t.offset[a];
                }
                y
            }
            Transform::Rigid(t) => {
                let d = t.dim;
                let r = t.rotation();
                let mut v = [0.0; MAX_DIM];
                for a in 0..d {
                    v[a] = x[a] + t.offset[a] - t.center[a];
                }
                let mut y = [0.0; MAX_DIM];
                for a in 0..d {
                    let mut acc = t.center[a];
                    for b in 0..d {
                        acc += r[a * d + b] * v[b];
                    }
                    y[a] = acc;
                }
                y
            }
            Transform::Affine(t) => {
                let d = t.dim;
                let mut y = [0.0; MAX_DIM];
                for a in 0..d {
                    let mut acc = t.offset[a];
                    for b in 0..d {
                        acc += t.matrix[a * d + b] * x[b];
                    }
                    y[a] = acc;
                }
                y
            }
            Transform::Ffd(t) => t.apply(x),
            Transform::Composed(c) => c.outer.apply(&c.inner.apply(x)),
        }
    }

    /// Exact analytic `d apply(x) / d params` at `x`.
    pub fn jacobian_wrt_params(&self, x: &Point) -> ParamJacobian {
        match self {
            Transform::Translation(t) => {
                let d = t.dim;
                let mut data = vec![0.0; d * d];
                for a in 0..d {
                    data[a * d + a] = 1.0;
                }
                ParamJacobian::Dense { dim: d, n_params: d, data }
            }
            Transform::Rigid(t) => {
                let d = t.dim;
                let na = t.num_angles();
                let n = 2 * d + na;
                let r = t.rotation();
                let mut v = [0.0; MAX_DIM];
                for a in 0..d {
                    v[a] = x[a] + t.offset[a] - t.center[a];
                }
                let mut data = vec![0.0; d * n];
                for a in 0..d {
                    // d/d center = I - R
                    for b in 0..d {
                        data[a * n + b] = -r[a * d + b];
                    }
                    data[a * n + a] += 1.0;
                    // d/d angles
                    for i in 0..na {
                        let dr = rotation_matrix_deriv(d, &t.angles, i);
                        let mut acc = 0.0;
                        for b in 0..d {
                            acc += dr[a * d + b] * v[b];
                        }
                        data[a * n + d + i] = acc;
                    }
                    // d/d offset = R
                    for b in 0..d {
                        data[a * n + d + na + b] = r[a * d + b];
                    }
                }
                ParamJacobian::Dense { dim: d, n_params: n, data }
            }
            Transform::Affine(t) => {
                let d = t.dim;
                let n = d * d + d;
                let mut data = vec![0.0; d * n];
                for a in 0..d {
                    for b in 0..d {
                        data[a * n + a * d + b] = x[b];
                    }
                    data[a * n + d * d + a] = 1.0;
                }
                ParamJacobian::Dense { dim: d, n_params: n, data }
            }
            Transform::Ffd(t) => t.jacobian(x),
            Transform::Composed(c) => c.outer.jacobian_wrt_params(&c.inner.apply(x)),
        }
    }

    /// Affine representation `(A, b)` for linear kinds.
    pub fn affine_form(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let d = self.ndim();
        match self {
            Transform::Translation(t) => {
                let mut m = vec![0.0; d * d];
                for a in 0..d {
                    m[a * d + a] = 1.0;
                }
                Some((m, t.offset.clone()))
            }
            Transform::Rigid(t) => {
                // y = R x + (R (offset - center) + center)
                let r = t.rotation();
                let mut b = vec![0.0; d];
                for a in 0..d {
                    let mut acc = t.center[a];
                    for c in 0..d {
                        acc += r[a * d + c] * (t.offset[c] - t.center[c]);
                    }
                    b[a] = acc;
                }
                Some((r, b))
            }
            Transform::Affine(t) => Some((t.matrix.clone(), t.offset.clone())),
            _ => None,
        }
    }
}

/// Evaluate `a(b(x))` without attempting parametric composition.
pub fn compose_eval(a: &Transform, b: &Transform, x: &Point) -> Point {
    a.apply(&b.apply(x))
}

#[cfg(test)]
pub(crate) fn jacobian_fd(t: &Transform, x: &Point, step: f64) -> Vec<f64> {
    let d = t.ndim();
    let n = t.num_params();
    let base = t.params();
    let mut out = vec![0.0; d * n];
    for p in 0..n {
        let mut hi = t.clone();
        let mut lo = t.clone();
        let mut ph = base.clone();
        let mut pl = base.clone();
        ph[p] += step;
        pl[p] -= step;
        hi.set_params(&ph);
        lo.set_params(&pl);
        let yh = hi.apply(x);
        let yl = lo.apply(x);
        for a in 0..d {
            out[a * n + p] = (yh[a] - yl[a]) / (2.0 * step);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_jacobian_matches_fd(t: &Transform, x: &Point, tol: f64) {
        let analytic = t.jacobian_wrt_params(x).to_dense();
        let fd = jacobian_fd(t, x, 1e-5);
        for (a, f) in analytic.iter().zip(&fd) {
            let rel = (a - f).abs() / f.abs().max(1e-6);
            assert!(rel < tol, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn identity_transforms_fix_points() {
        let x = [1.5, -2.0, 0.7];
        let t2 = Transform::Translation(Translation::zero(2));
        assert_eq!(t2.apply(&x)[..2], x[..2]);
        let r3 = Transform::Rigid(Rigid::identity(3, &[5.0, 5.0, 5.0]));
        let y = r3.apply(&x);
        for a in 0..3 {
            assert!((y[a] - x[a]).abs() < 1e-15);
        }
        let a2 = Transform::Affine(Affine::identity(2));
        assert_eq!(a2.apply(&x)[..2], x[..2]);
    }

    #[test]
    fn translation_moves_origin() {
        let t = Transform::Translation(Translation::new(vec![2.0, -1.0]));
        let y = t.apply(&[0.0, 0.0, 0.0]);
        assert_eq!(y[0], 2.0);
        assert_eq!(y[1], -1.0);
    }

    #[test]
    fn quarter_turn_about_origin() {
        let t = Transform::Rigid(Rigid {
            dim: 2,
            center: vec![0.0, 0.0],
            angles: vec![std::f64::consts::FRAC_PI_2],
            offset: vec![0.0, 0.0],
        });
        let y = t.apply(&[1.0, 0.0, 0.0]);
        assert!((y[0] - 0.0).abs() < 1e-12);
        assert!((y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_is_applied_after_translation() {
        // y = R (x + t - c) + c
        let t = Transform::Rigid(Rigid {
            dim: 2,
            center: vec![1.0, 1.0],
            angles: vec![std::f64::consts::FRAC_PI_2],
            offset: vec![1.0, 0.0],
        });
        // x = (0,1): x + t - c = (0,0) -> y = c
        let y = t.apply(&[0.0, 1.0, 0.0]);
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translation_jacobian_is_identity() {
        let t = Transform::Translation(Translation::new(vec![3.0, 4.0]));
        let j = t.jacobian_wrt_params(&[7.0, -2.0, 0.0]).to_dense();
        assert_eq!(j, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..50 {
            let dim = if case % 2 == 0 { 2 } else { 3 };
            let x = [
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                if dim == 3 { rng.gen_range(-5.0..5.0) } else { 0.0 },
            ];
            let t = match case % 3 {
                0 => Transform::Rigid(Rigid {
                    dim,
                    center: (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                    angles: (0..if dim == 2 { 1 } else { 3 })
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect(),
                    offset: (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                }),
                1 => Transform::Affine(Affine {
                    dim,
                    matrix: (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    offset: (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                }),
                _ => Transform::Translation(Translation::new(
                    (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                )),
            };
            assert_jacobian_matches_fd(&t, &x, 1e-6);
        }
    }

    #[test]
    fn compose_eval_respects_identity_and_inverse() {
        let id = Transform::Affine(Affine::identity(2));
        let t = Transform::Rigid(Rigid {
            dim: 2,
            center: vec![0.5, -0.5],
            angles: vec![0.7],
            offset: vec![2.0, 3.0],
        });
        let x = [1.2, 0.3, 0.0];
        let via_a = compose_eval(&t, &id, &x);
        let via_b = compose_eval(&id, &t, &x);
        let direct = t.apply(&x);
        for a in 0..2 {
            assert!((via_a[a] - direct[a]).abs() < 1e-15);
            assert!((via_b[a] - direct[a]).abs() < 1e-15);
        }
        // inverse rigid pair in 2D: R' = R^T via negated angle, offset -R t
        let (s, c) = (0.7f64).sin_cos();
        let rt = |vx: f64, vy: f64| (c * vx + s * vy, -s * vx + c * vy);
        let (ox, oy) = rt(-2.0, -3.0);
        let inv = Transform::Rigid(Rigid {
            dim: 2,
            center: vec![0.5, -0.5],
            angles: vec![-0.7],
            offset: vec![-(c * 2.0 - s * 3.0), -(s * 2.0 + c * 3.0)],
        });
        let _ = (ox, oy);
        let y = compose_eval(&inv, &t, &x);
        for a in 0..2 {
            assert!((y[a] - x[a]).abs() < 1e-10, "axis {a}: {} vs {}", y[a], x[a]);
        }
    }

    #[test]
    fn affine_form_matches_apply() {
        let t = Transform::Rigid(Rigid {
            dim: 3,
            center: vec![1.0, 2.0, 3.0],
            angles: vec![0.3, -0.2, 0.5],
            offset: vec![4.0, -1.0, 0.5],
        });
        let (m, b) = t.affine_form().unwrap();
        let x = [0.7, -0.3, 1.9];
        let y = t.apply(&x);
        for a in 0..3 {
            let mut acc = b[a];
            for c in 0..3 {
                acc += m[a * 3 + c] * x[c];
            }
            assert!((acc - y[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let t = Transform::Rigid(Rigid {
            dim: 2,
            center: vec![0.1 + 0.2, -1.0 / 3.0],
            angles: vec![std::f64::consts::PI / 7.0],
            offset: vec![1e-17, 2.5e300],
        });
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"kind\":\"rigid\""));
        let back: Transform = serde_json::from_str(&s).unwrap();
        let (p1, p2) = (t.params(), back.params());
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

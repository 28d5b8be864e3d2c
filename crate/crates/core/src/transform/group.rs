//! Groups of per-image transforms and the unbiased zero-mean constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Point, MAX_DIM};

use super::{Affine, ParamJacobian, Transform};

/// Affine displacement field `x -> M x + b` subtracted from member outputs
/// when the members themselves cannot absorb the group mean (rigid/affine
/// kinds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCorrection {
    pub dim: usize,
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineCorrection {
    fn displacement(&self, x: &Point) -> Point {
        let d = self.dim;
        let mut out = [0.0; MAX_DIM];
        for a in 0..d {
            let mut acc = self.offset[a];
            for b in 0..d {
                acc += self.matrix[a * d + b] * x[b];
            }
            out[a] = acc;
        }
        out
    }

    fn is_zero(&self) -> bool {
        self.matrix.iter().all(|&v| v == 0.0) && self.offset.iter().all(|&v| v == 0.0)
    }
}

/// A set of per-image transforms of homogeneous kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformGroup {
    pub members: Vec<Transform>,
    pub zero_mean: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    correction: Option<AffineCorrection>,
}

impl TransformGroup {
    pub fn new(members: Vec<Transform>, zero_mean: bool) -> Self {
        TransformGroup { members, zero_mean, correction: None }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.members[0].ndim()
    }

    fn check_homogeneous(&self) -> Result<&'static str> {
        let kind = self.members[0].kind_name();
        for m in &self.members[1..] {
            if m.kind_name() != kind {
                return Err(Error::HeterogeneousKinds(kind, m.kind_name()));
            }
        }
        Ok(kind)
    }

    /// Effective map of member `j` (member output minus group correction).
    pub fn apply(&self, j: usize, x: &Point) -> Point {
        let mut y = self.members[j].apply(x);
        if let Some(corr) = &self.correction {
            let disp = corr.displacement(x);
            for a in 0..corr.dim {
                y[a] -= disp[a];
            }
        }
        y
    }

    /// Jacobian of the effective map with respect to member `j`'s parameters.
    /// The correction does not depend on them.
    pub fn jacobian(&self, j: usize, x: &Point) -> ParamJacobian {
        self.members[j].jacobian_wrt_params(x)
    }

    /// Mean displacement of the effective maps at `x`.
    pub fn mean_displacement(&self, x: &Point) -> Point {
        let d = self.ndim();
        let n = self.len() as f64;
        let mut m = [0.0; MAX_DIM];
        for j in 0..self.len() {
            let y = self.apply(j, x);
            for a in 0..d {
                m[a] += (y[a] - x[a]) / n;
            }
        }
        m
    }

    /// Standalone transform equal to the effective map of member `j`.
    ///
    /// Members of linear kind fold a nonzero correction into an exact affine
    /// map; other kinds carry no correction by construction.
    pub fn effective(&self, j: usize) -> Transform {
        match &self.correction {
            None => self.members[j].clone(),
            Some(corr) if corr.is_zero() => self.members[j].clone(),
            Some(corr) => {
                let d = corr.dim;
                let (m, b) = self
                    .members[j]
                    .affine_form()
                    .expect("correction only applies to linear kinds");
                let mut matrix = m;
                let mut offset = b;
                for a in 0..d {
                    for c in 0..d {
                        matrix[a * d + c] -= corr.matrix[a * d + c];
                    }
                    offset[a] -= corr.offset[a];
                }
                Transform::Affine(Affine { dim: d, matrix, offset })
            }
        }
    }

    /// Project the group onto the zero-mean constraint: after this call the
    /// mean of the effective maps is the identity.
    ///
    /// Translation and FFD groups subtract the parameter mean exactly; rigid
    /// and affine groups accumulate the (affine) mean displacement into the
    /// group correction. Idempotent, and pairwise relative displacements are
    /// preserved.
    pub fn project_zero_mean(&mut self) -> Result<()> {
        let kind = self.check_homogeneous()?;
        let n = self.len();
        if n == 0 {
            return Ok(());
        }
        let d = self.ndim();
        match kind {
            "translation" => {
                let mut mean = vec![0.0; d];
                for m in &self.members {
                    if let Transform::Translation(t) = m {
                        for a in 0..d {
                            mean[a] += t.offset[a] / n as f64;
                        }
                    }
                }
                for m in &mut self.members {
                    if let Transform::Translation(t) = m {
                        for a in 0..d {
                            t.offset[a] -= mean[a];
                        }
                    }
                }
            }
            "ffd" => {
                let mesh = match &self.members[0] {
                    Transform::Ffd(f) => f.mesh.clone(),
                    _ => unreachable!(),
                };
                for m in &self.members {
                    if let Transform::Ffd(f) = m {
                        if f.mesh != mesh {
                            return Err(Error::MeshMismatch);
                        }
                    }
                }
                let len = mesh.num_points() * d;
                let mut mean = vec![0.0; len];
                for m in &self.members {
                    if let Transform::Ffd(f) = m {
                        for (acc, &v) in mean.iter_mut().zip(&f.displacements) {
                            *acc += v / n as f64;
                        }
                    }
                }
                for m in &mut self.members {
                    if let Transform::Ffd(f) = m {
                        for (v, &mu) in f.displacements.iter_mut().zip(&mean) {
                            *v -= mu;
                        }
                    }
                }
            }
            "rigid" | "affine" => {
                // mean of member affine forms; the new correction is exactly
                // mean(A) - I, mean(b), independent of the previous one
                let mut mat = vec![0.0; d * d];
                let mut off = vec![0.0; d];
                for m in &self.members {
                    let (a, b) = m.affine_form().expect("linear kind");
                    for (acc, v) in mat.iter_mut().zip(&a) {
                        *acc += v / n as f64;
                    }
                    for (acc, v) in off.iter_mut().zip(&b) {
                        *acc += v / n as f64;
                    }
                }
                for a in 0..d {
                    mat[a * d + a] -= 1.0;
                }
                self.correction = Some(AffineCorrection { dim: d, matrix: mat, offset: off });
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "zero-mean projection is not defined for '{other}' members"
                )))
            }
        }
        Ok(())
    }

    /// Concatenated parameter vector over all members.
    pub fn params_concat(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for m in &self.members {
            p.extend(m.params());
        }
        p
    }

    pub fn set_params_concat(&mut self, p: &[f64]) {
        let mut at = 0;
        for m in &mut self.members {
            let n = m.num_params();
            m.set_params(&p[at..at + n]);
            at += n;
        }
        debug_assert_eq!(at, p.len());
    }

    pub fn num_params_total(&self) -> usize {
        self.members.iter().map(|m| m.num_params()).sum()
    }
}

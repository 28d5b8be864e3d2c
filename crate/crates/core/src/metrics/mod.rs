//! Groupwise similarity metrics over a shared resampling context.
//!
//! All metrics are maximized. A [`MetricContext`] is built once per
//! iteration — warped intensities, spatial gradients and transform
//! Jacobians at the drawn samples — and every metric consumes the same
//! context, so one resampling pass serves any metric.

mod ape;
mod congealing;
mod cte;
mod gmm;
mod vi;
mod xmetric;

pub use ape::{ape, num_pairs};
pub use congealing::{congealing, CongealingValue, RECOMMENDED_MIN_IMAGES};
pub use cte::{cte, fit_projection, CteProjection};
pub use gmm::{gmm_em_step, gmm_init, gmm_loglik, GmmModel};
pub use vi::vi;
pub use xmetric::{class_marginal_entropy, xmetric, xmetric_value};

use crate::density::Binning;
use crate::error::{Error, Result};
use crate::grid::{Point, MAX_DIM};
use crate::sample::SampleSet;
use crate::transform::{ParamJacobian, TransformGroup};
use crate::volume::Volume;

/// Metric selection keys accepted by configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    XMetric,
    XMetricGt,
    Congealing,
    Ape,
    Cte,
    Vi,
    Gmm,
}

impl MetricKind {
    pub fn parse(key: &str) -> Result<Self> {
        Ok(match key {
            "xmetric" => MetricKind::XMetric,
            "xmetric-gt" => MetricKind::XMetricGt,
            "cg" => MetricKind::Congealing,
            "ape" => MetricKind::Ape,
            "cte" => MetricKind::Cte,
            "vi" => MetricKind::Vi,
            "gmm" => MetricKind::Gmm,
            other => return Err(Error::UnknownMetric(other.to_string())),
        })
    }

    pub fn key(&self) -> &'static str {
        match self {
            MetricKind::XMetric => "xmetric",
            MetricKind::XMetricGt => "xmetric-gt",
            MetricKind::Congealing => "cg",
            MetricKind::Ape => "ape",
            MetricKind::Cte => "cte",
            MetricKind::Vi => "vi",
            MetricKind::Gmm => "gmm",
        }
    }
}

/// Metric value together with its gradient over the concatenated parameter
/// vectors of the transform group being optimized.
#[derive(Debug, Clone)]
pub struct MetricValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl MetricValue {
    pub fn value_only(value: f64) -> Self {
        MetricValue { value, gradient: Vec::new() }
    }

    pub fn grad_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Per-iteration resampling products shared by all metrics.
pub struct MetricContext {
    pub dim: usize,
    pub num_images: usize,
    pub num_samples: usize,
    /// Common-space sample points.
    pub points: Vec<Point>,
    /// `values[j][s]`: warped intensity of image j at sample s (0 outside).
    pub values: Vec<Vec<f64>>,
    /// `grads[j][s]`: spatial gradient of image j at its warped position.
    pub grads: Vec<Vec<Point>>,
    /// `inside[j][s]`.
    pub inside: Vec<Vec<bool>>,
    /// Samples inside every image.
    pub overlap: Vec<bool>,
    pub num_overlap: usize,
    /// Per-image, per-sample transform Jacobians (empty when built without
    /// gradients).
    pub jacobians: Vec<Vec<ParamJacobian>>,
    /// Per-image intensity binning, frozen from the unwarped volumes.
    pub binnings: Vec<Binning>,
    /// Start of image j's block in the concatenated parameter vector.
    pub param_offsets: Vec<usize>,
    pub total_params: usize,
}

impl MetricContext {
    /// Indices of overlap samples.
    pub fn overlap_indices(&self) -> Vec<usize> {
        (0..self.num_samples).filter(|&s| self.overlap[s]).collect()
    }

    /// Bin coordinates of image j's warped intensities at overlap samples.
    pub fn overlap_coords(&self, j: usize) -> Vec<f64> {
        let b = &self.binnings[j];
        self.values[j]
            .iter()
            .zip(&self.overlap)
            .filter(|(_, &o)| o)
            .map(|(&u, _)| b.coord(u))
            .collect()
    }

    /// Fold per-sample intensity derivatives into a parameter gradient:
    /// `grad += dV/du * (image spatial gradient)^T * (transform Jacobian)`.
    pub fn fold_gradient(&self, dvdu: &[Vec<f64>]) -> Vec<f64> {
        let mut grad = vec![0.0; self.total_params];
        for j in 0..self.num_images {
            if self.jacobians[j].is_empty() {
                continue;
            }
            let off = self.param_offsets[j];
            let n_par = self.jacobians[j][0].n_params();
            let out = &mut grad[off..off + n_par];
            for s in 0..self.num_samples {
                if !self.overlap[s] {
                    continue;
                }
                let d = dvdu[j][s];
                if d == 0.0 {
                    continue;
                }
                let g = &self.grads[j][s];
                let mut row = [0.0; MAX_DIM];
                for a in 0..self.dim {
                    row[a] = d * g[a];
                }
                self.jacobians[j][s].accumulate(&row[..self.dim], out);
            }
        }
        grad
    }
}

/// Resample every image through its transform at the sample points.
///
/// `base` optionally supplies frozen inner maps evaluated before the group's
/// members (staged pipelines); Jacobians refer to the group's parameters.
pub fn build_metric_context(
    volumes: &[Volume],
    group: &TransformGroup,
    base: Option<&TransformGroup>,
    samples: &SampleSet,
    binnings: &[Binning],
    with_jacobians: bool,
) -> MetricContext {
    let num_images = volumes.len();
    let dim = volumes[0].grid().ndim();
    let n = samples.len();
    let mut values = Vec::with_capacity(num_images);
    let mut grads = Vec::with_capacity(num_images);
    let mut inside = Vec::with_capacity(num_images);
    let mut jacobians = Vec::with_capacity(num_images);
    let mut param_offsets = Vec::with_capacity(num_images);
    let mut total_params = 0;
    for j in 0..num_images {
        let mut vals = vec![0.0; n];
        let mut grs = vec![[0.0; MAX_DIM]; n];
        let mut ins = vec![false; n];
        let mut jacs = Vec::with_capacity(if with_jacobians { n } else { 0 });
        for (s, x) in samples.points.iter().enumerate() {
            let y0 = match base {
                Some(b) => b.apply(j, x),
                None => *x,
            };
            let y = group.apply(j, &y0);
            let smp = volumes[j].sample(&y);
            vals[s] = smp.value;
            grs[s] = smp.gradient;
            ins[s] = smp.inside;
            if with_jacobians {
                jacs.push(group.jacobian(j, &y0));
            }
        }
        param_offsets.push(total_params);
        total_params += group.members[j].num_params();
        values.push(vals);
        grads.push(grs);
        inside.push(ins);
        jacobians.push(jacs);
    }
    let mut overlap = vec![true; n];
    for ins in &inside {
        for (o, &b) in overlap.iter_mut().zip(ins) {
            *o &= b;
        }
    }
    let num_overlap = overlap.iter().filter(|&&b| b).count();
    MetricContext {
        dim,
        num_images,
        num_samples: n,
        points: samples.points.clone(),
        values,
        grads,
        inside,
        overlap,
        num_overlap,
        jacobians,
        binnings: binnings.to_vec(),
        param_offsets,
        total_params,
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::grid::Grid;
    use crate::sample::draw_samples;
    use crate::transform::{Transform, Translation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random smooth-ish test volume.
    pub fn random_volume(dims: Vec<usize>, seed: u64) -> Volume {
        let grid = Grid::isotropic(dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..grid.len())
            .map(|i| {
                let p = grid.point_at(i);
                (0.31 * p[0]).sin() + (0.17 * p[1] + 1.0).cos() + 0.1 * rng.gen::<f64>()
            })
            .collect();
        Volume::new(grid, data, "rand").unwrap()
    }

    /// Volumes, a slightly-perturbed translation group, and its context.
    pub fn random_context(
        num_images: usize,
        dims: Vec<usize>,
        levels: usize,
        seed: u64,
        with_jacobians: bool,
    ) -> (Vec<Volume>, TransformGroup, MetricContext) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let volumes: Vec<Volume> =
            (0..num_images).map(|j| random_volume(dims.clone(), seed + j as u64)).collect();
        let members = (0..num_images)
            .map(|_| {
                Transform::Translation(Translation::new(vec![
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                ]))
            })
            .collect();
        let group = TransformGroup::new(members, false);
        let grid = volumes[0].grid().clone();
        let samples = draw_samples(&grid, 1.0, seed);
        let binnings: Vec<Binning> =
            volumes.iter().map(|v| Binning::from_volume(v, levels)).collect();
        let ctx = build_metric_context(&volumes, &group, None, &samples, &binnings, with_jacobians);
        (volumes, group, ctx)
    }

    /// Central finite differences of a metric value under parameter
    /// perturbations of the group, rebuilding the context each time.
    pub fn fd_gradient<F>(
        volumes: &[Volume],
        group: &TransformGroup,
        binnings: &[Binning],
        samples: &SampleSet,
        step: f64,
        mut value_of: F,
    ) -> Vec<f64>
    where
        F: FnMut(&MetricContext) -> f64,
    {
        let base = group.params_concat();
        let mut out = vec![0.0; base.len()];
        for p in 0..base.len() {
            let mut hi = group.clone();
            let mut ph = base.clone();
            ph[p] += step;
            hi.set_params_concat(&ph);
            let ctx_h = build_metric_context(volumes, &hi, None, samples, binnings, false);
            let vh = value_of(&ctx_h);
            let mut lo = group.clone();
            let mut pl = base.clone();
            pl[p] -= step;
            lo.set_params_concat(&pl);
            let ctx_l = build_metric_context(volumes, &lo, None, samples, binnings, false);
            let vl = value_of(&ctx_l);
            out[p] = (vh - vl) / (2.0 * step);
        }
        out
    }

    pub fn assert_grad_close(analytic: &[f64], fd: &[f64], rtol: f64, scale_floor: f64) {
        let scale = fd.iter().map(|g| g.abs()).fold(scale_floor, f64::max);
        for (i, (a, f)) in analytic.iter().zip(fd).enumerate() {
            let err = (a - f).abs() / scale;
            assert!(err < rtol, "param {i}: analytic {a} vs fd {f} (scaled err {err})");
        }
    }
}

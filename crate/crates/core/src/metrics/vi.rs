//! Variance of intensities: monomodal groupwise dissimilarity, negated so
//! larger is better.

use crate::error::{Error, Result};

use super::{MetricContext, MetricValue};

/// `value = -(1/|S|) sum_x (1/N) sum_j (u_xj - mean_x)^2` over overlap
/// samples, with its analytic gradient.
pub fn vi(ctx: &MetricContext) -> Result<MetricValue> {
    let n = ctx.num_images;
    if n < 2 {
        return Err(Error::TooFewImages("vi", 2, n));
    }
    if ctx.num_overlap == 0 {
        return Err(Error::EmptyOverlap);
    }
    let inv_count = 1.0 / ctx.num_overlap as f64;
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut dvdu: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; ctx.num_samples]).collect();
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        let mean: f64 = (0..n).map(|j| ctx.values[j][s]).sum::<f64>() * inv_n;
        let mut var = 0.0;
        for j in 0..n {
            let d = ctx.values[j][s] - mean;
            var += d * d;
            // d/du_j of sum_l (u_l - mean)^2 collapses to 2 (u_j - mean)
            dvdu[j][s] = -2.0 * d * inv_n * inv_count;
        }
        value -= var * inv_n * inv_count;
    }
    let gradient = ctx.fold_gradient(&dvdu);
    Ok(MetricValue { value, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Binning;
    use crate::grid::Grid;
    use crate::metrics::build_metric_context;
    use crate::metrics::testutil::{assert_grad_close, fd_gradient, random_context};
    use crate::sample::draw_samples;
    use crate::transform::{Transform, TransformGroup, Translation};
    use crate::volume::Volume;

    #[test]
    fn identical_aligned_images_score_zero() {
        let (volumes, _, _) = random_context(1, vec![16, 16], 8, 2, false);
        let vols = vec![volumes[0].clone(), volumes[0].clone()];
        let group = TransformGroup::new(
            vec![
                Transform::Translation(Translation::zero(2)),
                Transform::Translation(Translation::zero(2)),
            ],
            false,
        );
        let samples = draw_samples(vols[0].grid(), 1.0, 0);
        let binnings = vec![Binning::from_volume(&vols[0], 8); 2];
        let ctx = build_metric_context(&vols, &group, None, &samples, &binnings, false);
        let mv = vi(&ctx).unwrap();
        assert_eq!(mv.value, 0.0);
    }

    #[test]
    fn constant_images_have_closed_form() {
        let grid = Grid::isotropic(vec![8, 8]).unwrap();
        let c1 = 3.0;
        let c2 = 7.0;
        let vols = vec![
            Volume::new(grid.clone(), vec![c1; 64], "a").unwrap(),
            Volume::new(grid.clone(), vec![c2; 64], "b").unwrap(),
        ];
        let group = TransformGroup::new(
            vec![
                Transform::Translation(Translation::zero(2)),
                Transform::Translation(Translation::zero(2)),
            ],
            false,
        );
        let samples = draw_samples(&grid, 1.0, 0);
        let binnings = vec![Binning::new(8, 0.0, 8.0); 2];
        let ctx = build_metric_context(&vols, &group, None, &samples, &binnings, false);
        let mv = vi(&ctx).unwrap();
        let expect = -(c1 - c2) * (c1 - c2) / 4.0;
        assert!((mv.value - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (volumes, group, ctx) = random_context(3, vec![24, 24], 8, 12, true);
        let mv = vi(&ctx).unwrap();
        let samples = draw_samples(volumes[0].grid(), 1.0, 12);
        let fd = fd_gradient(&volumes, &group, &ctx.binnings, &samples, 1e-5, |c| {
            vi(c).unwrap().value
        });
        assert_grad_close(&mv.gradient, &fd, 1e-6, 1e-8);
    }
}

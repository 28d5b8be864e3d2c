//! Congealing: negated sum of per-location stacked entropies estimated by a
//! leave-one-out Gaussian kernel over the intensity stack at each sample.

use crate::error::{Error, Result};

use super::{MetricContext, MetricValue};

/// Recommended minimum group size for reliable stack density estimation;
/// smaller groups are allowed but flagged.
pub const RECOMMENDED_MIN_IMAGES: usize = 8;

/// Congealing output: metric value plus a low-reliability flag for small
/// groups.
pub struct CongealingValue {
    pub metric: MetricValue,
    pub low_reliability: bool,
}

/// `value = -(1/|S|) sum_x H(stack at x)` with a leave-one-out Gaussian
/// kernel density of bandwidth `sigma` (intensity units).
pub fn congealing(ctx: &MetricContext, sigma: f64) -> Result<CongealingValue> {
    let n = ctx.num_images;
    if n < 2 {
        return Err(Error::TooFewImages("cg", 2, n));
    }
    if ctx.num_overlap == 0 {
        return Err(Error::EmptyOverlap);
    }
    let inv_count = 1.0 / ctx.num_overlap as f64;
    let inv_sig2 = 1.0 / (sigma * sigma);
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
        - ((n - 1) as f64).ln();
    let mut value = 0.0;
    let mut dvdu: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; ctx.num_samples]).collect();
    // per-j softmax weights over the leave-one-out exponents keep both the
    // log density and its gradient stable when the stack is dispersed
    let mut expo = vec![0.0; n];
    let mut soft = vec![0.0; n];
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        for j in 0..n {
            let uj = ctx.values[j][s];
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                if i == j {
                    continue;
                }
                let t = uj - ctx.values[i][s];
                expo[i] = -0.5 * t * t * inv_sig2;
                max = max.max(expo[i]);
            }
            let mut z = 0.0;
            for i in 0..n {
                if i == j {
                    continue;
                }
                soft[i] = (expo[i] - max).exp();
                z += soft[i];
            }
            let log_rho = log_norm + max + z.ln();
            // H_x = -(1/N) sum_j ln rho_j; value subtracts H_x
            value += log_rho / n as f64 * inv_count;
            // d ln rho_j / d u_j = sum_i w_i * (-(u_j - u_i)/sigma^2)
            // d ln rho_j / d u_i = +w_i (u_j - u_i)/sigma^2
            let scale = inv_count / n as f64;
            let mut acc_j = 0.0;
            for i in 0..n {
                if i == j {
                    continue;
                }
                let w = soft[i] / z;
                let t = (uj - ctx.values[i][s]) * inv_sig2;
                acc_j -= w * t;
                dvdu[i][s] += w * t * scale;
            }
            dvdu[j][s] += acc_j * scale;
        }
    }
    let gradient = ctx.fold_gradient(&dvdu);
    Ok(CongealingValue {
        metric: MetricValue { value, gradient },
        low_reliability: n < RECOMMENDED_MIN_IMAGES,
    })
}

//! Multivariate Gaussian mixture over the N-dimensional intensity tuples,
//! with EM updates and a registration gradient through the log-likelihood.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

use super::{MetricContext, MetricValue};

/// Mixture of `num_comp` Gaussians over N-dimensional intensity tuples.
#[derive(Debug, Clone)]
pub struct GmmModel {
    /// Tuple dimensionality (the number of images).
    pub dim: usize,
    pub num_comp: usize,
    pub weights: Vec<f64>,
    /// Component means, component-major: `means[k * dim + a]`.
    pub means: Vec<f64>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Components whose covariance stayed singular after the ridge and were
    /// reset to the pooled covariance.
    pub resets: usize,
}

struct Prepared {
    chol: Vec<Cholesky<f64, nalgebra::Dyn>>,
    log_norm: Vec<f64>,
}

impl GmmModel {
    fn prepare(&self) -> Result<Prepared> {
        let mut chol = Vec::with_capacity(self.num_comp);
        let mut log_norm = Vec::with_capacity(self.num_comp);
        for k in 0..self.num_comp {
            let c = Cholesky::new(self.covariances[k].clone())
                .ok_or(Error::ZeroVariance)?;
            let logdet: f64 = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_norm
                .push(-0.5 * (self.dim as f64 * (2.0 * std::f64::consts::PI).ln() + logdet));
            chol.push(c);
        }
        Ok(Prepared { chol, log_norm })
    }
}

/// Overlap intensity tuples as rows.
fn overlap_tuples(ctx: &MetricContext) -> Vec<DVector<f64>> {
    let n = ctx.num_images;
    let mut out = Vec::with_capacity(ctx.num_overlap);
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        out.push(DVector::from_iterator(n, (0..n).map(|j| ctx.values[j][s])));
    }
    out
}

fn pooled_covariance(tuples: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let count = tuples.len().max(1) as f64;
    let mut mean = DVector::zeros(dim);
    for t in tuples {
        mean += t;
    }
    mean /= count;
    let mut cov = DMatrix::zeros(dim, dim);
    for t in tuples {
        let d = t - &mean;
        cov += &d * d.transpose();
    }
    cov /= count;
    cov
}

fn ridge_of(tuples: &[DVector<f64>], dim: usize) -> f64 {
    let pooled = pooled_covariance(tuples, dim);
    let var = pooled.trace() / dim as f64;
    1e-6 * var.max(1e-12)
}

/// Seeded initialization: k-means++ seeding with a short Lloyd refinement,
/// then per-cluster covariances. Breaks the symmetric saddle a pooled-
/// covariance start would sit on.
pub fn gmm_init(ctx: &MetricContext, num_comp: usize, seed: u64) -> Result<GmmModel> {
    use rand::{Rng, SeedableRng};
    let tuples = overlap_tuples(ctx);
    if tuples.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let dim = ctx.num_images;
    let count = tuples.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding
    let mut centers: Vec<DVector<f64>> = vec![tuples[rng.gen_range(0..count)].clone()];
    let mut d2 = vec![0.0; count];
    while centers.len() < num_comp {
        let mut total = 0.0;
        for (s, t) in tuples.iter().enumerate() {
            let best = centers
                .iter()
                .map(|c| (t - c).norm_squared())
                .fold(f64::INFINITY, f64::min);
            d2[s] = best;
            total += best;
        }
        let next = if total <= 0.0 {
            tuples[rng.gen_range(0..count)].clone()
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = count - 1;
            for (s, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = s;
                    break;
                }
            }
            tuples[pick].clone()
        };
        centers.push(next);
    }
    // Lloyd refinement
    let mut assign = vec![0usize; count];
    for _ in 0..10 {
        for (s, t) in tuples.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = (t - ctr).norm_squared();
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            assign[s] = best;
        }
        for (c, ctr) in centers.iter_mut().enumerate() {
            let mut acc = DVector::zeros(dim);
            let mut n = 0usize;
            for (s, t) in tuples.iter().enumerate() {
                if assign[s] == c {
                    acc += t;
                    n += 1;
                }
            }
            if n > 0 {
                *ctr = acc / n as f64;
            }
        }
    }
    let ridge = ridge_of(&tuples, dim);
    let pooled = {
        let mut p = pooled_covariance(&tuples, dim);
        for a in 0..dim {
            p[(a, a)] += ridge;
        }
        p
    };
    let mut means = Vec::with_capacity(num_comp * dim);
    let mut covariances = Vec::with_capacity(num_comp);
    let mut weights = vec![0.0; num_comp];
    for (c, ctr) in centers.iter().enumerate() {
        means.extend(ctr.iter());
        let members: Vec<&DVector<f64>> =
            tuples.iter().enumerate().filter(|(s, _)| assign[*s] == c).map(|(_, t)| t).collect();
        weights[c] = members.len().max(1) as f64 / count as f64;
        if members.len() < 2 * dim {
            covariances.push(pooled.clone());
            continue;
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for t in &members {
            let d = *t - ctr;
            cov += &d * d.transpose();
        }
        cov /= members.len() as f64;
        for a in 0..dim {
            cov[(a, a)] += ridge;
        }
        if Cholesky::new(cov.clone()).is_none() {
            cov = pooled.clone();
        }
        covariances.push(cov);
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    Ok(GmmModel { dim, num_comp, weights, means, covariances, resets: 0 })
}

/// Mean log-likelihood of the overlap tuples with its registration gradient
/// (responsibilities held fixed, as the posterior-weighted score).
pub fn gmm_loglik(ctx: &MetricContext, model: &GmmModel) -> Result<MetricValue> {
    if ctx.num_overlap == 0 {
        return Err(Error::EmptyOverlap);
    }
    let prep = model.prepare()?;
    let n = ctx.num_images;
    let k = model.num_comp;
    let inv_count = 1.0 / ctx.num_overlap as f64;
    let mut value = 0.0;
    let mut dvdu: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; ctx.num_samples]).collect();
    let mut logp = vec![0.0; k];
    let mut scores: Vec<DVector<f64>> = Vec::with_capacity(k);
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        let u = DVector::from_iterator(n, (0..n).map(|j| ctx.values[j][s]));
        scores.clear();
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            let mean = DVector::from_column_slice(&model.means[c * n..(c + 1) * n]);
            let d = &u - &mean;
            let sol = prep.chol[c].solve(&d);
            let maha: f64 = d.dot(&sol);
            logp[c] = model.weights[c].max(1e-300).ln() + prep.log_norm[c] - 0.5 * maha;
            scores.push(sol);
            max = max.max(logp[c]);
        }
        let mut z = 0.0;
        for l in logp.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        value += (max + z.ln()) * inv_count;
        // d loglik / du = sum_c resp_c * (-Sigma_c^{-1} (u - m_c))
        for c in 0..k {
            let r = logp[c] / z;
            if r == 0.0 {
                continue;
            }
            for j in 0..n {
                dvdu[j][s] -= r * scores[c][j] * inv_count;
            }
        }
    }
    let gradient = ctx.fold_gradient(&dvdu);
    Ok(MetricValue { value, gradient })
}

/// One EM step on the mixture from the current overlap tuples.
pub fn gmm_em_step(ctx: &MetricContext, model: &GmmModel) -> Result<GmmModel> {
    let tuples = overlap_tuples(ctx);
    if tuples.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let prep = model.prepare()?;
    let n = model.dim;
    let k = model.num_comp;
    let count = tuples.len();
    // E-step: responsibilities
    let mut resp = vec![0.0; count * k];
    let mut logp = vec![0.0; k];
    for (s, u) in tuples.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            let mean = DVector::from_column_slice(&model.means[c * n..(c + 1) * n]);
            let d = u - &mean;
            let maha: f64 = d.dot(&prep.chol[c].solve(&d));
            logp[c] = model.weights[c].max(1e-300).ln() + prep.log_norm[c] - 0.5 * maha;
            max = max.max(logp[c]);
        }
        let mut z = 0.0;
        for c in 0..k {
            resp[s * k + c] = (logp[c] - max).exp();
            z += resp[s * k + c];
        }
        for c in 0..k {
            resp[s * k + c] /= z;
        }
    }
    // M-step
    let ridge = ridge_of(&tuples, n);
    let pooled = {
        let mut p = pooled_covariance(&tuples, n);
        for a in 0..n {
            p[(a, a)] += ridge;
        }
        p
    };
    let mut weights = vec![0.0; k];
    let mut means = vec![0.0; k * n];
    let mut covariances = Vec::with_capacity(k);
    let mut resets = model.resets;
    for c in 0..k {
        let nk: f64 = (0..count).map(|s| resp[s * k + c]).sum();
        weights[c] = nk / count as f64;
        if nk <= 1e-12 {
            // empty component: keep previous mean, reset covariance
            means[c * n..(c + 1) * n]
                .copy_from_slice(&model.means[c * n..(c + 1) * n]);
            covariances.push(pooled.clone());
            resets += 1;
            continue;
        }
        let mut mean = DVector::zeros(n);
        for (s, u) in tuples.iter().enumerate() {
            mean += u * resp[s * k + c];
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(n, n);
        for (s, u) in tuples.iter().enumerate() {
            let d = u - &mean;
            cov += &d * d.transpose() * resp[s * k + c];
        }
        cov /= nk;
        for a in 0..n {
            cov[(a, a)] += ridge;
        }
        if Cholesky::new(cov.clone()).is_none() {
            cov = pooled.clone();
            resets += 1;
        }
        means[c * n..(c + 1) * n].copy_from_slice(mean.as_slice());
        covariances.push(cov);
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    Ok(GmmModel { dim: n, num_comp: k, weights, means, covariances, resets })
}

//! Conditional template entropy: a grey-valued template is the first
//! principal component of the warped intensity tuples; the metric is the
//! negated sum of conditional entropies of each image given that template.

use crate::density::Binning;
use crate::error::{Error, Result};

use super::{MetricContext, MetricValue};

/// Template projection: PCA weights, per-image means, and the template's
/// binning, all treated as locally constant by the gradient.
#[derive(Debug, Clone)]
pub struct CteProjection {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub template_binning: Binning,
}

/// First principal component of the overlap intensity tuples by power
/// iteration on the image-by-image covariance.
fn first_principal_component(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    let trace: f64 = (0..n).map(|i| cov[i * n + i]).sum();
    if trace <= 1e-30 {
        return Err(Error::ZeroVariance);
    }
    let mut w = vec![1.0 / (n as f64).sqrt(); n];
    let mut tmp = vec![0.0; n];
    for _ in 0..256 {
        for r in 0..n {
            tmp[r] = (0..n).map(|c| cov[r * n + c] * w[c]).sum();
        }
        let norm = tmp.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            // the start vector was orthogonal to the dominant eigenvector;
            // nudge and continue
            tmp[0] = 1.0;
        }
        let norm = tmp.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut delta = 0.0;
        for (wi, ti) in w.iter_mut().zip(&tmp) {
            let new = ti / norm;
            delta += (new - *wi).abs();
            *wi = new;
        }
        if delta < 1e-14 {
            break;
        }
    }
    // deterministic sign: largest-magnitude entry positive
    let (mut best, mut best_abs) = (0usize, 0.0);
    for (i, &v) in w.iter().enumerate() {
        if v.abs() > best_abs {
            best = i;
            best_abs = v.abs();
        }
    }
    if w[best] < 0.0 {
        for v in &mut w {
            *v = -*v;
        }
    }
    Ok(w)
}

/// Compute the template projection for the current context.
pub fn fit_projection(ctx: &MetricContext) -> Result<CteProjection> {
    let n = ctx.num_images;
    let count = ctx.num_overlap;
    if count == 0 {
        return Err(Error::EmptyOverlap);
    }
    let mut means = vec![0.0; n];
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        for j in 0..n {
            means[j] += ctx.values[j][s] / count as f64;
        }
    }
    let mut cov = vec![0.0; n * n];
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        for a in 0..n {
            let da = ctx.values[a][s] - means[a];
            for b in a..n {
                let db = ctx.values[b][s] - means[b];
                cov[a * n + b] += da * db / count as f64;
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            cov[a * n + b] = cov[b * n + a];
        }
    }
    let weights = first_principal_component(&cov, n)?;
    // template range over the current samples
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        let v: f64 = (0..n).map(|j| weights[j] * (ctx.values[j][s] - means[j])).sum();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let levels = ctx.binnings[0].levels;
    Ok(CteProjection { weights, means, template_binning: Binning::new(levels, lo, hi) })
}

/// `value = -sum_j H(U_j ∘ φ_j | V)` where V is the PCA template.
///
/// The projection is recomputed per evaluation unless `frozen` is supplied;
/// the gradient always treats it as locally constant.
pub fn cte(ctx: &MetricContext, frozen: Option<&CteProjection>) -> Result<MetricValue> {
    let n = ctx.num_images;
    if n < 2 {
        return Err(Error::TooFewImages("cte", 2, n));
    }
    let owned;
    let proj = match frozen {
        Some(p) => p,
        None => {
            owned = fit_projection(ctx)?;
            &owned
        }
    };
    let bv = &proj.template_binning;
    let lv = bv.levels;
    // template values at overlap samples
    let mut template = vec![0.0; ctx.num_samples];
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        template[s] =
            (0..n).map(|j| proj.weights[j] * (ctx.values[j][s] - proj.means[j])).sum();
    }
    let mut value = 0.0;
    let mut dvdu: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; ctx.num_samples]).collect();
    // template-side derivative accumulator per sample
    let mut tmpl_acc = vec![0.0; ctx.num_samples];
    for l in 0..n {
        let bl = &ctx.binnings[l];
        let ll = bl.levels;
        let mut table = vec![0.0; ll * lv];
        for s in 0..ctx.num_samples {
            if !ctx.overlap[s] {
                continue;
            }
            let cu = bl.coord(ctx.values[l][s]);
            let cv = bv.coord(template[s]);
            let (ulo, uhi) = bl.support(cu);
            let (vlo, vhi) = bv.support(cv);
            for mu in ulo..=uhi {
                let wu = bl.kernel(cu, mu);
                if wu == 0.0 {
                    continue;
                }
                for nu in vlo..=vhi {
                    table[mu * lv + nu] += wu * bv.kernel(cv, nu);
                }
            }
        }
        let z: f64 = table.iter().sum();
        if z <= 0.0 {
            continue;
        }
        let p: Vec<f64> = table.iter().map(|&a| a / z).collect();
        let mut qv = vec![0.0; lv]; // template marginal
        for mu in 0..ll {
            for nu in 0..lv {
                qv[nu] += p[mu * lv + nu];
            }
        }
        // -H(U_l | V) = sum p ln(p / q_v)
        let mut s_l = 0.0;
        for mu in 0..ll {
            for nu in 0..lv {
                let v = p[mu * lv + nu];
                if v > 0.0 {
                    s_l += v * (v / qv[nu]).ln();
                }
            }
        }
        value += s_l;
        // dS/dA = (ln(p/q_v) - S_l) / Z on populated cells
        let mut g_cell = vec![0.0; ll * lv];
        for mu in 0..ll {
            for nu in 0..lv {
                let v = p[mu * lv + nu];
                if v > 0.0 {
                    g_cell[mu * lv + nu] = ((v / qv[nu]).ln() - s_l) / z;
                }
            }
        }
        for s in 0..ctx.num_samples {
            if !ctx.overlap[s] {
                continue;
            }
            let (cu, du) = bl.coord_and_deriv(ctx.values[l][s]);
            let (cv, dv) = bv.coord_and_deriv(template[s]);
            let (ulo, uhi) = bl.support(cu);
            let (vlo, vhi) = bv.support(cv);
            if du != 0.0 {
                let mut acc = 0.0;
                for mu in ulo..=uhi {
                    let kdu = bl.kernel_deriv(cu, mu);
                    if kdu == 0.0 {
                        continue;
                    }
                    for nu in vlo..=vhi {
                        let wv = bv.kernel(cv, nu);
                        if wv != 0.0 {
                            acc += g_cell[mu * lv + nu] * kdu * wv;
                        }
                    }
                }
                dvdu[l][s] += acc * du;
            }
            if dv != 0.0 {
                let mut acc = 0.0;
                for nu in vlo..=vhi {
                    let kdv = bv.kernel_deriv(cv, nu);
                    if kdv == 0.0 {
                        continue;
                    }
                    for mu in ulo..=uhi {
                        let wu = bl.kernel(cu, mu);
                        if wu != 0.0 {
                            acc += g_cell[mu * lv + nu] * wu * kdv;
                        }
                    }
                }
                tmpl_acc[s] += acc * dv;
            }
        }
    }
    // template varies with every image through its PCA weight
    for j in 0..n {
        let wj = proj.weights[j];
        if wj == 0.0 {
            continue;
        }
        for s in 0..ctx.num_samples {
            if ctx.overlap[s] && tmpl_acc[s] != 0.0 {
                dvdu[j][s] += tmpl_acc[s] * wj;
            }
        }
    }
    let gradient = ctx.fold_gradient(&dvdu);
    Ok(MetricValue { value, gradient })
}

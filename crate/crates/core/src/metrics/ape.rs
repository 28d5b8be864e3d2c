//! Accumulated pairwise estimates: the sum of mutual information over all
//! image pairs, from 2D Parzen joint histograms.

use crate::error::{Error, Result};

use super::{MetricContext, MetricValue};

/// `value = sum_{i<j} I(U_i ∘ φ_i, U_j ∘ φ_j)` in nats with analytic
/// gradients per pair. Marginals are per-pair.
pub fn ape(ctx: &MetricContext) -> Result<MetricValue> {
    let n = ctx.num_images;
    if n < 2 {
        return Err(Error::TooFewImages("ape", 2, n));
    }
    if ctx.num_overlap == 0 {
        return Err(Error::EmptyOverlap);
    }
    let mut value = 0.0;
    let mut dvdu: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; ctx.num_samples]).collect();
    for i in 0..n {
        for j in i + 1..n {
            value += pair_mi(ctx, i, j, Some(&mut dvdu))?;
        }
    }
    let gradient = ctx.fold_gradient(&dvdu);
    Ok(MetricValue { value, gradient })
}

/// Mutual information of one image pair; when `dvdu` is given, accumulates
/// the per-sample intensity derivatives of this term into it.
fn pair_mi(
    ctx: &MetricContext,
    i: usize,
    j: usize,
    dvdu: Option<&mut Vec<Vec<f64>>>,
) -> Result<f64> {
    let bi = &ctx.binnings[i];
    let bj = &ctx.binnings[j];
    let (li, lj) = (bi.levels, bj.levels);
    let mut table = vec![0.0; li * lj];
    for s in 0..ctx.num_samples {
        if !ctx.overlap[s] {
            continue;
        }
        let ci = bi.coord(ctx.values[i][s]);
        let cj = bj.coord(ctx.values[j][s]);
        let (ilo, ihi) = bi.support(ci);
        let (jlo, jhi) = bj.support(cj);
        for mu in ilo..=ihi {
            let wi = bi.kernel(ci, mu);
            if wi == 0.0 {
                continue;
            }
            for nu in jlo..=jhi {
                let wj = bj.kernel(cj, nu);
                table[mu * lj + nu] += wi * wj;
            }
        }
    }
    let z: f64 = table.iter().sum();
    if z <= 0.0 {
        return Ok(0.0);
    }
    let p: Vec<f64> = table.iter().map(|&a| a / z).collect();
    let mut pr = vec![0.0; li];
    let mut pc = vec![0.0; lj];
    for mu in 0..li {
        for nu in 0..lj {
            let v = p[mu * lj + nu];
            pr[mu] += v;
            pc[nu] += v;
        }
    }
    let mut mi = 0.0;
    for mu in 0..li {
        for nu in 0..lj {
            let v = p[mu * lj + nu];
            if v > 0.0 {
                mi += v * (v / (pr[mu] * pc[nu])).ln();
            }
        }
    }
    if let Some(dvdu) = dvdu {
        let mut g_cell = vec![0.0; li * lj];
        for mu in 0..li {
            for nu in 0..lj {
                let v = p[mu * lj + nu];
                if v > 0.0 {
                    g_cell[mu * lj + nu] = ((v / (pr[mu] * pc[nu])).ln() - mi) / z;
                }
            }
        }
        for s in 0..ctx.num_samples {
            if !ctx.overlap[s] {
                continue;
            }
            let (ci, di) = bi.coord_and_deriv(ctx.values[i][s]);
            let (cj, dj) = bj.coord_and_deriv(ctx.values[j][s]);
            let (ilo, ihi) = bi.support(ci);
            let (jlo, jhi) = bj.support(cj);
            if di != 0.0 {
                let mut acc = 0.0;
                for mu in ilo..=ihi {
                    let kdi = bi.kernel_deriv(ci, mu);
                    if kdi == 0.0 {
                        continue;
                    }
                    for nu in jlo..=jhi {
                        let wj = bj.kernel(cj, nu);
                        if wj != 0.0 {
                            acc += g_cell[mu * lj + nu] * kdi * wj;
                        }
                    }
                }
                dvdu[i][s] += acc * di;
            }
            if dj != 0.0 {
                let mut acc = 0.0;
                for nu in jlo..=jhi {
                    let kdj = bj.kernel_deriv(cj, nu);
                    if kdj == 0.0 {
                        continue;
                    }
                    for mu in ilo..=ihi {
                        let wi = bi.kernel(ci, mu);
                        if wi != 0.0 {
                            acc += g_cell[mu * lj + nu] * wi * kdj;
                        }
                    }
                }
                dvdu[j][s] += acc * dj;
            }
        }
    }
    Ok(mi)
}

/// Number of pairwise terms for `n` images.
pub fn num_pairs(n: usize) -> usize {
    n * (n - 1) / 2
}

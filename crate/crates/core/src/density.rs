//! Intensity binning, cubic B-spline Parzen windows, class-conditional
//! appearance tables, joint class-intensity tables and the entropy / mutual
//! information primitives shared by all similarity metrics.
//!
//! All distributions use natural logarithms; metric values are in nats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::Volume;

/// Probability floor applied before logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Centered cubic B-spline kernel with support (-2, 2).
///
/// Fulfils the partition of unity: sum over integer shifts equals one.
#[inline]
pub fn bspline3(s: f64) -> f64 {
    let a = s.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// Analytic derivative of [`bspline3`].
#[inline]
pub fn bspline3_deriv(s: f64) -> f64 {
    let a = s.abs();
    let m = if a < 1.0 {
        -2.0 * a + 1.5 * a * a
    } else if a < 2.0 {
        let t = 2.0 - a;
        -0.5 * t * t
    } else {
        0.0
    };
    if s < 0.0 {
        -m
    } else {
        m
    }
}

/// Intensity quantization: maps real intensities onto `levels` bins.
///
/// The bin coordinate of `u` is `(u - lo) / (hi - lo) * (levels - 1)`,
/// clamped to `[0, levels - 1]`. The kernel bandwidth is measured in bin
/// units.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub levels: usize,
    pub lo: f64,
    pub hi: f64,
    pub bandwidth: f64,
}

impl Binning {
    pub fn new(levels: usize, lo: f64, hi: f64) -> Self {
        assert!(levels >= 2, "need at least two intensity levels");
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Binning { levels, lo, hi, bandwidth: 1.0 }
    }

    /// Range frozen from a volume's initial intensity extrema.
    pub fn from_volume(v: &Volume, levels: usize) -> Self {
        let (lo, hi) = v.min_max();
        Binning::new(levels, lo, hi)
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        (self.levels - 1) as f64 / (self.hi - self.lo)
    }

    /// Clamped bin coordinate of an intensity.
    #[inline]
    pub fn coord(&self, u: f64) -> f64 {
        ((u - self.lo) * self.scale()).clamp(0.0, (self.levels - 1) as f64)
    }

    /// Bin coordinate and its derivative with respect to intensity
    /// (zero where the clamp is active).
    #[inline]
    pub fn coord_and_deriv(&self, u: f64) -> (f64, f64) {
        let raw = (u - self.lo) * self.scale();
        let max = (self.levels - 1) as f64;
        if raw <= 0.0 {
            (0.0, 0.0)
        } else if raw >= max {
            (max, 0.0)
        } else {
            (raw, self.scale())
        }
    }

    /// Inclusive range of bins whose kernel weight at coordinate `s` can be
    /// nonzero.
    #[inline]
    pub fn support(&self, s: f64) -> (usize, usize) {
        let h = self.bandwidth;
        let lo = (s - 2.0 * h).ceil().max(0.0) as usize;
        let hi = (s + 2.0 * h).floor().min((self.levels - 1) as f64) as usize;
        (lo, hi)
    }

    /// Kernel weight of bin `mu` for a sample at coordinate `s`.
    #[inline]
    pub fn kernel(&self, s: f64, mu: usize) -> f64 {
        bspline3((s - mu as f64) / self.bandwidth)
    }

    /// Derivative of [`Binning::kernel`] with respect to `s`.
    #[inline]
    pub fn kernel_deriv(&self, s: f64, mu: usize) -> f64 {
        bspline3_deriv((s - mu as f64) / self.bandwidth) / self.bandwidth
    }
}

/// Spatial class-probability field together with prior proportions.
#[derive(Debug, Clone)]
pub struct CommonSpace {
    pub num_classes: usize,
    pub num_points: usize,
    /// Point-major storage: `gamma[s * K + k]`.
    pub gamma: Vec<f64>,
    pub pi: Vec<f64>,
}

impl CommonSpace {
    pub fn gamma_row(&self, s: usize) -> &[f64] {
        &self.gamma[s * self.num_classes..(s + 1) * self.num_classes]
    }

    pub fn gamma_row_mut(&mut self, s: usize) -> &mut [f64] {
        let k = self.num_classes;
        &mut self.gamma[s * k..(s + 1) * k]
    }

    /// Check simplex invariants for rows and prior.
    pub fn validate(&self, tol: f64) -> bool {
        if (self.pi.iter().sum::<f64>() - 1.0).abs() > tol {
            return false;
        }
        for s in 0..self.num_points {
            let row = self.gamma_row(s);
            if row.iter().any(|&g| !(-tol..=1.0 + tol).contains(&g)) {
                return false;
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > tol {
                return false;
            }
        }
        true
    }
}

/// Random initialization of the common space: exactly uniform priors and a
/// softmax of i.i.d. standard normals per point.
pub fn init_common_space(grid: &Grid, num_classes: usize, seed: u64) -> CommonSpace {
    assert!(num_classes >= 2, "need at least two classes");
    init_common_space_n(grid.len(), num_classes, seed)
}

/// As [`init_common_space`] but for a raw point count.
pub fn init_common_space_n(num_points: usize, num_classes: usize, seed: u64) -> CommonSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gamma = vec![0.0; num_points * num_classes];
    let mut gauss = GaussStream::new();
    for row in gamma.chunks_exact_mut(num_classes) {
        let mut max = f64::NEG_INFINITY;
        for g in row.iter_mut() {
            *g = gauss.next(&mut rng);
            max = max.max(*g);
        }
        let mut z = 0.0;
        for g in row.iter_mut() {
            *g = (*g - max).exp();
            z += *g;
        }
        for g in row.iter_mut() {
            *g /= z;
        }
    }
    CommonSpace {
        num_classes,
        num_points,
        gamma,
        pi: vec![1.0 / num_classes as f64; num_classes],
    }
}

/// Box-Muller standard normal stream.
struct GaussStream {
    spare: Option<f64>,
}

impl GaussStream {
    fn new() -> Self {
        GaussStream { spare: None }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Per-image, per-class intensity distribution over bins.
#[derive(Debug, Clone)]
pub struct AppearanceTable {
    pub num_classes: usize,
    pub levels: usize,
    /// Class-major storage: `f[k * levels + mu]`; every row sums to one.
    pub f: Vec<f64>,
    /// Number of rows that received no kernel mass and fell back to uniform.
    pub degenerate_rows: usize,
}

impl AppearanceTable {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.f[k * self.levels..(k + 1) * self.levels]
    }

    /// CSV rendering: one row per class, one column per bin.
    pub fn to_csv(&self) -> String {
        table_csv(&self.f, self.num_classes, self.levels)
    }
}

fn table_csv(data: &[f64], rows: usize, cols: usize) -> String {
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", data[r * cols + c]));
        }
        out.push('\n');
    }
    out
}

/// Kernel density estimate of one appearance row from per-sample weights.
///
/// `coords` are bin coordinates of the samples; `weights` is the class
/// column of the posterior. Returns the normalized row and whether it was
/// degenerate (all-zero mass, replaced by a uniform row).
pub fn appearance_from_posterior(
    coords: &[f64],
    weights: &[f64],
    binning: &Binning,
) -> (Vec<f64>, bool) {
    let mut row = vec![0.0; binning.levels];
    for (&s, &w) in coords.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let (lo, hi) = binning.support(s);
        for mu in lo..=hi {
            row[mu] += binning.kernel(s, mu) * w;
        }
    }
    let z: f64 = row.iter().sum();
    if z > 0.0 {
        for v in &mut row {
            *v /= z;
        }
        (row, false)
    } else {
        let u = 1.0 / binning.levels as f64;
        (vec![u; binning.levels], true)
    }
}

/// Build the full appearance table for one image from the posterior field.
///
/// `gamma` is point-major with `num_classes` entries per sample and must be
/// restricted to overlap samples, matching `coords`.
pub fn appearance_table(
    coords: &[f64],
    gamma: &[f64],
    num_classes: usize,
    binning: &Binning,
) -> AppearanceTable {
    let levels = binning.levels;
    let mut f = vec![0.0; num_classes * levels];
    for (i, &s) in coords.iter().enumerate() {
        let row = &gamma[i * num_classes..(i + 1) * num_classes];
        let (lo, hi) = binning.support(s);
        for mu in lo..=hi {
            let w = binning.kernel(s, mu);
            if w == 0.0 {
                continue;
            }
            for (k, &g) in row.iter().enumerate() {
                f[k * levels + mu] += w * g;
            }
        }
    }
    let mut degenerate = 0;
    for k in 0..num_classes {
        let row = &mut f[k * levels..(k + 1) * levels];
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            for v in row.iter_mut() {
                *v /= z;
            }
        } else {
            degenerate += 1;
            let u = 1.0 / levels as f64;
            row.fill(u);
        }
    }
    AppearanceTable { num_classes, levels, f, degenerate_rows: degenerate }
}

/// Appearance table from a hard label map; the label-driven variant keeps
/// this table fixed across iterations.
pub fn appearance_from_labels(
    v: &Volume,
    labels: &[usize],
    num_classes: usize,
    binning: &Binning,
) -> AppearanceTable {
    assert_eq!(v.data().len(), labels.len(), "labels must cover the volume");
    let levels = binning.levels;
    let mut f = vec![0.0; num_classes * levels];
    for (&u, &k) in v.data().iter().zip(labels) {
        let s = binning.coord(u);
        let (lo, hi) = binning.support(s);
        for mu in lo..=hi {
            f[k * levels + mu] += binning.kernel(s, mu);
        }
    }
    let mut degenerate = 0;
    for k in 0..num_classes {
        let row = &mut f[k * levels..(k + 1) * levels];
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            for val in row.iter_mut() {
                *val /= z;
            }
        } else {
            degenerate += 1;
            row.fill(1.0 / levels as f64);
        }
    }
    AppearanceTable { num_classes, levels, f, degenerate_rows: degenerate }
}

/// Joint class-intensity distribution for one image.
#[derive(Debug, Clone)]
pub struct JointTable {
    pub num_classes: usize,
    pub levels: usize,
    /// Class-major storage: `p[k * levels + mu]`; sums to one overall.
    pub p: Vec<f64>,
}

impl JointTable {
    pub fn marginal_intensity(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.levels];
        for k in 0..self.num_classes {
            for mu in 0..self.levels {
                m[mu] += self.p[k * self.levels + mu];
            }
        }
        m
    }

    pub fn marginal_class(&self) -> Vec<f64> {
        self.p
            .chunks_exact(self.levels)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        table_csv(&self.p, self.num_classes, self.levels)
    }
}

/// Parzen estimate of the joint class-intensity table from overlap samples.
pub fn joint_table(
    coords: &[f64],
    gamma: &[f64],
    num_classes: usize,
    binning: &Binning,
) -> Result<JointTable> {
    if coords.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let levels = binning.levels;
    let mut p = vec![0.0; num_classes * levels];
    for (i, &s) in coords.iter().enumerate() {
        let row = &gamma[i * num_classes..(i + 1) * num_classes];
        let (lo, hi) = binning.support(s);
        for mu in lo..=hi {
            let w = binning.kernel(s, mu);
            if w == 0.0 {
                continue;
            }
            for (k, &g) in row.iter().enumerate() {
                p[k * levels + mu] += w * g;
            }
        }
    }
    let z: f64 = p.iter().sum();
    if z > 0.0 {
        for v in &mut p {
            *v /= z;
        }
    }
    Ok(JointTable { num_classes, levels, p })
}

/// Shannon entropy of a normalized distribution, in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Mutual information of a joint table, in nats; zero cells contribute zero.
pub fn mutual_information(table: &JointTable) -> f64 {
    let pm = table.marginal_intensity();
    let pk = table.marginal_class();
    let mut mi = 0.0;
    for k in 0..table.num_classes {
        for mu in 0..table.levels {
            let p = table.p[k * table.levels + mu];
            if p > 0.0 {
                mi += p * (p / (pm[mu] * pk[k])).ln();
            }
        }
    }
    mi
}

/// Per-sample class likelihood under Parzen smearing: the sample's kernel
/// footprint dotted with the appearance row.
#[inline]
pub fn smeared_likelihood(table: &AppearanceTable, k: usize, s: f64, binning: &Binning) -> f64 {
    let row = table.row(k);
    let (lo, hi) = binning.support(s);
    let mut lik = 0.0;
    for mu in lo..=hi {
        lik += binning.kernel(s, mu) * row[mu];
    }
    lik
}

/// Posterior class probabilities for overlap samples (log-space products).
///
/// `coords_per_image[j]` holds bin coordinates for image `j` at the same
/// overlap samples. Samples whose likelihood vanishes for every class fall
/// back to the prior. Writes rows into `gamma_out` (point-major) and returns
/// the number of fallback samples.
pub fn posterior_update(
    coords_per_image: &[&[f64]],
    tables: &[AppearanceTable],
    pi: &[f64],
    binnings: &[Binning],
    gamma_out: &mut [f64],
) -> usize {
    let num_images = coords_per_image.len();
    assert_eq!(tables.len(), num_images);
    let num_classes = pi.len();
    let n = if num_images == 0 { 0 } else { coords_per_image[0].len() };
    assert_eq!(gamma_out.len(), n * num_classes);
    let mut fallbacks = 0;
    let mut loglik = vec![0.0; num_classes];
    for s_idx in 0..n {
        let mut all_zero = true;
        for k in 0..num_classes {
            let mut ll = pi[k].max(PROB_FLOOR).ln();
            let mut exact_zero = pi[k] == 0.0;
            for j in 0..num_images {
                let lik = smeared_likelihood(
                    &tables[j],
                    k,
                    coords_per_image[j][s_idx],
                    &binnings[j],
                );
                if lik <= 0.0 {
                    exact_zero = true;
                }
                ll += lik.max(PROB_FLOOR).ln();
            }
            if !exact_zero {
                all_zero = false;
            }
            loglik[k] = ll;
        }
        let out = &mut gamma_out[s_idx * num_classes..(s_idx + 1) * num_classes];
        if all_zero {
            out.copy_from_slice(pi);
            fallbacks += 1;
            continue;
        }
        let max = loglik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &ll) in out.iter_mut().zip(&loglik) {
            *o = (ll - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    fallbacks
}

/// Prior proportions from the posterior rows over the overlap region.
pub fn prior_update(gamma: &[f64], num_classes: usize) -> Result<Vec<f64>> {
    if gamma.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let mut pi = vec![0.0; num_classes];
    for row in gamma.chunks_exact(num_classes) {
        for (p, &g) in pi.iter_mut().zip(row) {
            *p += g;
        }
    }
    let z: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= z;
    }
    Ok(pi)
}

/// Pack a 2D common-space field as a volume with dims `[K, rows, cols]` for
/// inspection with the portable format.
pub fn gamma_volume(grid: &Grid, cs: &CommonSpace) -> Result<Volume> {
    if grid.ndim() != 2 {
        return Err(Error::InvalidConfig(
            "gamma export as a single volume supports 2D grids only".into(),
        ));
    }
    assert_eq!(grid.len(), cs.num_points);
    let k = cs.num_classes;
    let n = grid.len();
    let mut data = vec![0.0; k * n];
    for s in 0..n {
        for c in 0..k {
            data[c * n + s] = cs.gamma[s * k + c];
        }
    }
    let dims = vec![k, grid.dims()[0], grid.dims()[1]];
    let out_grid = Grid::new(
        dims,
        vec![1.0, grid.spacing()[0], grid.spacing()[1]],
        vec![0.0, grid.origin()[0], grid.origin()[1]],
    )?;
    Volume::new(out_grid, data, "gamma")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn kernel_closed_forms() {
        assert!((bspline3(0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((bspline3(1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((bspline3(-1.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(bspline3(2.0), 0.0);
        assert_eq!(bspline3(-2.5), 0.0);
    }

    #[test]
    fn kernel_partition_of_unity_and_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s: f64 = rng.gen_range(-3.0..3.0);
            let sum: f64 = (-6..7).map(|i| bspline3(s - i as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-12, "partition of unity at {s}");
            let h = 1e-6;
            let fd = (bspline3(s + h) - bspline3(s - h)) / (2.0 * h);
            assert!((bspline3_deriv(s) - fd).abs() < 1e-7, "derivative at {s}");
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let m = 5;
        let u = vec![1.0 / m as f64; m];
        assert!((entropy(&u) - (m as f64).ln()).abs() < 1e-12);
        let e = entropy(&[0.25, 0.75]);
        let expect = -(0.25f64.ln() * 0.25 + 0.75f64.ln() * 0.75);
        assert!((e - expect).abs() < 1e-10);
        assert!((e - 0.5623351446188083).abs() < 1e-10);
    }

    #[test]
    fn mi_of_factorized_table_is_zero() {
        let b = Binning::new(8, 0.0, 1.0);
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords: Vec<f64> = (0..n).map(|_| b.coord(rng.gen())).collect();
        let k = 3;
        let gamma = vec![1.0 / k as f64; n * k];
        let t = joint_table(&coords, &gamma, k, &b).unwrap();
        assert!(mutual_information(&t).abs() < 1e-12);
        // p(mu, k) = p(mu) / K
        let pm = t.marginal_intensity();
        for class in 0..k {
            for mu in 0..8 {
                assert!((t.p[class * 8 + mu] - pm[mu] / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mi_of_diagonal_table_is_ln2() {
        let t = JointTable { num_classes: 2, levels: 2, p: vec![0.5, 0.0, 0.0, 0.5] };
        assert!((mutual_information(&t) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_matches_brute_force_on_random_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (k, l) = (4, 8);
        let mut p: Vec<f64> = (0..k * l).map(|_| rng.gen::<f64>()).collect();
        let z: f64 = p.iter().sum();
        for v in &mut p {
            *v /= z;
        }
        let t = JointTable { num_classes: k, levels: l, p: p.clone() };
        // independent summation
        let mut pr = vec![0.0; k];
        let mut pc = vec![0.0; l];
        for r in 0..k {
            for c in 0..l {
                pr[r] += p[r * l + c];
                pc[c] += p[r * l + c];
            }
        }
        let mut mi = 0.0;
        for r in 0..k {
            for c in 0..l {
                let q = p[r * l + c];
                if q > 0.0 {
                    mi += q * (q / (pr[r] * pc[c])).ln();
                }
            }
        }
        assert!((mutual_information(&t) - mi).abs() < 1e-12);
    }

    #[test]
    fn single_atom_kde_is_kernel_stencil() {
        let b = Binning::new(16, 0.0, 15.0);
        // all samples share intensity 7.0 (an exact bin center)
        let coords = vec![b.coord(7.0); 10];
        let weights = vec![1.0; 10];
        let (row, degenerate) = appearance_from_posterior(&coords, &weights, &b);
        assert!(!degenerate);
        let stencil = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];
        for (mu, &v) in row.iter().enumerate() {
            let expect = match mu {
                6 => stencil[0],
                7 => stencil[1],
                8 => stencil[2],
                _ => 0.0,
            };
            assert!((v - expect).abs() < 1e-12, "bin {mu}");
        }
    }

    #[test]
    fn uniform_intensities_give_near_uniform_row() {
        let l = 16;
        let b = Binning::new(l, 0.0, (l - 1) as f64);
        let coords: Vec<f64> = (0..l).map(|i| i as f64).collect();
        let weights = vec![1.0; l];
        let (row, _) = appearance_from_posterior(&coords, &weights, &b);
        let max = row.iter().cloned().fold(0.0, f64::max);
        let min = row.iter().cloned().fold(1.0, f64::min);
        assert!(max - min < 2.0 / l as f64);
    }

    #[test]
    fn low_intensity_class_mass_sits_below_midpoint() {
        let b = Binning::new(32, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut coords = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..500 {
            // class-0 samples concentrated on low intensities
            coords.push(b.coord(rng.gen::<f64>() * 0.3));
            weights.push(1.0);
            // unweighted high-intensity samples
            coords.push(b.coord(0.7 + rng.gen::<f64>() * 0.3));
            weights.push(0.0);
        }
        let (row, _) = appearance_from_posterior(&coords, &weights, &b);
        // oracle: direct summation of the defining estimator
        let mut oracle = vec![0.0; 32];
        for (&s, &w) in coords.iter().zip(&weights) {
            for mu in 0..32 {
                oracle[mu] += bspline3(s - mu as f64) * w;
            }
        }
        let z: f64 = oracle.iter().sum();
        for (a, b) in row.iter().zip(&oracle) {
            assert!((a - b / z).abs() < 1e-12);
        }
        let below: f64 = row[..16].iter().sum();
        assert!(below > 0.9, "low-intensity mass {below}");
    }

    #[test]
    fn all_zero_weights_fall_back_to_uniform() {
        let b = Binning::new(8, 0.0, 1.0);
        let (row, degenerate) = appearance_from_posterior(&[0.5, 0.7], &[0.0, 0.0], &b);
        assert!(degenerate);
        assert!(row.iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn joint_table_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = Binning::new(12, 0.0, 1.0);
        let n = 200;
        let k = 3;
        let coords: Vec<f64> = (0..n).map(|_| b.coord(rng.gen())).collect();
        let mut gamma = vec![0.0; n * k];
        for row in gamma.chunks_exact_mut(k) {
            let mut z = 0.0;
            for g in row.iter_mut() {
                *g = rng.gen::<f64>();
                z += *g;
            }
            for g in row.iter_mut() {
                *g /= z;
            }
        }
        let t = joint_table(&coords, &gamma, k, &b).unwrap();
        // literal double loop over samples and bins
        let mut brute = vec![0.0; k * 12];
        for i in 0..n {
            for mu in 0..12 {
                let w = bspline3(coords[i] - mu as f64);
                for c in 0..k {
                    brute[c * 12 + mu] += w * gamma[i * k + c];
                }
            }
        }
        let z: f64 = brute.iter().sum();
        for v in &mut brute {
            *v /= z;
        }
        for (a, b) in t.p.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((t.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_class_is_parzen_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = Binning::new(10, 0.0, 1.0);
        let coords: Vec<f64> = (0..100).map(|_| b.coord(rng.gen())).collect();
        let gamma = vec![1.0; 100];
        let t = joint_table(&coords, &gamma, 1, &b).unwrap();
        let (hist, _) = appearance_from_posterior(&coords, &gamma, &b);
        for (a, h) in t.p.iter().zip(&hist) {
            assert!((a - h).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let k = 3;
        let l = 8;
        let n_img = 2;
        let n = 40;
        let binnings = vec![Binning::new(l, 0.0, 1.0); n_img];
        let mut tables = Vec::new();
        for _ in 0..n_img {
            let mut f = vec![0.0; k * l];
            for row in f.chunks_exact_mut(l) {
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen::<f64>() + 0.01;
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            tables.push(AppearanceTable { num_classes: k, levels: l, f, degenerate_rows: 0 });
        }
        let coords: Vec<Vec<f64>> = (0..n_img)
            .map(|_| (0..n).map(|_| binnings[0].coord(rng.gen())).collect())
            .collect();
        let pi = vec![0.5, 0.3, 0.2];
        let mut gamma = vec![0.0; n * k];
        let refs: Vec<&[f64]> = coords.iter().map(|c| c.as_slice()).collect();
        posterior_update(&refs, &tables, &pi, &binnings, &mut gamma);
        // direct per-sample products
        for s in 0..n {
            let mut direct = vec![0.0; k];
            for c in 0..k {
                let mut v = pi[c];
                for j in 0..n_img {
                    let mut lik = 0.0;
                    for mu in 0..l {
                        lik += bspline3(coords[j][s] - mu as f64) * tables[j].f[c * l + mu];
                    }
                    v *= lik;
                }
                direct[c] = v;
            }
            let z: f64 = direct.iter().sum();
            for c in 0..k {
                assert!((gamma[s * k + c] - direct[c] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uninformative_likelihood_returns_prior() {
        let k = 2;
        let l = 8;
        let b = vec![Binning::new(l, 0.0, 1.0)];
        // identical rows for both classes
        let mut f = vec![0.0; k * l];
        for row in f.chunks_exact_mut(l) {
            for (mu, v) in row.iter_mut().enumerate() {
                *v = (mu as f64 + 1.0) / 36.0;
            }
        }
        let tables = vec![AppearanceTable { num_classes: k, levels: l, f, degenerate_rows: 0 }];
        let coords = vec![0.3, 2.5, 6.9];
        let pi = vec![0.7, 0.3];
        let mut gamma = vec![0.0; 3 * k];
        posterior_update(&[&coords], &tables, &pi, &b, &mut gamma);
        for row in gamma.chunks_exact(k) {
            assert!((row[0] - 0.7).abs() < 1e-12 && (row[1] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_appearance_gives_one_hot_posterior() {
        let k = 2;
        let l = 8;
        let b = vec![Binning::new(l, 0.0, 7.0)];
        // class 0 owns bins 0..4, class 1 owns bins 4..8
        let mut f = vec![0.0; k * l];
        for mu in 0..4 {
            f[mu] = 0.25;
        }
        for mu in 4..8 {
            f[l + mu] = 0.25;
        }
        let tables = vec![AppearanceTable { num_classes: k, levels: l, f, degenerate_rows: 0 }];
        let coords = vec![1.0, 6.0];
        let pi = vec![0.5, 0.5];
        let mut gamma = vec![0.0; 2 * k];
        posterior_update(&[&coords], &tables, &pi, &b, &mut gamma);
        assert!(gamma[0] > 1.0 - 1e-9 && gamma[1] < 1e-9);
        assert!(gamma[2] < 1e-9 && gamma[3] > 1.0 - 1e-9);
    }

    #[test]
    fn all_zero_likelihood_falls_back_to_prior() {
        let k = 2;
        let l = 8;
        let b = vec![Binning::new(l, 0.0, 7.0)];
        let mut f = vec![0.0; k * l];
        // both classes own only bin 7; a sample at bin 0 has zero likelihood
        f[7] = 1.0;
        f[l + 7] = 1.0;
        let tables = vec![AppearanceTable { num_classes: k, levels: l, f, degenerate_rows: 0 }];
        let coords = vec![0.0];
        let pi = vec![0.6, 0.4];
        let mut gamma = vec![0.0; k];
        let fallbacks = posterior_update(&[&coords], &tables, &pi, &b, &mut gamma);
        assert_eq!(fallbacks, 1);
        assert!((gamma[0] - 0.6).abs() < 1e-15 && (gamma[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn prior_update_is_column_mean() {
        let k = 2;
        let gamma = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        // 10 rows one-hot, 4 of class 0
        let pi = prior_update(&gamma, k).unwrap();
        assert!((pi[0] - 0.4).abs() < 1e-14);
        assert!((pi[1] - 0.6).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let mut g = vec![0.0; n * k];
        for row in g.chunks_exact_mut(k) {
            let a: f64 = rng.gen();
            row[0] = a;
            row[1] = 1.0 - a;
        }
        let pi = prior_update(&g, k).unwrap();
        let mean0: f64 = g.chunks_exact(k).map(|r| r[0]).sum::<f64>() / n as f64;
        assert!((pi[0] - mean0).abs() < 1e-14);
    }

    #[test]
    fn init_is_uniform_prior_and_simplex_rows() {
        let grid = Grid::isotropic(vec![6, 6]).unwrap();
        let cs = init_common_space(&grid, 4, 9);
        assert!(cs.pi.iter().all(|&p| p == 0.25));
        assert!(cs.validate(1e-12));
        let cs2 = init_common_space(&grid, 4, 10);
        assert_ne!(cs.gamma, cs2.gamma);
    }

    #[test]
    fn labels_single_class_equals_parzen_histogram() {
        let grid = Grid::isotropic(vec![8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let v = Volume::new(grid, data.clone(), "m").unwrap();
        let b = Binning::from_volume(&v, 16);
        let t = appearance_from_labels(&v, &vec![0usize; 64], 1, &b);
        let coords: Vec<f64> = data.iter().map(|&u| b.coord(u)).collect();
        let (hist, _) = appearance_from_posterior(&coords, &vec![1.0; 64], &b);
        for (a, h) in t.row(0).iter().zip(&hist) {
            assert!((a - h).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_table_matches_double_loop() {
        let grid = Grid::isotropic(vec![8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let labels: Vec<usize> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let v = Volume::new(grid, data.clone(), "m").unwrap();
        let b = Binning::from_volume(&v, 12);
        let t = appearance_from_labels(&v, &labels, 3, &b);
        let mut brute = vec![0.0; 3 * 12];
        for i in 0..64 {
            let s = b.coord(data[i]);
            for mu in 0..12 {
                brute[labels[i] * 12 + mu] += bspline3(s - mu as f64);
            }
        }
        for k in 0..3 {
            let row = &mut brute[k * 12..(k + 1) * 12];
            let z: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        for (a, b) in t.f.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_constant_classes_yield_disjoint_rows() {
        let grid = Grid::isotropic(vec![4, 4]).unwrap();
        let mut data = vec![0.1; 16];
        for v in data.iter_mut().skip(8) {
            *v = 0.9;
        }
        let labels: Vec<usize> = (0..16).map(|i| usize::from(i >= 8)).collect();
        let v = Volume::new(grid, data, "m").unwrap();
        let b = Binning::new(16, 0.0, 1.0);
        let t = appearance_from_labels(&v, &labels, 2, &b);
        // each class's mass stays on its side of the histogram
        let low: f64 = t.row(0)[..8].iter().sum();
        let high: f64 = t.row(1)[8..].iter().sum();
        assert!(low > 0.999 && high > 0.999);
        for mu in 0..16 {
            assert!(t.row(0)[mu] * t.row(1)[mu] < 1e-12, "rows overlap at {mu}");
        }
    }

    #[test]
    fn posterior_is_scale_invariant_in_appearance() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let k = 3;
        let l = 8;
        let b = vec![Binning::new(l, 0.0, 1.0); 2];
        let mut mk_tables = |scale: f64| {
            let mut rng2 = ChaCha8Rng::seed_from_u64(77);
            (0..2)
                .map(|_| {
                    let mut f = vec![0.0; k * l];
                    for row in f.chunks_exact_mut(l) {
                        let mut z = 0.0;
                        for v in row.iter_mut() {
                            *v = rng2.gen::<f64>() + 0.01;
                            z += *v;
                        }
                        // normalize, then rescale one row before renormalizing:
                        // scaling a row by a constant pre-normalization must not
                        // change the posterior
                        for v in row.iter_mut() {
                            *v /= z;
                        }
                    }
                    for mu in 0..l {
                        f[mu] *= scale;
                    }
                    let z0: f64 = f[..l].iter().sum();
                    for v in f[..l].iter_mut() {
                        *v /= z0;
                    }
                    AppearanceTable { num_classes: k, levels: l, f, degenerate_rows: 0 }
                })
                .collect::<Vec<_>>()
        };
        let t1 = mk_tables(1.0);
        let t2 = mk_tables(7.5);
        let coords: Vec<Vec<f64>> =
            (0..2).map(|_| (0..30).map(|_| b[0].coord(rng.gen())).collect()).collect();
        let refs: Vec<&[f64]> = coords.iter().map(|c| c.as_slice()).collect();
        let pi = vec![1.0 / 3.0; 3];
        let mut g1 = vec![0.0; 30 * k];
        let mut g2 = vec![0.0; 30 * k];
        posterior_update(&refs, &t1, &pi, &b, &mut g1);
        posterior_update(&refs, &t2, &pi, &b, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
        let p1 = prior_update(&g1, k).unwrap();
        assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

//! Alternating-optimization registration driver: latent-anatomy updates
//! interleaved with Adam steps on the transform parameters, under
//! multi-resolution schedules and the staged protocols.

mod adam;
mod pyramid;

pub use adam::{adam_step, AdamState};
pub use pyramid::{downsample, gaussian_smooth, pyramid_level};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::density::{
    appearance_table, init_common_space, posterior_update, prior_update,
    AppearanceTable, Binning, CommonSpace,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{
    ape, build_metric_context, congealing, cte, gmm_em_step, gmm_init, gmm_loglik, vi, xmetric,
    xmetric_value, GmmModel, MetricKind, MetricValue,
};
use crate::sample::{draw_samples, SampleSet};
use crate::transform::{Composed, Ffd, FfdMesh, Rigid, Transform, TransformGroup, Translation};
use crate::volume::Volume;

/// Per-kind optimizer step sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StepSizes {
    pub translation: f64,
    pub center: f64,
    pub rotation: f64,
    pub affine: f64,
    pub ffd: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        StepSizes { translation: 1.0, center: 1.0, rotation: 0.01, affine: 0.01, ffd: 0.1 }
    }
}

/// One multi-resolution level: Gaussian sigma (voxels), decimation factor,
/// and the iteration budget spent at this level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub sigma: f64,
    pub factor: usize,
    pub iters: usize,
}

/// Coarse-to-fine halving schedule with the iteration budget split equally.
pub fn halving_pyramid(levels: usize, total_iters: usize) -> Vec<PyramidLevel> {
    let levels = levels.max(1);
    let per = (total_iters / levels).max(1);
    (0..levels)
        .map(|i| {
            let factor = 1usize << (levels - 1 - i);
            PyramidLevel {
                sigma: if factor > 1 { factor as f64 / 2.0 } else { 0.0 },
                factor,
                iters: per,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Convergence {
    pub window: usize,
    pub rtol: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence { window: 10, rtol: 1e-5 }
    }
}

/// Stage shape of the two-stage rigid protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StagedRigidParams {
    pub stage1_iters: usize,
    pub stage1_levels: usize,
    pub stage1_bins: usize,
    pub stage2_iters: usize,
    pub stage2_levels: usize,
    pub stage2_bins: usize,
}

impl Default for StagedRigidParams {
    fn default() -> Self {
        StagedRigidParams {
            stage1_iters: 200,
            stage1_levels: 4,
            stage1_bins: 32,
            stage2_iters: 400,
            stage2_levels: 2,
            stage2_bins: 64,
        }
    }
}

/// Stage shape of the motion-correction pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionCorrectParams {
    pub prefilter_sigma: f64,
    pub translation_iters: usize,
    pub rigid_iters: usize,
    pub ffd_iters: usize,
    pub rigid_levels: usize,
    /// FFD control mesh spacing in millimeters.
    pub ffd_mesh_mm: f64,
    pub lambda: f64,
    pub eta: Option<StepSizes>,
}

impl Default for MotionCorrectParams {
    fn default() -> Self {
        MotionCorrectParams {
            prefilter_sigma: 1.0,
            translation_iters: 100,
            rigid_iters: 50,
            ffd_iters: 50,
            rigid_levels: 2,
            ffd_mesh_mm: 40.0,
            lambda: 0.01,
            eta: None,
        }
    }
}

/// Registration configuration, consumed as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CoRegConfig {
    /// Iteration budget when no pyramid is configured.
    pub max_iters: usize,
    /// Regularization weight on the deformation bending energy.
    pub lambda: f64,
    pub eta: StepSizes,
    pub num_classes: usize,
    pub levels: usize,
    pub sample_rate: f64,
    pub pyramid: Vec<PyramidLevel>,
    pub metric: String,
    /// Transform model: translation | rigid | affine | ffd.
    pub model: String,
    /// FFD mesh spacings in voxels, one entry per mesh level (coarse to
    /// fine), optimized sequentially and composed by evaluation.
    pub ffd_spacings: Vec<f64>,
    pub zero_mean: bool,
    pub seed: u64,
    pub convergence: Convergence,
    /// Freeze the per-level sample set and zero the wall-time column for
    /// bit-reproducible traces.
    pub deterministic: bool,
    /// Draw a second, independent sample for the appearance tables.
    pub independent_table_samples: bool,
    /// Initialize the anatomy field uniformly instead of random softmax.
    pub warm_start_uniform: bool,
    pub congealing_sigma: f64,
    /// Mixture size for the GMM metric (defaults to `num_classes`).
    pub gmm_components: Option<usize>,
    /// Linear step-size decay within each pyramid level: the step scale
    /// falls from 1 to this fraction. 1.0 keeps steps constant.
    pub eta_final_fraction: f64,
    /// Floor on the per-iteration sample count so density tables stay fed
    /// at coarse pyramid levels (capped by the level grid size).
    pub min_samples: usize,
    pub staged: StagedRigidParams,
    pub moco: MotionCorrectParams,
}

impl Default for CoRegConfig {
    fn default() -> Self {
        CoRegConfig {
            max_iters: 100,
            lambda: 0.0,
            eta: StepSizes::default(),
            num_classes: 4,
            levels: 64,
            sample_rate: 0.1,
            pyramid: Vec::new(),
            metric: "xmetric".into(),
            model: "translation".into(),
            ffd_spacings: vec![32.0, 16.0],
            zero_mean: true,
            seed: 0,
            convergence: Convergence::default(),
            deterministic: false,
            independent_table_samples: false,
            warm_start_uniform: false,
            congealing_sigma: 0.05,
            gmm_components: None,
            eta_final_fraction: 1.0,
            min_samples: 512,
            staged: StagedRigidParams::default(),
            moco: MotionCorrectParams::default(),
        }
    }
}

impl CoRegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidConfig("sample_rate must lie in (0, 1]".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        MetricKind::parse(&self.metric)?;
        match self.model.as_str() {
            "translation" | "rigid" | "affine" | "ffd" => {}
            other => {
                return Err(Error::InvalidConfig(format!("unknown transform model '{other}'")))
            }
        }
        Ok(())
    }
}

/// One optimization step's log record.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iter: usize,
    pub metric: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub pi: Vec<f64>,
    pub seconds: f64,
    /// Metric value before the latent update at the same transforms and
    /// samples (latent-metric pipelines only).
    pub metric_pre: Option<f64>,
    pub posterior_fallbacks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub num_classes: usize,
}

impl IterationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,metric,loss,grad_norm");
        for k in 0..self.num_classes {
            out.push_str(&format!(",pi_{k}"));
        }
        out.push_str(",seconds\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}", r.iter, r.metric, r.loss, r.grad_norm));
            for k in 0..self.num_classes {
                let v = r.pi.get(k).copied().unwrap_or(0.0);
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.seconds));
        }
        out
    }

    /// Fraction of latent updates that did not decrease the metric (same
    /// transforms and samples on both sides of the update).
    pub fn latent_update_monotone_fraction(&self) -> Option<f64> {
        let mut total = 0usize;
        let mut ok = 0usize;
        for r in &self.records {
            if let Some(pre) = r.metric_pre {
                total += 1;
                if r.metric >= pre - 1e-12 {
                    ok += 1;
                }
            }
        }
        if total == 0 {
            None
        } else {
            Some(ok as f64 / total as f64)
        }
    }
}

/// Windowed mean-shift convergence test: true when the mean of the last
/// `window` losses differs from the mean one step earlier by less than
/// `rtol` in relative terms.
pub fn check_convergence(losses: &[f64], window: usize, rtol: f64) -> bool {
    let n = losses.len();
    if window == 0 || n < window + 1 {
        return false;
    }
    let m1: f64 = losses[n - window..].iter().sum::<f64>() / window as f64;
    let m0: f64 = losses[n - window - 1..n - 1].iter().sum::<f64>() / window as f64;
    (m1 - m0).abs() / m0.abs().max(1e-12) < rtol
}

/// Registration result: the overall effective transforms, the final anatomy
/// field on the full-resolution grid (latent-metric pipelines), and the
/// iteration log.
pub struct RegistrationOutput {
    pub group: TransformGroup,
    pub common_space: Option<(Grid, CommonSpace)>,
    pub trace: IterationTrace,
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = base ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn eta_vector(member: &Transform, eta: &StepSizes) -> Vec<f64> {
    match member {
        Transform::Translation(t) => vec![eta.translation; t.dim],
        Transform::Rigid(r) => {
            let mut v = vec![eta.center; r.dim];
            v.extend(vec![eta.rotation; r.num_angles()]);
            v.extend(vec![eta.translation; r.dim]);
            v
        }
        Transform::Affine(a) => {
            let mut v = vec![eta.affine; a.dim * a.dim];
            v.extend(vec![eta.translation; a.dim]);
            v
        }
        Transform::Ffd(f) => vec![eta.ffd; f.displacements.len()],
        Transform::Composed(c) => eta_vector(&c.outer, eta),
    }
}

/// Resample an anatomy field onto a new grid (multilinear per class, rows
/// renormalized). Points outside the old box clamp to its boundary.
fn resample_common_space(old_grid: &Grid, cs: &CommonSpace, new_grid: &Grid) -> CommonSpace {
    let k = cs.num_classes;
    let n_new = new_grid.len();
    let mut gamma = vec![0.0; n_new * k];
    let lo = old_grid.phys_min();
    let hi = old_grid.phys_max();
    let d = old_grid.ndim();
    let channels: Vec<Volume> = (0..k)
        .map(|c| {
            let data: Vec<f64> = (0..cs.num_points).map(|s| cs.gamma[s * k + c]).collect();
            Volume::new(old_grid.clone(), data, "g").expect("channel matches grid")
        })
        .collect();
    for i in 0..n_new {
        let mut p = new_grid.point_at(i);
        for a in 0..d {
            p[a] = p[a].clamp(lo[a], hi[a]);
        }
        let row = &mut gamma[i * k..(i + 1) * k];
        let mut z = 0.0;
        for (c, ch) in channels.iter().enumerate() {
            let v = ch.sample(&p).value.max(0.0);
            row[c] = v;
            z += v;
        }
        if z > 0.0 {
            for v in row.iter_mut() {
                *v /= z;
            }
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    CommonSpace { num_classes: k, num_points: n_new, gamma, pi: cs.pi.clone() }
}

fn uniform_common_space(num_points: usize, num_classes: usize) -> CommonSpace {
    CommonSpace {
        num_classes,
        num_points,
        gamma: vec![1.0 / num_classes as f64; num_points * num_classes],
        pi: vec![1.0 / num_classes as f64; num_classes],
    }
}

/// Combine a frozen base map with a newly optimized group into standalone
/// per-image transforms (`model ∘ base` by evaluation).
fn stack_group(base: Option<&TransformGroup>, model: &TransformGroup) -> TransformGroup {
    let members = (0..model.len())
        .map(|j| {
            let outer = model.effective(j);
            match base {
                None => outer,
                Some(b) => {
                    Transform::Composed(Box::new(Composed { outer, inner: b.effective(j) }))
                }
            }
        })
        .collect();
    TransformGroup::new(members, model.zero_mean)
}

/// Latent state carried across the iterations of one stage.
enum LatentState {
    /// Anatomy field over the current level grid, plus optionally a fixed
    /// appearance model (label-driven variant, rebuilt per pyramid level so
    /// it stays calibrated to the smoothed intensities).
    Anatomy { cs: CommonSpace, fixed_tables: Option<Vec<AppearanceTable>> },
    Mixture { model: Option<GmmModel>, components: usize },
    Stateless,
}

/// Label-driven appearance for one pyramid level: the class indicators are
/// smoothed and decimated exactly like the image, so the table stays
/// calibrated to the level's partial-volume intensities.
fn level_label_table(
    level_vol: &Volume,
    labels: &[usize],
    full_grid: &Grid,
    level: &PyramidLevel,
    num_classes: usize,
    binning: &Binning,
) -> AppearanceTable {
    let n = level_vol.data().len();
    let mut soft = vec![0.0; n * num_classes];
    for k in 0..num_classes {
        let indicator: Vec<f64> =
            labels.iter().map(|&l| if l == k { 1.0 } else { 0.0 }).collect();
        let vol = Volume::new(full_grid.clone(), indicator, "ind").expect("finite indicator");
        let lv = pyramid_level(&vol, level.sigma, level.factor);
        for (i, &w) in lv.data().iter().enumerate() {
            soft[i * num_classes + k] = w.max(0.0);
        }
    }
    let coords: Vec<f64> = level_vol.data().iter().map(|&u| binning.coord(u)).collect();
    appearance_table(&coords, &soft, num_classes, binning)
}

struct StageSpec<'a> {
    pyramid: Vec<PyramidLevel>,
    bins: usize,
    lambda: f64,
    metric: MetricKind,
    eta: &'a StepSizes,
    stage_tag: u64,
}

/// Run one optimization stage (one transform model over one pyramid).
/// Returns the final anatomy field on the full-resolution common grid for
/// latent-metric runs.
fn run_stage(
    volumes: &[Volume],
    labels: Option<&[Vec<usize>]>,
    cfg: &CoRegConfig,
    spec: &StageSpec,
    model: &mut TransformGroup,
    base: Option<&TransformGroup>,
    trace: &mut IterationTrace,
) -> Result<Option<(Grid, CommonSpace)>> {
    let num_images = volumes.len();
    let full_grid = volumes[0].grid().clone();
    let binnings: Vec<Binning> =
        volumes.iter().map(|v| Binning::from_volume(v, spec.bins)).collect();

    let mut latent = match spec.metric {
        MetricKind::XMetric => {
            LatentState::Anatomy { cs: uniform_common_space(0, cfg.num_classes), fixed_tables: None }
        }
        MetricKind::XMetricGt => {
            if labels.is_none() {
                return Err(Error::InvalidConfig(
                    "metric 'xmetric-gt' requires label maps".into(),
                ));
            }
            LatentState::Anatomy {
                cs: uniform_common_space(0, cfg.num_classes),
                fixed_tables: Some(Vec::new()),
            }
        }
        MetricKind::Gmm => LatentState::Mixture {
            model: None,
            components: cfg.gmm_components.unwrap_or(cfg.num_classes),
        },
        _ => LatentState::Stateless,
    };

    let mut adam_states: Vec<AdamState> =
        model.members.iter().map(|m| AdamState::new(m.num_params())).collect();
    let eta_vecs: Vec<Vec<f64>> = model.members.iter().map(|m| eta_vector(m, spec.eta)).collect();

    let mut iter_global = trace.records.len();
    let mut prev_level_grid: Option<Grid> = None;

    for (li, level) in spec.pyramid.iter().enumerate() {
        let level_vols: Vec<Volume> =
            volumes.iter().map(|v| pyramid_level(v, level.sigma, level.factor)).collect();
        let level_grid = level_vols[0].grid().clone();
        let full_samples = draw_samples(&level_grid, 1.0, 0);

        // carry the anatomy field across levels
        if let LatentState::Anatomy { cs, fixed_tables } = &mut latent {
            if let Some(prev) = &prev_level_grid {
                *cs = resample_common_space(prev, cs, &level_grid);
            } else if cfg.warm_start_uniform {
                *cs = uniform_common_space(level_grid.len(), cfg.num_classes);
            } else {
                *cs = init_common_space(
                    &level_grid,
                    cfg.num_classes,
                    derive_seed(cfg.seed, spec.stage_tag, 0xA11CE + li as u64),
                );
            }
            // label-driven appearance: rebuild from this level's smoothed
            // volumes so the likelihoods match the level's intensities
            if let (Some(tables), Some(labels)) = (fixed_tables.as_mut(), labels) {
                *tables = level_vols
                    .iter()
                    .zip(labels)
                    .zip(&binnings)
                    .map(|((v, l), b)| {
                        level_label_table(v, l, &full_grid, level, cfg.num_classes, b)
                    })
                    .collect();
            }
        }
        prev_level_grid = Some(level_grid.clone());

        let level_rate = effective_rate(cfg, level_grid.len());
        let frozen_samples = if cfg.deterministic || level_rate >= 1.0 {
            Some(draw_samples(
                &level_grid,
                level_rate,
                derive_seed(cfg.seed, spec.stage_tag + 31 * li as u64, 0),
            ))
        } else {
            None
        };

        let mut losses = Vec::with_capacity(level.iters);
        for t in 0..level.iters {
            let start = Instant::now();
            let samples: SampleSet = match &frozen_samples {
                Some(s) => s.clone(),
                None => draw_samples(
                    &level_grid,
                    level_rate,
                    derive_seed(cfg.seed, spec.stage_tag + 31 * li as u64, t as u64 + 1),
                ),
            };
            let ctx = build_metric_context(&level_vols, model, base, &samples, &binnings, true);
            if ctx.num_overlap == 0 {
                return Err(Error::EmptyOverlap);
            }

            let mut pi_record = vec![0.0; cfg.num_classes];
            let mut metric_pre = None;
            let mut fallbacks = 0usize;
            let mv: MetricValue = match &mut latent {
                LatentState::Anatomy { cs, fixed_tables } => {
                    let k = cfg.num_classes;
                    let gather = |cs: &CommonSpace| -> Vec<f64> {
                        let mut rows = Vec::with_capacity(ctx.num_overlap * k);
                        for (s, &grid_idx) in samples.indices.iter().enumerate() {
                            if ctx.overlap[s] {
                                rows.extend_from_slice(cs.gamma_row(grid_idx));
                            }
                        }
                        rows
                    };
                    let gamma_old = gather(cs);
                    metric_pre = Some(xmetric_value(&ctx, &gamma_old, k)?);
                    let tables: Vec<AppearanceTable> = match fixed_tables {
                        Some(t) => t.clone(),
                        None if cfg.independent_table_samples => {
                            let s2 = draw_samples(
                                &level_grid,
                                level_rate,
                                derive_seed(
                                    cfg.seed,
                                    spec.stage_tag + 977 + 31 * li as u64,
                                    t as u64 + 1,
                                ),
                            );
                            let c2 = build_metric_context(
                                &level_vols,
                                model,
                                base,
                                &s2,
                                &binnings,
                                false,
                            );
                            let mut rows = Vec::new();
                            for (s, &grid_idx) in s2.indices.iter().enumerate() {
                                if c2.overlap[s] {
                                    rows.extend_from_slice(cs.gamma_row(grid_idx));
                                }
                            }
                            (0..num_images)
                                .map(|j| {
                                    appearance_table(&c2.overlap_coords(j), &rows, k, &binnings[j])
                                })
                                .collect()
                        }
                        None => (0..num_images)
                            .map(|j| {
                                appearance_table(&ctx.overlap_coords(j), &gamma_old, k, &binnings[j])
                            })
                            .collect(),
                    };
                    // dense posterior over the whole level grid
                    let dense = build_metric_context(
                        &level_vols,
                        model,
                        base,
                        &full_samples,
                        &binnings,
                        false,
                    );
                    let dense_overlap: Vec<usize> = dense.overlap_indices();
                    let coords_dense: Vec<Vec<f64>> =
                        (0..num_images).map(|j| dense.overlap_coords(j)).collect();
                    let coord_refs: Vec<&[f64]> =
                        coords_dense.iter().map(|c| c.as_slice()).collect();
                    let mut gamma_new = vec![0.0; dense_overlap.len() * k];
                    fallbacks =
                        posterior_update(&coord_refs, &tables, &cs.pi, &binnings, &mut gamma_new);
                    for (row_i, &grid_idx) in dense_overlap.iter().enumerate() {
                        cs.gamma_row_mut(grid_idx)
                            .copy_from_slice(&gamma_new[row_i * k..(row_i + 1) * k]);
                    }
                    // prior from the sampled overlap subset
                    let gamma_sampled = gather(cs);
                    cs.pi = prior_update(&gamma_sampled, k)?;
                    pi_record.copy_from_slice(&cs.pi);
                    xmetric(&ctx, &gamma_sampled, k)?
                }
                LatentState::Mixture { model: gmm, components } => {
                    if gmm.is_none() {
                        *gmm = Some(gmm_init(
                            &ctx,
                            *components,
                            derive_seed(cfg.seed, spec.stage_tag, 0x6333),
                        )?);
                    }
                    let updated = gmm_em_step(&ctx, gmm.as_ref().expect("just initialized"))?;
                    let mv = gmm_loglik(&ctx, &updated)?;
                    for (p, w) in pi_record.iter_mut().zip(&updated.weights) {
                        *p = *w;
                    }
                    *gmm = Some(updated);
                    mv
                }
                LatentState::Stateless => match spec.metric {
                    MetricKind::Congealing => congealing(&ctx, cfg.congealing_sigma)?.metric,
                    MetricKind::Ape => ape(&ctx)?,
                    MetricKind::Cte => cte(&ctx, None)?,
                    MetricKind::Vi => vi(&ctx)?,
                    _ => unreachable!("latent metrics handled above"),
                },
            };

            // loss = -metric + lambda * bending energy
            let mut loss = -mv.value;
            let mut grad = vec![0.0; ctx.total_params];
            for (g, &m) in grad.iter_mut().zip(&mv.gradient) {
                *g = -m;
            }
            if spec.lambda != 0.0 {
                for (j, member) in model.members.iter().enumerate() {
                    if let Transform::Ffd(f) = member {
                        let (be, be_grad) = f.bending_energy();
                        loss += spec.lambda * be;
                        let off = ctx.param_offsets[j];
                        for (g, &bg) in grad[off..off + be_grad.len()].iter_mut().zip(&be_grad) {
                            *g += spec.lambda * bg;
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(iter_global));
            }
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

            let decay = if level.iters > 1 {
                let frac = cfg.eta_final_fraction.clamp(0.0, 1.0);
                1.0 - (1.0 - frac) * (t as f64 / (level.iters - 1) as f64)
            } else {
                1.0
            };
            for (j, member) in model.members.iter_mut().enumerate() {
                let off = ctx.param_offsets[j];
                let n = member.num_params();
                let mut params = member.params();
                let eta_t: Vec<f64> = eta_vecs[j].iter().map(|e| e * decay).collect();
                adam_step(&mut params, &grad[off..off + n], &mut adam_states[j], &eta_t)?;
                member.set_params(&params);
            }
            if cfg.zero_mean {
                model.project_zero_mean()?;
            }

            let seconds = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            trace.records.push(IterationRecord {
                iter: iter_global,
                metric: mv.value,
                loss,
                grad_norm,
                pi: pi_record,
                seconds,
                metric_pre,
                posterior_fallbacks: fallbacks,
            });
            iter_global += 1;
            losses.push(loss);
            if check_convergence(&losses, cfg.convergence.window, cfg.convergence.rtol) {
                break;
            }
        }
    }

    // export the anatomy field on the full-resolution grid
    if let LatentState::Anatomy { cs, .. } = latent {
        let level_grid = prev_level_grid.expect("at least one pyramid level");
        let full = if level_grid == full_grid {
            cs
        } else {
            resample_common_space(&level_grid, &cs, &full_grid)
        };
        Ok(Some((full_grid, full)))
    } else {
        Ok(None)
    }
}

/// Sample rate after applying the count floor at small grids.
fn effective_rate(cfg: &CoRegConfig, grid_len: usize) -> f64 {
    let want = (cfg.sample_rate * grid_len as f64).ceil();
    let floor = cfg.min_samples.min(grid_len) as f64;
    (want.max(floor) / grid_len as f64).min(1.0)
}

fn check_inputs(volumes: &[Volume]) -> Result<()> {
    if volumes.len() < 2 {
        return Err(Error::TooFewImages("registration", 2, volumes.len()));
    }
    let d = volumes[0].grid().ndim();
    if volumes.iter().any(|v| v.grid().ndim() != d) {
        return Err(Error::InvalidConfig("images must share dimensionality".into()));
    }
    Ok(())
}

fn default_stage_pyramid(cfg: &CoRegConfig) -> Vec<PyramidLevel> {
    if cfg.pyramid.is_empty() {
        vec![PyramidLevel { sigma: 0.0, factor: 1, iters: cfg.max_iters }]
    } else {
        cfg.pyramid.clone()
    }
}

/// Generic co-registration of an image group with the configured metric and
/// transform model.
pub fn xcoreg(volumes: &[Volume], cfg: &CoRegConfig) -> Result<RegistrationOutput> {
    xcoreg_with_labels(volumes, None, cfg)
}

/// As [`xcoreg`], with per-image label maps for the label-driven appearance
/// variant.
pub fn xcoreg_with_labels(
    volumes: &[Volume],
    labels: Option<&[Vec<usize>]>,
    cfg: &CoRegConfig,
) -> Result<RegistrationOutput> {
    check_inputs(volumes)?;
    cfg.validate()?;
    let metric = MetricKind::parse(&cfg.metric)?;
    let grid = volumes[0].grid().clone();
    let d = grid.ndim();
    let mut trace = IterationTrace { records: Vec::new(), num_classes: cfg.num_classes };
    let pyramid = default_stage_pyramid(cfg);

    match cfg.model.as_str() {
        "ffd" => {
            let mesh_levels = if cfg.ffd_spacings.is_empty() {
                vec![32.0]
            } else {
                cfg.ffd_spacings.clone()
            };
            let mut base: Option<TransformGroup> = None;
            let mut cs_out = None;
            for (mi, &spacing_px) in mesh_levels.iter().enumerate() {
                let mesh_mm: Vec<f64> = (0..d).map(|a| spacing_px * grid.spacing()[a]).collect();
                let mesh = FfdMesh::covering(&grid, &mesh_mm);
                let members = (0..volumes.len())
                    .map(|_| Transform::Ffd(Ffd::identity(mesh.clone())))
                    .collect();
                let mut model = TransformGroup::new(members, cfg.zero_mean);
                let split: Vec<PyramidLevel> = pyramid
                    .iter()
                    .map(|l| PyramidLevel {
                        sigma: l.sigma,
                        factor: l.factor,
                        iters: (l.iters / mesh_levels.len()).max(1),
                    })
                    .collect();
                let spec = StageSpec {
                    pyramid: split,
                    bins: cfg.levels,
                    lambda: cfg.lambda,
                    metric,
                    eta: &cfg.eta,
                    stage_tag: 7000 + mi as u64,
                };
                cs_out =
                    run_stage(volumes, labels, cfg, &spec, &mut model, base.as_ref(), &mut trace)?;
                base = Some(stack_group(base.as_ref(), &model));
            }
            Ok(RegistrationOutput {
                group: base.expect("at least one mesh level"),
                common_space: cs_out,
                trace,
            })
        }
        kind => {
            let members: Vec<Transform> = (0..volumes.len())
                .map(|_| match kind {
                    "translation" => Transform::Translation(Translation::zero(d)),
                    "rigid" => Transform::Rigid(Rigid::identity(d, &grid.center())),
                    _ => Transform::Affine(crate::transform::Affine::identity(d)),
                })
                .collect();
            let mut model = TransformGroup::new(members, cfg.zero_mean);
            let spec = StageSpec {
                pyramid,
                bins: cfg.levels,
                lambda: cfg.lambda,
                metric,
                eta: &cfg.eta,
                stage_tag: 1,
            };
            let cs_out = run_stage(volumes, labels, cfg, &spec, &mut model, None, &mut trace)?;
            Ok(RegistrationOutput {
                group: stack_group(None, &model),
                common_space: cs_out,
                trace,
            })
        }
    }
}

/// Two-stage rigid protocol: translation-only first, then the full rigid
/// parameterization initialized from the recovered offsets, each under its
/// own multi-resolution schedule.
pub fn staged_rigid(volumes: &[Volume], cfg: &CoRegConfig) -> Result<RegistrationOutput> {
    check_inputs(volumes)?;
    cfg.validate()?;
    let metric = MetricKind::parse(&cfg.metric)?;
    let grid = volumes[0].grid().clone();
    let d = grid.ndim();
    let p = &cfg.staged;
    let mut trace = IterationTrace { records: Vec::new(), num_classes: cfg.num_classes };

    // stage 1: translation
    let members =
        (0..volumes.len()).map(|_| Transform::Translation(Translation::zero(d))).collect();
    let mut stage1 = TransformGroup::new(members, cfg.zero_mean);
    let spec1 = StageSpec {
        pyramid: halving_pyramid(p.stage1_levels, p.stage1_iters),
        bins: p.stage1_bins,
        lambda: 0.0,
        metric,
        eta: &cfg.eta,
        stage_tag: 11,
    };
    run_stage(volumes, None, cfg, &spec1, &mut stage1, None, &mut trace)?;

    // stage 2: full rigid with the recovered offsets embedded
    let center = grid.center();
    let members = (0..volumes.len())
        .map(|j| {
            let mut r = Rigid::identity(d, &center);
            if let Transform::Translation(t) = &stage1.members[j] {
                r.offset.copy_from_slice(&t.offset);
            }
            Transform::Rigid(r)
        })
        .collect();
    let mut stage2 = TransformGroup::new(members, cfg.zero_mean);
    let spec2 = StageSpec {
        pyramid: halving_pyramid(p.stage2_levels, p.stage2_iters),
        bins: p.stage2_bins,
        lambda: 0.0,
        metric,
        eta: &cfg.eta,
        stage_tag: 13,
    };
    let cs_out = run_stage(volumes, None, cfg, &spec2, &mut stage2, None, &mut trace)?;
    Ok(RegistrationOutput { group: stack_group(None, &stage2), common_space: cs_out, trace })
}

/// Motion correction for an image sequence: Gaussian prefilter, then
/// translation, full rigid, and a coarse free-form deformation, all under
/// the zero-mean constraint.
pub fn motion_correct(sequence: &[Volume], cfg: &CoRegConfig) -> Result<RegistrationOutput> {
    if sequence.len() < 3 {
        return Err(Error::TooFewImages("motion_correct", 3, sequence.len()));
    }
    cfg.validate()?;
    let metric = MetricKind::parse(&cfg.metric)?;
    let p = cfg.moco.clone();
    let eta = p.eta.clone().unwrap_or(StepSizes {
        translation: 0.1,
        center: 0.1,
        rotation: 0.001,
        affine: 0.01,
        ffd: 0.1,
    });
    let filtered: Vec<Volume> =
        sequence.iter().map(|v| gaussian_smooth(v, p.prefilter_sigma)).collect();
    let grid = filtered[0].grid().clone();
    let d = grid.ndim();
    let n = filtered.len();
    let mut trace = IterationTrace { records: Vec::new(), num_classes: cfg.num_classes };

    // translation stage
    let members = (0..n).map(|_| Transform::Translation(Translation::zero(d))).collect();
    let mut trans = TransformGroup::new(members, cfg.zero_mean);
    let spec_t = StageSpec {
        pyramid: halving_pyramid(p.rigid_levels, p.translation_iters),
        bins: cfg.levels,
        lambda: 0.0,
        metric,
        eta: &eta,
        stage_tag: 21,
    };
    run_stage(&filtered, None, cfg, &spec_t, &mut trans, None, &mut trace)?;

    // rigid stage, offsets embedded
    let center = grid.center();
    let members = (0..n)
        .map(|j| {
            let mut r = Rigid::identity(d, &center);
            if let Transform::Translation(t) = &trans.members[j] {
                r.offset.copy_from_slice(&t.offset);
            }
            Transform::Rigid(r)
        })
        .collect();
    let mut rigid = TransformGroup::new(members, cfg.zero_mean);
    let spec_r = StageSpec {
        pyramid: halving_pyramid(p.rigid_levels, p.rigid_iters),
        bins: cfg.levels,
        lambda: 0.0,
        metric,
        eta: &eta,
        stage_tag: 23,
    };
    run_stage(&filtered, None, cfg, &spec_r, &mut rigid, None, &mut trace)?;
    let rigid_stack = stack_group(None, &rigid);

    // coarse nonrigid refinement
    let mesh_mm: Vec<f64> = (0..d).map(|_| p.ffd_mesh_mm).collect();
    let mesh = FfdMesh::covering(&grid, &mesh_mm);
    let members = (0..n).map(|_| Transform::Ffd(Ffd::identity(mesh.clone()))).collect();
    let mut ffd = TransformGroup::new(members, cfg.zero_mean);
    let spec_f = StageSpec {
        pyramid: vec![PyramidLevel { sigma: 0.0, factor: 1, iters: p.ffd_iters }],
        bins: cfg.levels,
        lambda: p.lambda,
        metric,
        eta: &eta,
        stage_tag: 29,
    };
    let cs_out =
        run_stage(&filtered, None, cfg, &spec_f, &mut ffd, Some(&rigid_stack), &mut trace)?;
    Ok(RegistrationOutput {
        group: stack_group(Some(&rigid_stack), &ffd),
        common_space: cs_out,
        trace,
    })
}

/// Pipeline dispatch used by the command-line front end.
pub fn run_pipeline(
    pipeline: &str,
    volumes: &[Volume],
    labels: Option<&[Vec<usize>]>,
    cfg: &CoRegConfig,
) -> Result<RegistrationOutput> {
    match pipeline {
        "xcoreg" => xcoreg_with_labels(volumes, labels, cfg),
        "staged_rigid" => staged_rigid(volumes, cfg),
        "motion_correct" => motion_correct(volumes, cfg),
        other => Err(Error::InvalidConfig(format!("unknown pipeline '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::testutil::random_volume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn convergence_fires_on_constant_and_holds_on_slopes() {
        let constant = vec![5.0; 11];
        assert!(check_convergence(&constant, 10, 1e-5));
        assert!(!check_convergence(&constant[..10], 10, 1e-5));
        let sloped: Vec<f64> = (0..30).map(|i| 10.0 - 0.1 * i as f64).collect();
        assert!(!check_convergence(&sloped, 10, 1e-5));
    }

    #[test]
    fn convergence_on_noisy_plateau() {
        let mut hits = 0;
        let trials = 200;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut losses = Vec::new();
            let mut fired = false;
            for _ in 0..20 {
                losses.push(1.0 + 1e-7 * (rng.gen::<f64>() - 0.5));
                if check_convergence(&losses, 10, 1e-5) {
                    fired = true;
                    break;
                }
            }
            if fired {
                hits += 1;
            }
        }
        assert!(hits as f64 / trials as f64 >= 0.95, "fired in {hits}/{trials}");
    }

    #[test]
    fn aligned_identical_images_stay_near_identity() {
        let v = random_volume(vec![32, 32], 5);
        let vols = vec![v.clone(), v.clone(), v];
        let cfg = CoRegConfig {
            max_iters: 10,
            model: "translation".into(),
            metric: "xmetric".into(),
            num_classes: 3,
            levels: 16,
            sample_rate: 1.0,
            deterministic: true,
            seed: 4,
            ..Default::default()
        };
        let out = xcoreg(&vols, &cfg).unwrap();
        let grid = vols[0].grid();
        for j in 0..3 {
            for idx in [0usize, 31, 17 * 32 + 9] {
                let x = grid.point_at(idx);
                let y = out.group.apply(j, &x);
                let disp = ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)).sqrt();
                assert!(disp < 1e-3, "image {j}: displacement {disp}");
            }
        }
        assert_eq!(out.trace.records.len(), 10);
    }

    #[test]
    fn translation_offset_is_recovered() {
        // two copies of one image, one translated by (3, 0) voxels
        let base = random_volume(vec![48, 48], 11);
        let smooth = gaussian_smooth(&base, 1.5);
        let grid = smooth.grid().clone();
        let shifted: Vec<f64> = (0..grid.len())
            .map(|i| {
                let mut p = grid.point_at(i);
                p[0] = (p[0] + 3.0).clamp(0.0, 47.0);
                smooth.sample(&p).value
            })
            .collect();
        let moved = Volume::new(grid.clone(), shifted, "m").unwrap();
        let cfg = CoRegConfig {
            max_iters: 150,
            model: "translation".into(),
            metric: "xmetric".into(),
            num_classes: 2,
            levels: 32,
            sample_rate: 1.0,
            deterministic: true,
            zero_mean: true,
            seed: 8,
            eta: StepSizes { translation: 0.3, ..Default::default() },
            ..Default::default()
        };
        let out = xcoreg(&[smooth.clone(), moved], &cfg).unwrap();
        // image 1 samples the scene at p + 3, i.e. its content sits 3 voxels
        // to the left; recovery maps common-space points 3 voxels back:
        // phi_1(x) - phi_0(x) -> (-3, 0)
        let x = [24.0, 24.0, 0.0];
        let y0 = out.group.apply(0, &x);
        let y1 = out.group.apply(1, &x);
        let rel = y1[0] - y0[0];
        assert!((rel + 3.0).abs() < 0.2, "recovered relative offset {rel}");
        assert!((y1[1] - y0[1]).abs() < 0.2);
    }

    #[test]
    fn deterministic_runs_produce_identical_traces() {
        let v0 = random_volume(vec![24, 24], 1);
        let v1 = random_volume(vec![24, 24], 2);
        let cfg = CoRegConfig {
            max_iters: 8,
            model: "rigid".into(),
            metric: "vi".into(),
            sample_rate: 0.5,
            deterministic: true,
            seed: 99,
            ..Default::default()
        };
        let a = xcoreg(&[v0.clone(), v1.clone()], &cfg).unwrap();
        let b = xcoreg(&[v0, v1], &cfg).unwrap();
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        assert_eq!(a.group.params_concat(), b.group.params_concat());
    }

    #[test]
    fn zero_mean_holds_at_corners_after_registration() {
        let v0 = random_volume(vec![24, 24], 3);
        let v1 = random_volume(vec![24, 24], 4);
        let v2 = random_volume(vec![24, 24], 5);
        let cfg = CoRegConfig {
            max_iters: 12,
            model: "rigid".into(),
            metric: "xmetric".into(),
            num_classes: 2,
            levels: 16,
            sample_rate: 1.0,
            deterministic: true,
            zero_mean: true,
            seed: 17,
            ..Default::default()
        };
        let out = xcoreg(&[v0.clone(), v1, v2], &cfg).unwrap();
        for corner in v0.grid().corners() {
            let m = out.group.mean_displacement(&corner);
            let norm = (m[0] * m[0] + m[1] * m[1]).sqrt();
            assert!(norm < 1e-6, "corner {corner:?}: mean displacement {norm}");
        }
    }

    #[test]
    fn single_frame_sequence_is_rejected() {
        let v = random_volume(vec![16, 16], 1);
        let cfg = CoRegConfig::default();
        assert!(matches!(
            motion_correct(&[v.clone()], &cfg),
            Err(Error::TooFewImages("motion_correct", 3, 1))
        ));
        assert!(motion_correct(&[v.clone(), v.clone()], &cfg).is_err());
    }

    #[test]
    fn trace_csv_has_declared_columns() {
        let trace = IterationTrace {
            records: vec![IterationRecord {
                iter: 0,
                metric: 1.5,
                loss: -1.5,
                grad_norm: 0.25,
                pi: vec![0.5, 0.5],
                seconds: 0.0,
                metric_pre: None,
                posterior_fallbacks: 0,
            }],
            num_classes: 2,
        };
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,metric,loss,grad_norm,pi_0,pi_1,seconds\n"));
        assert!(csv.contains("0,1.5,-1.5,0.25,0.5,0.5,0"));
    }

    #[test]
    fn simplex_invariants_hold_through_a_run() {
        let v0 = random_volume(vec![24, 24], 31);
        let v1 = random_volume(vec![24, 24], 32);
        let cfg = CoRegConfig {
            max_iters: 15,
            model: "translation".into(),
            metric: "xmetric".into(),
            num_classes: 3,
            levels: 16,
            sample_rate: 0.5,
            seed: 2,
            deterministic: true,
            ..Default::default()
        };
        let out = xcoreg(&[v0, v1], &cfg).unwrap();
        let (_, cs) = out.common_space.expect("latent pipeline returns the field");
        assert!(cs.validate(1e-9));
        for r in &out.trace.records {
            let s: f64 = r.pi.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

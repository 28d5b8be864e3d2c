//! Synthetic phantoms, ground-truth misalignments, and the quantitative
//! evaluation scores: groupwise warping index, groupwise registration
//! error, and pairwise overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coreg::gaussian_smooth;
use crate::error::{Error, Result};
use crate::grid::{Grid, Point, MAX_DIM};
use crate::transform::{Affine, Ffd, FfdMesh, Rigid, Transform, TransformGroup, Translation};
use crate::volume::Volume;

/// Ground truth of a synthetic case: the initial misalignments and the
/// phantom-space foreground mask.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub misalignment: TransformGroup,
    pub grid: Grid,
    pub foreground: Vec<bool>,
}

/// Synthetic phantom recipe, serializable for the batch front end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    /// Tissue classes including the background class 0.
    pub num_classes: usize,
    pub num_modalities: usize,
    /// Additive Gaussian intensity noise.
    pub noise_sigma: f64,
    /// Smoothing of the class indicator fields, in voxels.
    pub blob_sigma: f64,
    /// Partial-volume smoothing of the rendered intensities, in voxels;
    /// zero keeps boundaries razor sharp.
    pub edge_sigma: f64,
    /// Optional multiplicative low-order polynomial bias field.
    pub bias_field: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: vec![128, 128],
            num_classes: 4,
            num_modalities: 3,
            noise_sigma: 0.03,
            blob_sigma: 12.0,
            edge_sigma: 0.8,
            bias_field: false,
            seed: 0,
        }
    }
}

/// Phantom output: aligned per-modality volumes over one anatomy.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volumes: Vec<Volume>,
    pub labels: Vec<usize>,
    pub foreground: Vec<bool>,
    pub grid: Grid,
    /// Class mean intensity per modality (`means[m][k]`).
    pub class_means: Vec<Vec<f64>>,
}

fn gauss_field(grid: &Grid, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let data: Vec<f64> = (0..grid.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let v = Volume::new(grid.clone(), data, "noise").expect("finite noise");
    let smooth = gaussian_smooth(&v, sigma);
    // standardize so fields are comparable across sigma choices
    let n = smooth.data().len() as f64;
    let mean: f64 = smooth.data().iter().sum::<f64>() / n;
    let var: f64 = smooth.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    smooth.data().iter().map(|x| (x - mean) / sd).collect()
}

/// Generate `num_modalities` aligned images of one random smooth anatomy.
///
/// Tissue regions are the argmax of smoothed noise fields, with the
/// background class biased toward the image periphery. Each modality maps
/// class labels to means through its own permutation (forcing multimodal
/// appearance), plus additive Gaussian noise.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidConfig("phantom needs at least 2 classes".into()));
    }
    let grid = Grid::isotropic(spec.dims.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let d = grid.ndim();
    let fields: Vec<Vec<f64>> = (0..k).map(|_| gauss_field(&grid, spec.blob_sigma, &mut rng)).collect();
    let center = grid.center();
    let half_extent: f64 = (0..d)
        .map(|a| (grid.phys_max()[a] - grid.phys_min()[a]) / 2.0)
        .fold(f64::INFINITY, f64::min);
    let mut labels = vec![0usize; grid.len()];
    for i in 0..grid.len() {
        let p = grid.point_at(i);
        let r: f64 = (0..d)
            .map(|a| (p[a] - center[a]) * (p[a] - center[a]))
            .sum::<f64>()
            .sqrt()
            / half_extent;
        let mut best = 0usize;
        let mut score = fields[0][i] + 3.0 * (r - 0.55);
        for (c, field) in fields.iter().enumerate().skip(1) {
            if field[i] > score {
                best = c;
                score = field[i];
            }
        }
        labels[i] = best;
    }
    let foreground: Vec<bool> = labels.iter().map(|&l| l != 0).collect();

    // per-modality class means: distinct seeded permutations of an evenly
    // spaced intensity ladder
    let ladder: Vec<f64> =
        (0..k).map(|i| 0.1 + 0.8 * i as f64 / (k - 1).max(1) as f64).collect();
    let mut perms: Vec<Vec<usize>> = Vec::new();
    for m in 0..spec.num_modalities {
        let mut perm: Vec<usize> = (0..k).collect();
        if m > 0 {
            loop {
                for i in (1..k).rev() {
                    let j = rng.gen_range(0..=i);
                    perm.swap(i, j);
                }
                if !perms.contains(&perm) {
                    break;
                }
            }
        }
        perms.push(perm);
    }
    let class_means: Vec<Vec<f64>> =
        perms.iter().map(|p| p.iter().map(|&i| ladder[i]).collect()).collect();

    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut volumes = Vec::with_capacity(spec.num_modalities);
    for m in 0..spec.num_modalities {
        let bias: Option<[f64; 3]> = if spec.bias_field {
            Some([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
        } else {
            None
        };
        let clean: Vec<f64> = (0..grid.len())
            .map(|i| {
                let mut v = class_means[m][labels[i]];
                if let Some(c) = bias {
                    let p = grid.point_at(i);
                    let x = 2.0 * (p[0] - center[0]) / (grid.phys_max()[0] - grid.phys_min()[0]);
                    let y = 2.0 * (p[1] - center[1])
                        / (grid.phys_max()[1.min(d - 1)] - grid.phys_min()[1.min(d - 1)]);
                    v *= 1.0 + 0.2 * (c[0] * x + c[1] * y + c[2] * x * y);
                }
                v
            })
            .collect();
        let rendered = gaussian_smooth(
            &Volume::new(grid.clone(), clean, format!("mod{m}"))?,
            spec.edge_sigma,
        );
        let data: Vec<f64> = rendered
            .data()
            .iter()
            .map(|&v| v + spec.noise_sigma * gauss(&mut rng))
            .collect();
        volumes.push(Volume::new(grid.clone(), data, format!("mod{m}"))?);
    }
    Ok(Phantom { volumes, labels, foreground, grid, class_means })
}

/// Misalignment family and magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MisalignSpec {
    Rigid {
        max_angle_deg: f64,
        max_shift: f64,
    },
    Ffd {
        /// Control mesh spacing in voxels.
        mesh_spacing: f64,
        /// Per-component displacement cap in millimeters.
        max_disp: f64,
    },
    Translation {
        max_shift: f64,
    },
}

/// Random ground-truth misalignment group within the stated bounds.
pub fn make_misalignment(
    grid: &Grid,
    num_images: usize,
    spec: &MisalignSpec,
    zero_mean: bool,
    seed: u64,
) -> Result<TransformGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.ndim();
    let members: Vec<Transform> = match spec {
        MisalignSpec::Translation { max_shift } => (0..num_images)
            .map(|_| {
                Transform::Translation(Translation::new(
                    (0..d).map(|_| rng.gen_range(-max_shift..=*max_shift)).collect(),
                ))
            })
            .collect(),
        MisalignSpec::Rigid { max_angle_deg, max_shift } => {
            let max_angle = max_angle_deg.to_radians();
            let center = grid.center();
            (0..num_images)
                .map(|_| {
                    let n_angles = if d == 2 { 1 } else { 3 };
                    Transform::Rigid(Rigid {
                        dim: d,
                        center: center[..d].to_vec(),
                        angles: (0..n_angles)
                            .map(|_| rng.gen_range(-max_angle..=max_angle))
                            .collect(),
                        offset: (0..d).map(|_| rng.gen_range(-max_shift..=*max_shift)).collect(),
                    })
                })
                .collect()
        }
        MisalignSpec::Ffd { mesh_spacing, max_disp } => {
            let mesh_mm: Vec<f64> =
                (0..d).map(|a| mesh_spacing * grid.spacing()[a]).collect();
            let mesh = FfdMesh::covering(grid, &mesh_mm);
            (0..num_images)
                .map(|_| {
                    let mut f = Ffd::identity(mesh.clone());
                    for v in &mut f.displacements {
                        *v = rng.gen_range(-max_disp..=*max_disp);
                    }
                    Transform::Ffd(f)
                })
                .collect()
        }
    };
    let mut group = TransformGroup::new(members, zero_mean);
    if zero_mean {
        group.project_zero_mean()?;
    }
    Ok(group)
}

/// Resample `src` through `t` onto `out_grid`: `out(x) = src(t(x))`, zero
/// outside.
pub fn warp_volume(src: &Volume, t: &Transform, out_grid: &Grid) -> Volume {
    let data: Vec<f64> = (0..out_grid.len())
        .map(|i| {
            let p = out_grid.point_at(i);
            src.sample(&t.apply(&p)).value
        })
        .collect();
    Volume::new(out_grid.clone(), data, src.modality()).expect("warp preserves finiteness")
}

/// Nearest-neighbor label propagation: `out(x) = labels(t(x))`, background
/// (class 0) outside the source box.
pub fn warp_labels(
    labels: &[usize],
    src_grid: &Grid,
    t: &Transform,
    out_grid: &Grid,
) -> Vec<usize> {
    (0..out_grid.len())
        .map(|i| {
            let y = t.apply(&out_grid.point_at(i));
            if src_grid.contains(&y) {
                labels[src_grid.nearest_index(&y)]
            } else {
                0
            }
        })
        .collect()
}

/// Nearest-neighbor mask propagation: `out(x) = mask(t(x))`, false outside.
pub fn warp_mask(mask: &[bool], src_grid: &Grid, t: &Transform, out_grid: &Grid) -> Vec<bool> {
    (0..out_grid.len())
        .map(|i| {
            let y = t.apply(&out_grid.point_at(i));
            src_grid.contains(&y) && mask[src_grid.nearest_index(&y)]
        })
        .collect()
}

/// Closed-form inverse of a linear transform as an affine map.
pub fn affine_inverse(t: &Transform) -> Option<Transform> {
    let (m, b) = t.affine_form()?;
    let d = t.ndim();
    let inv = match d {
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            if det.abs() < 1e-300 {
                return None;
            }
            vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]
        }
        _ => {
            let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6]);
            if det.abs() < 1e-300 {
                return None;
            }
            vec![
                (m[4] * m[8] - m[5] * m[7]) / det,
                (m[2] * m[7] - m[1] * m[8]) / det,
                (m[1] * m[5] - m[2] * m[4]) / det,
                (m[5] * m[6] - m[3] * m[8]) / det,
                (m[0] * m[8] - m[2] * m[6]) / det,
                (m[2] * m[3] - m[0] * m[5]) / det,
                (m[3] * m[7] - m[4] * m[6]) / det,
                (m[1] * m[6] - m[0] * m[7]) / det,
                (m[0] * m[4] - m[1] * m[3]) / det,
            ]
        }
    };
    let mut offset = vec![0.0; d];
    for a in 0..d {
        for c in 0..d {
            offset[a] -= inv[a * d + c] * b[c];
        }
    }
    Some(Transform::Affine(Affine { dim: d, matrix: inv, offset }))
}

fn residual(gt: &GroundTruth, estimated: &TransformGroup, j: usize, x: &Point) -> (Point, bool) {
    let y = estimated.apply(j, x);
    let mapped = gt.misalignment.apply(j, &y);
    let in_fg = gt.grid.contains(&mapped) && gt.foreground[gt.grid.nearest_index(&mapped)];
    let mut r = [0.0; MAX_DIM];
    for a in 0..gt.grid.ndim() {
        r[a] = mapped[a] - x[a];
    }
    (r, in_fg)
}

/// Groupwise warping index: mean over images of the RMS mean-centered
/// residual displacement, over common-space points whose ground-truth
/// composition lands in the foreground. Millimeters.
pub fn gwi(gt: &GroundTruth, estimated: &TransformGroup) -> Result<f64> {
    let n = estimated.len();
    let d = gt.grid.ndim();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut res = vec![[0.0; MAX_DIM]; n];
    let mut in_fg = vec![false; n];
    for i in 0..gt.grid.len() {
        let x = gt.grid.point_at(i);
        let mut mean = [0.0; MAX_DIM];
        for j in 0..n {
            let (r, fg) = residual(gt, estimated, j, &x);
            res[j] = r;
            in_fg[j] = fg;
            for a in 0..d {
                mean[a] += r[a] / n as f64;
            }
        }
        for j in 0..n {
            if in_fg[j] {
                let mut sq = 0.0;
                for a in 0..d {
                    let c = res[j][a] - mean[a];
                    sq += c * c;
                }
                sums[j] += sq;
                counts[j] += 1;
            }
        }
    }
    let mut total = 0.0;
    for j in 0..n {
        if counts[j] == 0 {
            return Err(Error::EmptyOverlap);
        }
        total += (sums[j] / counts[j] as f64).sqrt();
    }
    Ok(total / n as f64)
}

/// Groupwise registration error at the grid's corner vertices. Millimeters.
pub fn gre(gt: &GroundTruth, estimated: &TransformGroup, vertices: &[Point]) -> f64 {
    let n = estimated.len();
    let d = gt.grid.ndim();
    let mut total = 0.0;
    let mut mapped = vec![[0.0; MAX_DIM]; n];
    let mut sums = vec![0.0; n];
    for v in vertices {
        let mut mean = [0.0; MAX_DIM];
        for j in 0..n {
            let y = estimated.apply(j, v);
            mapped[j] = gt.misalignment.apply(j, &y);
            for a in 0..d {
                mean[a] += mapped[j][a] / n as f64;
            }
        }
        for j in 0..n {
            let mut sq = 0.0;
            for a in 0..d {
                let c = mapped[j][a] - mean[a];
                sq += c * c;
            }
            sums[j] += sq;
        }
    }
    for s in &sums {
        total += (s / vertices.len() as f64).sqrt();
    }
    total / n as f64
}

/// Mean Dice similarity over all unordered mask pairs; an empty-empty pair
/// counts as 1.
pub fn pairwise_dsc(masks: &[Vec<bool>]) -> f64 {
    let n = masks.len();
    if n < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let mut inter = 0usize;
            let mut a = 0usize;
            let mut b = 0usize;
            for (&x, &y) in masks[i].iter().zip(&masks[j]) {
                a += x as usize;
                b += y as usize;
                inter += (x && y) as usize;
            }
            total += if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 };
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// One evaluation report line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub case_id: String,
    pub metric_name: String,
    pub method: String,
    pub transform_kind: String,
    pub value: f64,
}

pub const REPORT_HEADER: &str = "case_id,metric_name,method,transform_kind,value";

impl ReportRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.case_id, self.metric_name, self.method, self.transform_kind, self.value
        )
    }

    pub fn parse(line: &str) -> Option<ReportRow> {
        let mut it = line.split(',');
        Some(ReportRow {
            case_id: it.next()?.to_string(),
            metric_name: it.next()?.to_string(),
            method: it.next()?.to_string(),
            transform_kind: it.next()?.to_string(),
            value: it.next()?.parse().ok()?,
        })
    }
}

/// Identity transform group (evaluation baseline).
pub fn identity_group(dim: usize, n: usize) -> TransformGroup {
    TransformGroup::new(
        (0..n).map(|_| Transform::Translation(Translation::zero(dim))).collect(),
        false,
    )
}

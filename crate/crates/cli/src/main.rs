//! Batch front end: synthesize cases, run registrations, evaluate results.
//!
//! Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use xcoreg_core::coreg::{run_pipeline, CoRegConfig};
use xcoreg_core::density::gamma_volume;
use xcoreg_core::error::Error as CoreError;
use xcoreg_core::eval::{
    gre, gwi, identity_group, make_misalignment, make_phantom, pairwise_dsc, warp_labels,
    warp_mask, warp_volume, GroundTruth, MisalignSpec, PhantomSpec, ReportRow, REPORT_HEADER,
};
use xcoreg_core::metrics::RECOMMENDED_MIN_IMAGES;
use xcoreg_core::transform::{Transform, TransformGroup};
use xcoreg_core::volume::{load_volume, save_volume, Volume};

#[derive(Parser)]
#[command(
    name = "xcoreg",
    about = "Groupwise multimodal image registration on synthetic cases",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic case: misaligned volumes, label maps,
    /// ground-truth transforms and a case manifest.
    Synth(SynthArgs),
    /// Run a registration pipeline on one or more cases.
    Register(RegisterArgs),
    /// Score estimated transforms against the case ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    /// Case manifest(s) produced by `synth`.
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    /// Registration configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Pipeline: xcoreg | staged_rigid | motion_correct.
    #[arg(long, default_value = "xcoreg")]
    pipeline: String,
    /// Output directory; with several manifests, one subdirectory per case.
    #[arg(long)]
    out: PathBuf,
    /// Run independent cases in this many parallel processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Case manifest produced by `synth`.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding the estimated transforms (a `register` output).
    #[arg(long)]
    estimated: PathBuf,
    /// Report CSV to create or append to.
    #[arg(long)]
    report: PathBuf,
}

/// Synthesis request: phantom recipe plus misalignment family.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SynthSpec {
    case_id: String,
    phantom: PhantomSpec,
    misalign: MisalignSpec,
    #[serde(default)]
    zero_mean_truth: bool,
}

/// Case inventory written by `synth` and consumed by the other commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseManifest {
    case_id: String,
    seed: u64,
    dim: usize,
    num_images: usize,
    volumes: Vec<String>,
    labels: Vec<String>,
    truth_transforms: Vec<String>,
    foreground: String,
    phantom_labels: String,
}

/// Record of a finished registration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    config: String,
    pipeline: String,
    method: String,
    seed: u64,
    inputs: Vec<String>,
    output_dir: String,
    transforms: Vec<String>,
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::UnknownMetric(_) | CoreError::InvalidConfig(_) => 2,
            CoreError::NonFiniteLoss(_)
            | CoreError::NonFiniteGradient
            | CoreError::EmptyOverlap
            | CoreError::ZeroVariance
            | CoreError::TooFewImages(..) => 3,
            _ => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<serde_json::Error>().is_some()
    {
        return 4;
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Register(args) => cmd_register(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn read_json<T: for<'a> Deserialize<'a>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn env_seed_override() -> Option<u64> {
    std::env::var("XCOREG_SEED").ok().and_then(|s| s.parse().ok())
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut spec: SynthSpec = read_json(&args.spec)?;
    if let Some(seed) = env_seed_override() {
        spec.phantom.seed = seed;
    }
    std::fs::create_dir_all(&args.out)?;
    let phantom = make_phantom(&spec.phantom)?;
    let truth = make_misalignment(
        &phantom.grid,
        spec.phantom.num_modalities,
        &spec.misalign,
        spec.zero_mean_truth,
        spec.phantom.seed ^ 0x5151,
    )?;

    let mut volumes = Vec::new();
    let mut labels = Vec::new();
    let mut truths = Vec::new();
    for (m, vol) in phantom.volumes.iter().enumerate() {
        // observed image: phantom resampled through its misalignment
        let observed = warp_volume(vol, &truth.members[m], &phantom.grid);
        let vol_name = format!("mod{m}.pvol");
        save_volume(&observed, &args.out.join(&vol_name))?;
        volumes.push(vol_name);

        let warped_labels =
            warp_labels(&phantom.labels, &phantom.grid, &truth.members[m], &phantom.grid);
        let label_data: Vec<f64> = warped_labels.iter().map(|&l| l as f64).collect();
        let label_vol = Volume::new(phantom.grid.clone(), label_data, format!("labels{m}"))?;
        let lbl_name = format!("labels_mod{m}.pvol");
        save_volume(&label_vol, &args.out.join(&lbl_name))?;
        labels.push(lbl_name);

        let t_name = format!("truth_mod{m}.json");
        write_json(&args.out.join(&t_name), &truth.members[m])?;
        truths.push(t_name);
    }
    let fg_data: Vec<f64> = phantom.foreground.iter().map(|&b| b as u8 as f64).collect();
    let fg = Volume::new(phantom.grid.clone(), fg_data, "foreground")?;
    save_volume(&fg, &args.out.join("foreground.pvol"))?;
    let lbl_data: Vec<f64> = phantom.labels.iter().map(|&l| l as f64).collect();
    let lbl = Volume::new(phantom.grid.clone(), lbl_data, "labels")?;
    save_volume(&lbl, &args.out.join("labels.pvol"))?;

    let manifest = CaseManifest {
        case_id: spec.case_id.clone(),
        seed: spec.phantom.seed,
        dim: phantom.grid.ndim(),
        num_images: spec.phantom.num_modalities,
        volumes,
        labels,
        truth_transforms: truths,
        foreground: "foreground.pvol".into(),
        phantom_labels: "labels.pvol".into(),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn load_case(manifest_path: &Path) -> anyhow::Result<(CaseManifest, PathBuf)> {
    let manifest: CaseManifest = read_json(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    for rel in manifest
        .volumes
        .iter()
        .chain(&manifest.labels)
        .chain(&manifest.truth_transforms)
        .chain([&manifest.foreground, &manifest.phantom_labels])
    {
        let p = dir.join(rel);
        if !p.exists() {
            anyhow::bail!("manifest references missing file {}", p.display());
        }
    }
    Ok((manifest, dir))
}

fn load_usize_volume(path: &Path) -> anyhow::Result<Vec<usize>> {
    let v = load_volume(path)?;
    Ok(v.data().iter().map(|&x| x.max(0.0).round() as usize).collect())
}

fn cmd_register(args: &RegisterArgs) -> anyhow::Result<()> {
    if args.manifest.len() > 1 {
        return register_many(args);
    }
    let (manifest, case_dir) = load_case(&args.manifest[0])?;
    let mut cfg: CoRegConfig = read_json(&args.config)?;
    if let Some(seed) = env_seed_override() {
        cfg.seed = seed;
    }
    cfg.validate().map_err(anyhow::Error::from)?;
    std::fs::create_dir_all(&args.out)?;

    let volumes: Vec<Volume> = manifest
        .volumes
        .iter()
        .map(|rel| load_volume(&case_dir.join(rel)))
        .collect::<Result<_, _>>()?;
    if cfg.metric == "cg" && volumes.len() < RECOMMENDED_MIN_IMAGES {
        eprintln!(
            "warning: congealing with {} images; stack density estimates are \
             unreliable below {} images",
            volumes.len(),
            RECOMMENDED_MIN_IMAGES
        );
    }
    let labels: Option<Vec<Vec<usize>>> = if cfg.metric == "xmetric-gt" {
        Some(
            manifest
                .labels
                .iter()
                .map(|rel| load_usize_volume(&case_dir.join(rel)))
                .collect::<anyhow::Result<_>>()?,
        )
    } else {
        None
    };

    let out = run_pipeline(&args.pipeline, &volumes, labels.as_deref(), &cfg)?;

    let mut transform_files = Vec::new();
    for j in 0..out.group.len() {
        let name = format!("transform_mod{j}.json");
        write_json(&args.out.join(&name), &out.group.effective(j))?;
        transform_files.push(name);
    }
    std::fs::write(args.out.join("trace.csv"), out.trace.to_csv())?;
    if let Some((grid, cs)) = &out.common_space {
        if grid.ndim() == 2 {
            let g = gamma_volume(grid, cs)?;
            save_volume(&g, &args.out.join("gamma.pvol"))?;
        }
    }
    let common_grid = volumes[0].grid().clone();
    for (j, vol) in volumes.iter().enumerate() {
        let warped = warp_volume(vol, &out.group.effective(j), &common_grid);
        save_volume(&warped, &args.out.join(format!("warped_mod{j}.pvol")))?;
    }
    let run = RunManifest {
        config: args.config.display().to_string(),
        pipeline: args.pipeline.clone(),
        method: cfg.metric.clone(),
        seed: cfg.seed,
        inputs: manifest.volumes.iter().map(|v| case_dir.join(v).display().to_string()).collect(),
        output_dir: args.out.display().to_string(),
        transforms: transform_files,
    };
    write_json(&args.out.join("run.json"), &run)?;
    Ok(())
}

/// Fan independent cases out to child processes (`--jobs` at a time).
fn register_many(args: &RegisterArgs) -> anyhow::Result<()> {
    let exe = std::env::current_exe()?;
    let jobs = args.jobs.max(1);
    let mut pending: Vec<(usize, &PathBuf)> = args.manifest.iter().enumerate().collect();
    pending.reverse();
    let mut running: Vec<(usize, std::process::Child)> = Vec::new();
    let mut failures = 0usize;
    loop {
        while running.len() < jobs {
            let Some((idx, manifest)) = pending.pop() else { break };
            let case_out = args.out.join(format!("case{idx:03}"));
            let child = std::process::Command::new(&exe)
                .arg("register")
                .arg("--manifest")
                .arg(manifest)
                .arg("--config")
                .arg(&args.config)
                .arg("--pipeline")
                .arg(&args.pipeline)
                .arg("--out")
                .arg(&case_out)
                .spawn()?;
            running.push((idx, child));
        }
        if running.is_empty() {
            break;
        }
        let (idx, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            eprintln!("case {idx} failed with {status}");
            failures += 1;
        }
    }
    if failures > 0 {
        anyhow::bail!("{failures} case(s) failed");
    }
    Ok(())
}

fn load_truth(manifest: &CaseManifest, dir: &Path) -> anyhow::Result<GroundTruth> {
    let members: Vec<Transform> = manifest
        .truth_transforms
        .iter()
        .map(|rel| read_json(&dir.join(rel)))
        .collect::<anyhow::Result<_>>()?;
    let fg_vol = load_volume(&dir.join(&manifest.foreground))?;
    let foreground: Vec<bool> = fg_vol.data().iter().map(|&x| x > 0.5).collect();
    Ok(GroundTruth {
        misalignment: TransformGroup::new(members, false),
        grid: fg_vol.grid().clone(),
        foreground,
    })
}

fn load_estimates(dir: &Path, n: usize) -> anyhow::Result<TransformGroup> {
    let members: Vec<Transform> = (0..n)
        .map(|j| read_json(&dir.join(format!("transform_mod{j}.json"))))
        .collect::<anyhow::Result<_>>()?;
    Ok(TransformGroup::new(members, false))
}

/// Append rows to the report, replacing rows with the same
/// (case, metric, method, transform) key so reruns stay idempotent.
fn upsert_report(path: &Path, new_rows: Vec<ReportRow>) -> anyhow::Result<()> {
    let mut rows: Vec<ReportRow> = Vec::new();
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines().skip(1) {
            if let Some(row) = ReportRow::parse(line) {
                rows.push(row);
            }
        }
    }
    for new in new_rows {
        if let Some(existing) = rows.iter_mut().find(|r| {
            r.case_id == new.case_id
                && r.metric_name == new.metric_name
                && r.method == new.method
                && r.transform_kind == new.transform_kind
        }) {
            *existing = new;
        } else {
            rows.push(new);
        }
    }
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let (manifest, case_dir) = load_case(&args.manifest)?;
    let truth = load_truth(&manifest, &case_dir)?;
    let run: RunManifest = read_json(&args.estimated.join("run.json"))?;
    let estimates = load_estimates(&args.estimated, manifest.num_images)?;
    let identity = identity_group(manifest.dim, manifest.num_images);
    let corners = truth.grid.corners();
    let kind = estimates.members[0].kind_name().to_string();

    let mut rows = vec![
        ReportRow {
            case_id: manifest.case_id.clone(),
            metric_name: "gwi_mm".into(),
            method: "none".into(),
            transform_kind: "identity".into(),
            value: gwi(&truth, &identity)?,
        },
        ReportRow {
            case_id: manifest.case_id.clone(),
            metric_name: "gwi_mm".into(),
            method: run.method.clone(),
            transform_kind: kind.clone(),
            value: gwi(&truth, &estimates)?,
        },
        ReportRow {
            case_id: manifest.case_id.clone(),
            metric_name: "gre_mm".into(),
            method: "none".into(),
            transform_kind: "identity".into(),
            value: gre(&truth, &identity, &corners),
        },
        ReportRow {
            case_id: manifest.case_id.clone(),
            metric_name: "gre_mm".into(),
            method: run.method.clone(),
            transform_kind: kind.clone(),
            value: gre(&truth, &estimates, &corners),
        },
    ];

    // pairwise foreground overlap before and after registration
    let masks_native: Vec<Vec<bool>> = manifest
        .labels
        .iter()
        .map(|rel| {
            let l = load_usize_volume(&case_dir.join(rel))?;
            Ok(l.iter().map(|&v| v != 0).collect())
        })
        .collect::<anyhow::Result<_>>()?;
    let pre = pairwise_dsc(&masks_native);
    let masks_warped: Vec<Vec<bool>> = (0..manifest.num_images)
        .map(|j| {
            warp_mask(&masks_native[j], &truth.grid, &estimates.members[j], &truth.grid)
        })
        .collect();
    let post = pairwise_dsc(&masks_warped);
    rows.push(ReportRow {
        case_id: manifest.case_id.clone(),
        metric_name: "dsc".into(),
        method: "none".into(),
        transform_kind: "identity".into(),
        value: pre,
    });
    rows.push(ReportRow {
        case_id: manifest.case_id.clone(),
        metric_name: "dsc".into(),
        method: run.method,
        transform_kind: kind,
        value: post,
    });

    upsert_report(&args.report, rows)?;
    Ok(())
}

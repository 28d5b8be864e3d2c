//! Protocol calibration runs (development aid, not part of the test suite).

use std::time::Instant;

use xcoreg_core::coreg::{
    motion_correct, staged_rigid, xcoreg, CoRegConfig, PyramidLevel, StepSizes,
};
use xcoreg_core::eval::{
    gre, gwi, identity_group, make_misalignment, make_phantom, pairwise_dsc, warp_labels,
    warp_mask, warp_volume, GroundTruth, MisalignSpec, PhantomSpec,
};
use xcoreg_core::grid::Grid;
use xcoreg_core::transform::TransformGroup;
use xcoreg_core::volume::Volume;

fn ffd_case(seed: u64, max_disp: f64) -> (Vec<Volume>, GroundTruth, Vec<Vec<usize>>) {
    let phantom = make_phantom(&PhantomSpec {
        dims: vec![128, 128],
        num_classes: 4,
        num_modalities: 3,
        noise_sigma: 0.06,
        blob_sigma: 12.0,
        edge_sigma: 0.8,
        bias_field: false,
        seed,
    })
    .unwrap();
    let truth = make_misalignment(
        &phantom.grid,
        3,
        &MisalignSpec::Ffd { mesh_spacing: 48.0, max_disp },
        true,
        seed ^ 0x5151,
    )
    .unwrap();
    let observed: Vec<Volume> = (0..3)
        .map(|j| warp_volume(&phantom.volumes[j], &truth.members[j], &phantom.grid))
        .collect();
    let labels: Vec<Vec<usize>> = (0..3)
        .map(|j| warp_labels(&phantom.labels, &phantom.grid, &truth.members[j], &phantom.grid))
        .collect();
    let gt = GroundTruth {
        misalignment: truth,
        grid: phantom.grid.clone(),
        foreground: phantom.foreground.clone(),
    };
    (observed, gt, labels)
}

fn brainweb_config(seed: u64) -> CoRegConfig {
    CoRegConfig {
        metric: "xmetric".into(),
        model: "ffd".into(),
        ffd_spacings: vec![48.0, 32.0, 16.0],
        num_classes: 4,
        levels: 64,
        sample_rate: 0.1,
        lambda: 1e-3,
        eta: StepSizes { ffd: 0.1, ..Default::default() },
        pyramid: vec![
            PyramidLevel { sigma: 2.0, factor: 4, iters: 210 },
            PyramidLevel { sigma: 1.0, factor: 2, iters: 210 },
            PyramidLevel { sigma: 0.0, factor: 1, iters: 120 },
        ],
        zero_mean: true,
        seed,
        ..Default::default()
    }
}

fn probe_seed(arg: &str) {
    let max_disp: f64 = arg.parse().unwrap_or(9.0);
    let (observed, gt, _) = ffd_case(3, max_disp);
    let identity = identity_group(2, 3);
    let init = gwi(&gt, &identity).unwrap();
    for cfg_seed in [3u64, 103, 203, 303] {
        let mut cfg = brainweb_config(3);
        cfg.seed = cfg_seed;
        let out = xcoreg(&observed, &cfg).unwrap();
        let fin = gwi(&gt, &out.group).unwrap();
        println!("cfg seed {cfg_seed}: init {init:.3} -> {fin:.3} ({:.1}%)", 100.0 * fin / init);
    }
    // longer schedule
    let mut cfg = brainweb_config(3);
    for l in &mut cfg.pyramid {
        l.iters *= 2;
    }
    let out = xcoreg(&observed, &cfg).unwrap();
    let fin = gwi(&gt, &out.group).unwrap();
    println!("double iters: {fin:.3} ({:.1}%)", 100.0 * fin / init);
    // per-image breakdown of the residual field norm
    for j in 0..3 {
        let mut max_r: f64 = 0.0;
        for i in (0..gt.grid.len()).step_by(7) {
            let x = gt.grid.point_at(i);
            let y = out.group.apply(j, &x);
            let m = gt.misalignment.apply(j, &y);
            let r = ((m[0] - x[0]).powi(2) + (m[1] - x[1]).powi(2)).sqrt();
            max_r = max_r.max(r);
        }
        println!("image {j}: max residual {max_r:.2}");
    }
}

fn calibrate_ffd(arg: &str) {
    let max_disp: f64 = arg.parse().unwrap_or(6.0);
    let mut initials = Vec::new();
    let mut finals = Vec::new();
    let mut finals_gt = Vec::new();
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let (observed, gt, labels) = ffd_case(seed, max_disp);
        let identity = identity_group(2, 3);
        let init = gwi(&gt, &identity).unwrap();
        let cfg = brainweb_config(seed);
        let out = xcoreg(&observed, &cfg).unwrap();
        let fin = gwi(&gt, &out.group).unwrap();
        let mono = out.trace.latent_update_monotone_fraction().unwrap_or(0.0);
        let mut cfg_gt = brainweb_config(seed);
        cfg_gt.metric = "xmetric-gt".into();
        let out_gt =
            xcoreg_core::coreg::xcoreg_with_labels(&observed, Some(&labels), &cfg_gt).unwrap();
        let fin_gt = gwi(&gt, &out_gt.group).unwrap();
        println!(
            "seed {seed}: init {init:.3} -> un {fin:.3} ({:.1}%), gt {fin_gt:.3}, mono {mono:.3}",
            100.0 * fin / init
        );
        initials.push(init);
        finals.push(fin);
        finals_gt.push(fin_gt);
    }
    let mi: f64 = initials.iter().sum::<f64>() / initials.len() as f64;
    let mf: f64 = finals.iter().sum::<f64>() / finals.len() as f64;
    let mg: f64 = finals_gt.iter().sum::<f64>() / finals_gt.len() as f64;
    println!(
        "max_disp {max_disp}: mean init {mi:.3} px, mean final {mf:.3} ({:.1}%), gt {mg:.3} (rel diff {:.1}%), elapsed {:.1}s",
        100.0 * mf / mi,
        100.0 * (mg - mf).abs() / mf,
        t0.elapsed().as_secs_f64()
    );
}

fn rigid_case(seed: u64, k: usize) -> (Vec<Volume>, GroundTruth, CoRegConfig) {
    let phantom = make_phantom(&PhantomSpec {
        dims: vec![128, 128],
        num_classes: 4,
        num_modalities: 3,
        noise_sigma: 0.03,
        blob_sigma: 12.0,
        edge_sigma: 0.8,
        bias_field: false,
        seed,
    })
    .unwrap();
    let truth = make_misalignment(
        &phantom.grid,
        3,
        &MisalignSpec::Rigid { max_angle_deg: 15.0, max_shift: 20.0 },
        true,
        seed ^ 0x227,
    )
    .unwrap();
    let observed: Vec<Volume> = (0..3)
        .map(|j| warp_volume(&phantom.volumes[j], &truth.members[j], &phantom.grid))
        .collect();
    let gt = GroundTruth {
        misalignment: truth,
        grid: phantom.grid.clone(),
        foreground: phantom.foreground.clone(),
    };
    let cfg = CoRegConfig {
        metric: "xmetric".into(),
        num_classes: k,
        sample_rate: 0.1,
        zero_mean: true,
        seed,
        ..Default::default()
    };
    (observed, gt, cfg)
}

fn calibrate_rigid(arg: &str) {
    let seeds: u64 = arg.parse().unwrap_or(5);
    let t0 = Instant::now();
    let mut wins_cte = 0;
    let mut wins_gmm = 0;
    for seed in 0..seeds {
        let (observed, gt, cfg) = rigid_case(seed, 8);
        let corners = gt.grid.corners();
        let init = gre(&gt, &identity_group(2, 3), &corners);
        let out = staged_rigid(&observed, &cfg).unwrap();
        let fin = gre(&gt, &out.group, &corners);
        let mut cfg_cte = cfg.clone();
        cfg_cte.metric = "cte".into();
        let fin_cte = match staged_rigid(&observed, &cfg_cte) {
            Ok(o) => gre(&gt, &o.group, &corners),
            Err(e) => {
                println!("  cte failed: {e}");
                f64::INFINITY
            }
        };
        let mut cfg_gmm = cfg.clone();
        cfg_gmm.metric = "gmm".into();
        let fin_gmm = match staged_rigid(&observed, &cfg_gmm) {
            Ok(o) => gre(&gt, &o.group, &corners),
            Err(e) => {
                println!("  gmm failed: {e}");
                f64::INFINITY
            }
        };
        if fin < fin_cte {
            wins_cte += 1;
        }
        if fin < fin_gmm {
            wins_gmm += 1;
        }
        println!(
            "seed {seed}: init {init:.2} -> x {fin:.2} ({:.1}%), cte {fin_cte:.2}, gmm {fin_gmm:.2}",
            100.0 * fin / init
        );
    }
    println!(
        "wins vs cte {wins_cte}/{seeds}, vs gmm {wins_gmm}/{seeds}, elapsed {:.1}s",
        t0.elapsed().as_secs_f64()
    );
}

fn probe_rigid(arg: &str) {
    let seed: u64 = arg.parse().unwrap_or(1);
    let (observed, gt, cfg) = rigid_case(seed, 8);
    let corners = gt.grid.corners();
    let init = gre(&gt, &identity_group(2, 3), &corners);
    // translation stage alone under different schedules
    for (tag, levels, iters, eta_t, warm) in [
        ("4lv", 4usize, 200usize, 1.0f64, false),
        ("2lv", 2, 200, 1.0, false),
        ("2lv-long", 2, 400, 1.0, false),
        ("2lv-eta2", 2, 200, 2.0, false),
        ("2lv-warm", 2, 200, 1.0, true),
        ("3lv", 3, 300, 1.0, false),
    ] {
        let mut cfg_t = cfg.clone();
        cfg_t.model = "translation".into();
        cfg_t.pyramid = xcoreg_core::coreg::halving_pyramid(levels, iters);
        cfg_t.levels = 32;
        cfg_t.eta.translation = eta_t;
        cfg_t.warm_start_uniform = warm;
        let out_t = xcoreg(&observed, &cfg_t).unwrap();
        let gre_t = gre(&gt, &out_t.group, &corners);
        println!("seed {seed} [{tag}]: init {init:.2} -> translation {gre_t:.2}");
    }
    // truth offsets for comparison
    for j in 0..3 {
        if let xcoreg_core::transform::Transform::Rigid(r) = &gt.misalignment.members[j] {
            println!("  truth {j}: angles {:?} offset {:?}", r.angles, r.offset);
        }
    }
    let out = staged_rigid(&observed, &cfg).unwrap();
    let fin = gre(&gt, &out.group, &corners);
    println!("  staged final {fin:.2}");
    for j in 0..3 {
        let eff = out.group.effective(j);
        println!("  est {j} ({}): {:?}", eff.kind_name(), eff.params());
    }
}

fn calibrate_k(arg: &str) {
    let seeds: u64 = arg.parse().unwrap_or(3);
    let t0 = Instant::now();
    for seed in 0..seeds {
        let mut line = format!("seed {seed}:");
        for k in [2usize, 4, 8, 12] {
            let (observed, gt, mut cfg) = rigid_case(seed, k);
            cfg.num_classes = k;
            let out = staged_rigid(&observed, &cfg).unwrap();
            let fin = gre(&gt, &out.group, &gt.grid.corners());
            line.push_str(&format!(" K{k}={fin:.2}"));
        }
        println!("{line}");
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

fn moco_case(
    seed: u64,
    frames: usize,
) -> (Vec<Volume>, Vec<Vec<bool>>, Grid, TransformGroup) {
    use rand::{Rng, SeedableRng};
    let phantom = make_phantom(&PhantomSpec {
        dims: vec![96, 96],
        num_classes: 4,
        num_modalities: 1,
        noise_sigma: 0.0,
        blob_sigma: 10.0,
        edge_sigma: 0.8,
        bias_field: false,
        seed,
    })
    .unwrap();
    let grid = phantom.grid.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x4D0C0u64);
    // per-frame class intensity curves: contrast arrives at different times
    let mut frames_vols = Vec::new();
    let mut masks = Vec::new();
    let k = 4;
    let bulk = make_misalignment(
        &grid,
        frames,
        &MisalignSpec::Rigid { max_angle_deg: 3.0, max_shift: 4.0 },
        true,
        seed ^ 0xB11,
    )
    .unwrap();
    let elastic = make_misalignment(
        &grid,
        frames,
        &MisalignSpec::Ffd { mesh_spacing: 24.0, max_disp: 2.0 },
        true,
        seed ^ 0xE1A,
    )
    .unwrap();
    let mut gauss = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for t in 0..frames {
        let phase = t as f64 / (frames - 1) as f64;
        // class means vary along the sequence with class-specific timing
        let means: Vec<f64> = (0..k)
            .map(|c| {
                let center = 0.2 + 0.2 * c as f64;
                let bump = (-((phase - center) * 4.0).powi(2)).exp();
                0.15 + 0.25 * c as f64 / (k - 1) as f64 + 0.45 * bump
            })
            .collect();
        // combined truth: bulk then elastic in common space
        let t_combined = xcoreg_core::transform::Transform::Composed(Box::new(
            xcoreg_core::transform::Composed {
                outer: bulk.members[t].clone(),
                inner: elastic.members[t].clone(),
            },
        ));
        let data: Vec<f64> = (0..grid.len())
            .map(|i| {
                let p = grid.point_at(i);
                let y = t_combined.apply(&p);
                let v = if grid.contains(&y) {
                    means[phantom.labels[grid.nearest_index(&y)]]
                } else {
                    means[0]
                };
                v + 0.02 * gauss(&mut rng)
            })
            .collect();
        frames_vols.push(Volume::new(grid.clone(), data, format!("frame{t}")).unwrap());
        let mask: Vec<bool> = (0..grid.len())
            .map(|i| {
                let y = t_combined.apply(&grid.point_at(i));
                grid.contains(&y) && phantom.foreground[grid.nearest_index(&y)]
            })
            .collect();
        masks.push(mask);
    }
    (frames_vols, masks, grid, bulk)
}

fn calibrate_moco(arg: &str) {
    let seeds: u64 = arg.parse().unwrap_or(3);
    let t0 = Instant::now();
    let mut x_wins = 0;
    for seed in 0..seeds {
        let (vols, masks, grid, _) = moco_case(seed, 20);
        let pre = pairwise_dsc(&masks);
        let cfg = CoRegConfig {
            metric: "xmetric".into(),
            num_classes: 6,
            levels: 64,
            sample_rate: 0.1,
            zero_mean: true,
            seed,
            ..Default::default()
        };
        let out = motion_correct(&vols, &cfg).unwrap();
        let warped: Vec<Vec<bool>> = (0..vols.len())
            .map(|j| warp_mask(&masks[j], &grid, &out.group.effective(j), &grid))
            .collect();
        let post_x = pairwise_dsc(&warped);
        let mut cfg_vi = cfg.clone();
        cfg_vi.metric = "vi".into();
        let out_vi = motion_correct(&vols, &cfg_vi).unwrap();
        let warped_vi: Vec<Vec<bool>> = (0..vols.len())
            .map(|j| warp_mask(&masks[j], &grid, &out_vi.group.effective(j), &grid))
            .collect();
        let post_vi = pairwise_dsc(&warped_vi);
        if post_x >= post_vi {
            x_wins += 1;
        }
        println!(
            "seed {seed}: pre {pre:.3} -> x {post_x:.3} (+{:.1} pts), vi {post_vi:.3}",
            100.0 * (post_x - pre)
        );
    }
    println!("x >= vi in {x_wins}/{seeds}, elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("ffd");
    let arg = args.get(2).map(String::as_str).unwrap_or("");
    match mode {
        "ffd" => calibrate_ffd(arg),
        "probe" => probe_seed(arg),
        "rigid1" => probe_rigid(arg),
        "rigid" => calibrate_rigid(arg),
        "k" => calibrate_k(arg),
        "moco" => calibrate_moco(arg),
        other => eprintln!("unknown mode {other}"),
    }
}

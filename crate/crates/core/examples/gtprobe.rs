//! Probe the label-driven appearance variant (development aid).

use xcoreg_core::coreg::{xcoreg_with_labels, CoRegConfig, PyramidLevel, StepSizes};
use xcoreg_core::eval::{
    gwi, identity_group, make_misalignment, make_phantom, warp_labels, warp_volume, GroundTruth,
    MisalignSpec, PhantomSpec,
};
use xcoreg_core::volume::Volume;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("long");
    for seed in [0u64, 2, 6, 8] {
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
            &MisalignSpec::Ffd { mesh_spacing: 48.0, max_disp: 10.0 },
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
        let init = gwi(&gt, &identity_group(2, 3)).unwrap();
        let mut cfg = CoRegConfig {
            metric: "xmetric-gt".into(),
            model: "ffd".into(),
            ffd_spacings: vec![32.0, 16.0],
            num_classes: 4,
            levels: 64,
            sample_rate: 0.1,
            lambda: 1e-3,
            eta: StepSizes { ffd: 0.1, ..Default::default() },
            pyramid: vec![
                PyramidLevel { sigma: 2.0, factor: 4, iters: 140 },
                PyramidLevel { sigma: 1.0, factor: 2, iters: 140 },
                PyramidLevel { sigma: 0.0, factor: 1, iters: 80 },
            ],
            zero_mean: true,
            seed,
            ..Default::default()
        };
        match variant {
            "long" => {
                for l in &mut cfg.pyramid {
                    l.iters *= 2;
                }
            }
            "rate" => cfg.sample_rate = 0.3,
            "fine" => cfg.pyramid.last_mut().unwrap().iters = 240,
            _ => {}
        }
        let out = xcoreg_with_labels(&observed, Some(&labels), &cfg).unwrap();
        let fin = gwi(&gt, &out.group).unwrap();
        println!("{variant} seed {seed}: init {init:.3} -> gt {fin:.3} ({:.1}%)", 100.0 * fin / init);
    }
}

//! Shared fixtures for the registration benchmarks.

use xcoreg_core::coreg::{CoRegConfig, StepSizes};
use xcoreg_core::eval::{make_misalignment, make_phantom, warp_volume, MisalignSpec, PhantomSpec};
use xcoreg_core::volume::Volume;

/// A misaligned three-modality phantom group at the given side length.
pub fn misaligned_group(side: usize, seed: u64) -> Vec<Volume> {
    let phantom = make_phantom(&PhantomSpec {
        dims: vec![side, side],
        seed,
        ..Default::default()
    })
    .expect("phantom generation");
    let truth = make_misalignment(
        &phantom.grid,
        phantom.volumes.len(),
        &MisalignSpec::Ffd { mesh_spacing: 32.0, max_disp: 6.0 },
        true,
        seed ^ 0x5151,
    )
    .expect("misalignment generation");
    phantom
        .volumes
        .iter()
        .enumerate()
        .map(|(j, v)| warp_volume(v, &truth.members[j], &phantom.grid))
        .collect()
}

/// Short deterministic configuration used by the loop benchmarks.
pub fn bench_config(metric: &str, model: &str, iters: usize) -> CoRegConfig {
    CoRegConfig {
        max_iters: iters,
        metric: metric.into(),
        model: model.into(),
        num_classes: 4,
        levels: 64,
        sample_rate: 0.1,
        lambda: 1e-3,
        ffd_spacings: vec![32.0],
        deterministic: true,
        zero_mean: true,
        seed: 3,
        eta: StepSizes { translation: 0.3, ..Default::default() },
        ..Default::default()
    }
}

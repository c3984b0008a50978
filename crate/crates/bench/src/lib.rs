//! Fixtures shared by the benchmarks.

use relaygrid::data::synth::synth_split;
use relaygrid::data::{stack_batch, Batch, Sampler, SamplerConfig, Scene, SynthSpec};
use relaygrid::ViTConfig;

pub fn desk_sampler() -> SamplerConfig {
    SamplerConfig {
        s: 64,
        g: 4,
        aug_prob: 0.0,
        ..Default::default()
    }
}

pub fn scenes(n: usize) -> Vec<Scene> {
    synth_split(&SynthSpec::default(), 0, 0, n).expect("synthetic scenes")
}

/// A batch of desk-scale pairs with global windows.
pub fn desk_batch(scenes: &[Scene], batch: usize) -> Batch<f32> {
    let cfg = ViTConfig::desk();
    let sampler = Sampler::new(SamplerConfig {
        s: cfg.local_size,
        ..desk_sampler()
    })
    .expect("sampler");
    let pairs: Vec<_> = (0..batch as u64)
        .map(|i| sampler.draw(scenes, i, true).expect("draw"))
        .collect();
    stack_batch(&pairs).expect("batch")
}

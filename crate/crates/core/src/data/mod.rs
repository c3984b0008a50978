//! Scenes, paired window sampling, rasters and the synthetic generator.

pub mod manifest;
pub mod raster;
pub mod sampler;
pub mod synth;

pub use raster::Raster;
pub use sampler::{
    augment, downsample_box, sample_at, sample_pair, stack_batch, Augment, Batch, Sample, Sampler, SamplerConfig,
    Scene, WindowPair,
};
pub use manifest::{load_split, read_manifest, write_split, ManifestRow};
pub use synth::{split_seed, synth_generate, synth_split, Beacon, SynthScene, SynthSpec, Texture, SPLITS};

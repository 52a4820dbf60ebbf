//! Condition-sharded storage, preprocessing, sampling and synthetic data.
//!
//! Each perturbed population lives in its own shard file, and control
//! cells get a separate set of shards keyed by (cell type, batch) so that
//! matched controls can be fetched without scanning perturbed data. A JSON
//! manifest lists every shard with its checksum.

pub mod block;
pub mod preprocess;
pub mod sampler;
pub mod store;
pub mod synth;

pub use block::SparseBlock;
pub use preprocess::{preprocess, select_hvg, PreprocessConfig};
pub use sampler::{Sampler, SamplingStrategy, TrainExample};
pub use store::{
    write_atomic, write_dataset, Condition, ControlKey, Dataset, DenseData, Manifest, Store,
    ValueSpace,
};
pub use synth::{synth_generate, write_truth_csv, PlantedEffect, SynthConfig, SynthOutput};

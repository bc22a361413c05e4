//! Synthetic dataset generation, the on-disk dataset format and split checks.
//!
//! Layout: `manifest.json` at the root, tensors at `<id>/<modality>.mmgt`.
//! Any exporter that writes this layout can feed the pipelines.

mod dataset;
pub mod mmgt;
mod synth;

pub use dataset::{
    load_dataset, validate_splits, Dataset, DatasetHandle, DatasetManifest, ExampleFiles,
    ExampleRecord, MultimodalExample, Split, SplitReport, Violation, MANIFEST_FILE, SCHEMA_VERSION,
};
pub use mmgt::{read_tensor, write_tensor, Dtype};
pub use synth::{
    generate_synthetic, synthesize, DatasetSpec, ModalitySpec, SyntheticData, SyntheticWorld,
};

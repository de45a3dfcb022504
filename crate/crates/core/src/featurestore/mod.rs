//! Feature/label files, dataset manifests and synthetic task generators.

mod format;
mod manifest;
mod synth;

pub use format::{
    decode_features, decode_labels, encode_features, encode_labels, file_checksum,
    read_features, read_labels, write_features, write_labels, Labels, FEATURE_MAGIC,
    FORMAT_VERSION, HEADER_LEN, LABEL_MAGIC,
};
pub use manifest::{
    concat_matrices, concat_sources, ConcatFeatures, Dataset, DatasetManifest, IndexSpec,
    SplitSpec, Splits, WrittenDataset,
};
pub use synth::{append_noise_features, synth_planted, SyntheticData, SyntheticSpec};

/// Fraction of rows the synthetic generators reserve for test.
pub const DEFAULT_TEST_FRACTION: f64 = 0.25;

/// Builds a [`Dataset`] from a synthetic spec using the standard split
/// protocol.
pub fn synth_dataset(spec: &SyntheticSpec) -> crate::error::Result<Dataset> {
    let data = synth_planted(spec)?;
    let splits = Splits::protocol(spec.n_examples, DEFAULT_TEST_FRACTION, spec.seed);
    Dataset::new(data.inputs, data.psi, data.labels, splits)
}

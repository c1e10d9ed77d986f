//! Fixtures shared by the benchmarks in `benches/`.

use dkt_core::synth::{default_spec, generate, GroundTruth};
use dkt_core::{CohortDataset, ModelConfig};

/// The default cohort layout with `ad` + `pca` subjects.
pub fn cohort(ad: usize, pca: usize) -> (CohortDataset, GroundTruth, ModelConfig) {
    let mut spec = default_spec();
    spec.diseases[0].subjects = ad;
    spec.diseases[1].subjects = pca;
    let (data, truth) = generate(&spec).expect("default spec is valid");
    let config = spec.model_config().expect("default spec is valid");
    (data, truth, config)
}

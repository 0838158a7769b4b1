//! Shared fixtures for the benchmarks: a small corpus and untrained model
//! pairs (timings do not depend on the weights).

use uaplab_core::data::{generate_dataset, Dataset, SyntheticSpec};
use uaplab_core::encoders::{Architecture, ModelPair};

pub fn corpus(n: usize) -> Dataset {
    generate_dataset(&SyntheticSpec::dataset_a(n, 7)).expect("valid preset")
}

pub fn model(arch: Architecture, data: &Dataset) -> ModelPair {
    ModelPair::init(arch, &data.vocab, 0)
}

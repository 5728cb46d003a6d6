//! Shared inputs for the criterion benchmarks.

use pmspace::eval::{synth_generate, SynthConfig, SynthDataset};

/// The reference synthetic dataset at a fixed seed.
pub fn reference_dataset() -> SynthDataset {
    synth_generate(&SynthConfig::reference(), 11).expect("reference config is valid")
}

//! Shared fixtures for the benches.

use fragdiff_core::features::{synth_two_domain, SynthParams};
use fragdiff_core::FeatureSet;

/// Clustered two-domain features with `n` records per domain.
pub fn clustered(n: usize, d: usize) -> FeatureSet {
    synth_two_domain(&SynthParams {
        n_source: n,
        m_target: n,
        d,
        ..SynthParams::default()
    })
    .expect("valid synth parameters")
    .set
}

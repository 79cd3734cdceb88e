//! Shared inputs for the benchmarks.

use mvcl_core::dataio::synthetic::SyntheticShiftSpec;
use mvcl_core::dataio::{generate_synthetic, SplitCounts};
use mvcl_core::model::ModelConfig;
use mvcl_core::training::{prepare, Prepared, Profile, TrainConfig};
use mvcl_core::Tensor;

/// Deterministic, well-conditioned values in [-1, 1).
pub fn filled(shape: Vec<usize>, salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40;
        (h as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

pub fn series(len: usize, salt: u64) -> Vec<f64> {
    filled(vec![len], salt).data().iter().map(|&v| f64::from(v)).collect()
}

/// Desk-profile config and `n` prepared XOR samples.
pub fn xor_batch(n: usize) -> (TrainConfig, Prepared) {
    let mut cfg = TrainConfig::profile(Profile::Desk);
    let mut spec = SyntheticShiftSpec::xor(0);
    spec.source = SplitCounts::new(n, 0, 0);
    let (source, _) = generate_synthetic(&spec).expect("preset is valid");
    cfg.model = ModelConfig {
        channels: 1,
        classes: 2,
        ..cfg.model
    };
    let prepared = prepare(&source, &cfg).expect("preset prepares");
    (cfg, prepared)
}

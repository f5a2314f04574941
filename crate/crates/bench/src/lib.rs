//! Fixtures shared by the benchmarks.

use trainmap_core::cartography::{standardize, StandardizationMode, StandardizedEnsemble, DEFAULT_EPSILON};
use trainmap_core::probe::ProbeDataset;
use trainmap_core::synthlab::{generate_probe_task, generate_stat_series, RegimeScript, SynthTaskConfig};
use trainmap_core::tensorstore::TensorRecord;

/// Standardized 3-regime ensemble over the default schedule.
pub fn regime_ensemble(seeds: u64) -> StandardizedEnsemble {
    let script = RegimeScript::separated("bench", &[0, 50, 100], 3.0, seeds);
    let ens = generate_stat_series(&script, 0).expect("valid script");
    standardize(&ens.series, StandardizationMode::Pooled, DEFAULT_EPSILON).expect("standardizable")
}

pub fn probe_task(tokens_per_class: usize) -> ProbeDataset {
    generate_probe_task(&SynthTaskConfig { tokens_per_class, ..Default::default() }).expect("valid task")
}

/// A checkpoint of `layers` square matrices with biases.
pub fn checkpoint(layers: usize, width: usize) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    for l in 0..layers {
        let w = (0..width * width).map(|i| ((i * 7919 + l * 31) % 1000) as f32 / 500.0 - 1.0).collect();
        out.push(TensorRecord::new(format!("layer{l}.weight"), vec![width, width], w).expect("valid"));
        let b = (0..width).map(|i| (i % 13) as f32 / 13.0).collect();
        out.push(TensorRecord::new(format!("layer{l}.bias"), vec![width], b).expect("valid"));
    }
    out
}

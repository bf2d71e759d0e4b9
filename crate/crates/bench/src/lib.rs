//! Shared fixtures for the benchmarks.

use vfarb_core::{synth_prices, FeatureSpec, MlpModel, PriceSeries, SynthProfile};

/// Deterministic synthetic 5-minute prices.
pub fn prices(days: usize) -> PriceSeries {
    synth_prices(7, days, 5, &SynthProfile::default()).expect("synthetic prices")
}

/// Untrained network with the given settings-table shape.
pub fn model(lags: usize, dap: usize, hidden: usize) -> MlpModel {
    let spec = FeatureSpec::new(lags, dap, 5).expect("spec");
    MlpModel::new(spec, hidden, 50, 0).expect("model")
}

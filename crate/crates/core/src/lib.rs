//! Energy-storage price arbitrage driven by state-of-charge opportunity value
//! functions.
//!
//! The crate covers the whole pipeline:
//!
//! 1. [`dp`] computes the hindsight-optimal marginal value of stored energy for
//!    every period of a price history by backward recursion.
//! 2. [`features`], [`mlp`] and [`trainer`] fit a small dense network that maps
//!    lagged real-time and day-ahead prices to a down-sampled value curve.
//! 3. [`controller`] dispatches the asset period by period against either the
//!    hindsight curves or the network's predictions, and [`metrics`] scores the
//!    result against perfect foresight.

pub mod controller;
pub mod curve;
pub mod dp;
pub mod error;
pub mod features;
pub mod metrics;
pub mod mlp;
pub mod prices;
pub mod storage;
pub mod trainer;

pub use controller::{run_backtest, single_period_dispatch, BacktestResult, ControlState, CurveSource, DispatchRecord};
pub use curve::{MarginalValue, MarginalValueCurve};
pub use dp::{backward_update, generate_series, perfect_foresight_profit, SlopeProfile, ValueFunctionSeries};
pub use error::{Error, Result};
pub use features::{build_features, fit_normalization, FeatureSpec, Normalization};
pub use metrics::{compute_metrics, MetricsReport, RunLabels};
pub use mlp::{AdamState, MlpModel};
pub use prices::{load_prices, synth_prices, PriceSchema, PriceSeries, SynthProfile};
pub use storage::{feasible, step_soc, Dispatch, PriceSignal, StorageParams};
pub use trainer::{build_dataset, train_one, train_select, Dataset, TrainConfig, TrainedModel};

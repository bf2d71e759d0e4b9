//! Dataset assembly, per-seed training, and selection by training profit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::{run_backtest, CurveSource};
use crate::dp::ValueFunctionSeries;
use crate::error::{Error, Result};
use crate::features::{fit_normalization, FeatureSpec};
use crate::mlp::{AdamState, MlpModel, TargetNorm};
use crate::prices::PriceSeries;
use crate::storage::StorageParams;

pub const LABEL_SEGMENTS: usize = 50;
pub const BATCH_SIZE: usize = 512;

/// Rows of the settings table: (real-time lags, day-ahead prices, hidden width, epochs).
pub const SETTINGS: [(usize, usize, usize, usize); 4] =
    [(36, 0, 60, 10), (288, 0, 256, 20), (36, 24, 60, 10), (288, 24, 256, 20)];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Settings-table row this config came from, if any.
    pub setting: Option<u8>,
    pub n_rtp_lags: usize,
    pub n_dap: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub n_seeds: usize,
    pub label_segments: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub params: StorageParams,
    /// SoC at the start of the training-period backtest.
    pub soc0: f64,
}

impl TrainConfig {
    pub fn setting(id: u8, params: StorageParams) -> Result<Self> {
        let &(lags, dap, hidden, epochs) = SETTINGS
            .get((id as usize).wrapping_sub(1))
            .ok_or_else(|| Error::InvalidParams(format!("setting must be 1 to 4, got {id}")))?;
        let mut c = Self::custom(lags, dap, hidden, epochs, params)?;
        c.setting = Some(id);
        Ok(c)
    }

    pub fn custom(
        n_rtp_lags: usize,
        n_dap: usize,
        hidden: usize,
        epochs: usize,
        params: StorageParams,
    ) -> Result<Self> {
        FeatureSpec::new(n_rtp_lags, n_dap, 5)?;
        if hidden == 0 || epochs == 0 {
            return Err(Error::InvalidParams("hidden width and epoch count must be positive".into()));
        }
        Ok(TrainConfig {
            setting: None,
            n_rtp_lags,
            n_dap,
            hidden,
            epochs,
            n_seeds: 10,
            label_segments: LABEL_SEGMENTS,
            batch_size: BATCH_SIZE,
            learning_rate: 1e-3,
            params,
            soc0: 0.0,
        })
    }

    pub fn feature_spec(&self, period_minutes: u32) -> Result<FeatureSpec> {
        FeatureSpec::new(self.n_rtp_lags, self.n_dap, period_minutes)
    }
}

/// Normalized features and targets, one row per usable period.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Spec with fitted feature statistics.
    pub spec: FeatureSpec,
    pub target_norm: TargetNorm,
    /// Row-major, `len() × spec.len()`.
    pub features: Vec<f64>,
    /// Row-major normalized labels, `len() × label_dim`.
    pub targets: Vec<f64>,
    pub label_dim: usize,
    /// Price index of the first sample.
    pub first_period: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len() / self.label_dim
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.len()
    }

    pub fn features_row(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.features[i * d..(i + 1) * d]
    }

    /// Label of sample `i` in $/MWh.
    pub fn label(&self, i: usize) -> Vec<f64> {
        let k = self.label_dim;
        self.targets[i * k..(i + 1) * k].iter().map(|&v| self.target_norm.denormalize(v)).collect()
    }
}

/// Pairs the features of each period with the curve valuing SoC at its end,
/// averaged down to `label_segments` cells.
pub fn build_dataset(
    prices: &PriceSeries,
    values: &ValueFunctionSeries,
    spec: &FeatureSpec,
    label_segments: usize,
) -> Result<Dataset> {
    if values.horizon() != prices.len() {
        return Err(Error::Input(format!(
            "value series covers {} periods, prices have {}",
            values.horizon(),
            prices.len()
        )));
    }
    if (values.period_hours() - prices.period_hours()).abs() > 1e-12 {
        return Err(Error::Input("value series and prices use different period lengths".into()));
    }
    let first = spec.first_valid();
    if prices.len() <= first + 1 {
        return Err(Error::Input(format!(
            "{} periods leave fewer than two samples after a {first}-period window",
            prices.len()
        )));
    }
    let raw_spec = FeatureSpec { normalization: None, ..spec.clone() };
    let n = prices.len() - first;
    let mut features = Vec::with_capacity(n * spec.len());
    let mut labels = Vec::with_capacity(n * label_segments);
    for t in first..prices.len() {
        raw_spec.raw_into(prices, t, &mut features)?;
        labels.extend_from_slice(values.label(t + 1, label_segments)?.values());
    }

    let rows: Vec<&[f64]> = features.chunks_exact(spec.len()).collect();
    let norm = fit_normalization(&rows)?;
    for row in features.chunks_exact_mut(spec.len()) {
        norm.apply(row);
    }
    let target_norm = TargetNorm::fit(&labels);
    for v in &mut labels {
        *v = target_norm.normalize(*v);
    }
    Ok(Dataset {
        spec: raw_spec.with_normalization(norm)?,
        target_norm,
        features,
        targets: labels,
        label_dim: label_segments,
        first_period: first,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub seed: u64,
    /// Mean batch loss of each epoch, in normalized units.
    pub epoch_losses: Vec<f64>,
    pub training_profit: f64,
}

impl TrainedModel {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains one network from `seed`, then backtests it on the training prices.
pub fn train_one(config: &TrainConfig, dataset: &Dataset, prices: &PriceSeries, seed: u64) -> Result<TrainedModel> {
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut model = MlpModel::new(dataset.spec.clone(), config.hidden, dataset.label_dim, seed)?;
    model.target_norm = dataset.target_norm;
    let mut adam = AdamState::new(model.params().len()).with_learning_rate(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let (n, din, k) = (dataset.len(), dataset.input_dim(), dataset.label_dim);
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut xb = Vec::with_capacity(batch * din);
    let mut tb = Vec::with_capacity(batch * k);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            xb.clear();
            tb.clear();
            for &i in chunk {
                xb.extend_from_slice(dataset.features_row(i));
                tb.extend_from_slice(&dataset.targets[i * k..(i + 1) * k]);
            }
            let (loss, grad) = model
                .loss_and_grad(&xb, &tb, chunk.len())
                .map_err(|e| Error::Numeric(format!("seed {seed}, epoch {epoch}: {e}")))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("seed {seed}, epoch {epoch}: gradient is not finite")));
            }
            model.adam_step(&mut adam, &grad);
            total += loss * chunk.len() as f64;
        }
        let loss = total / n as f64;
        debug!("seed {seed} epoch {epoch} loss {loss:.6}");
        epoch_losses.push(loss);
    }
    let bt = run_backtest(prices, &config.params, CurveSource::Model(&model), config.soc0)?;
    info!("seed {seed}: loss {:.6}, training profit {:.2}", epoch_losses.last().unwrap_or(&f64::NAN), bt.state.profit);
    Ok(TrainedModel { model, seed, epoch_losses, training_profit: bt.state.profit })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub training_profit: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: TrainedModel,
    pub runs: Vec<SeedSummary>,
}

/// Index of the largest profit; earlier entries win ties.
pub fn select_best(profits: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in profits.iter().enumerate() {
        if best.is_none_or(|b| p > profits[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains seeds `0..n_seeds` in parallel and keeps the one with the highest
/// training-period profit.
pub fn train_select(config: &TrainConfig, dataset: &Dataset, prices: &PriceSeries) -> Result<Selection> {
    if config.n_seeds == 0 {
        return Err(Error::InvalidParams("at least one seed is required".into()));
    }
    let results: Vec<Result<TrainedModel>> =
        (0..config.n_seeds as u64).into_par_iter().map(|seed| train_one(config, dataset, prices, seed)).collect();

    let mut runs = Vec::with_capacity(results.len());
    let mut trained = Vec::new();
    for (seed, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => {
                runs.push(SeedSummary {
                    seed: seed as u64,
                    epoch_losses: m.epoch_losses.clone(),
                    training_profit: Some(m.training_profit),
                    error: None,
                });
                trained.push(m);
            }
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                runs.push(SeedSummary {
                    seed: seed as u64,
                    epoch_losses: Vec::new(),
                    training_profit: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let profits: Vec<f64> = trained.iter().map(|m| m.training_profit).collect();
    let Some(i) = select_best(&profits) else {
        return Err(Error::Numeric(format!("all {} seeds failed", config.n_seeds)));
    };
    let best = trained.swap_remove(i);
    info!("selected seed {} with training profit {:.2}", best.seed, best.training_profit);
    Ok(Selection { best, runs })
}

/// One line per seed: `seed,epochs,final_loss,training_profit,error`.
pub fn write_seed_log(path: impl AsRef<Path>, runs: &[SeedSummary]) -> Result<()> {
    let mut s = String::from("seed,epochs,final_loss,training_profit,error\n");
    for r in runs {
        let loss = r.epoch_losses.last().map(|l| l.to_string()).unwrap_or_default();
        let profit = r.training_profit.map(|p| p.to_string()).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        writeln!(s, "{},{},{loss},{profit},{err}", r.seed, r.epoch_losses.len()).expect("string write");
    }
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One line per seed and epoch: `seed,epoch,loss`.
pub fn write_epoch_log(path: impl AsRef<Path>, runs: &[SeedSummary]) -> Result<()> {
    let mut s = String::from("seed,epoch,loss\n");
    for r in runs {
        for (e, l) in r.epoch_losses.iter().enumerate() {
            writeln!(s, "{},{},{l}", r.seed, e + 1).expect("string write");
        }
    }
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prices::{synth_prices, SynthProfile};

    fn small() -> (PriceSeries, ValueFunctionSeries, StorageParams) {
        let prices = synth_prices(5, 2, 5, &SynthProfile::default()).unwrap();
        let params = StorageParams::default();
        let values = ValueFunctionSeries::generate(prices.rtp(), &params, 1001).unwrap();
        (prices, values, params)
    }

    fn quick(params: StorageParams) -> TrainConfig {
        let mut c = TrainConfig::custom(12, 24, 16, 10, params).unwrap();
        c.n_seeds = 2;
        c.batch_size = 64;
        c
    }

    #[test]
    fn settings_table() {
        let p = StorageParams::default();
        let c = TrainConfig::setting(2, p).unwrap();
        assert_eq!((c.n_rtp_lags, c.n_dap, c.hidden, c.epochs), (288, 0, 256, 20));
        let c = TrainConfig::setting(3, p).unwrap();
        assert_eq!((c.n_rtp_lags, c.n_dap, c.hidden, c.epochs), (36, 24, 60, 10));
        assert_eq!(c.n_seeds, 10);
        assert!(TrainConfig::setting(0, p).is_err());
        assert!(TrainConfig::setting(5, p).is_err());
    }

    #[test]
    fn dataset_shape_and_labels() {
        let (prices, values, _) = small();
        let spec = FeatureSpec::new(288, 0, 5).unwrap();
        let d = build_dataset(&prices, &values, &spec, 50).unwrap();
        assert_eq!(d.len(), prices.len() - 288);
        assert_eq!(d.input_dim(), 288);
        for i in (0..d.len()).step_by(17) {
            let l = d.label(i);
            assert_eq!(l.len(), 50);
            assert!(l.windows(2).all(|w| w[1] <= w[0] + 1e-9), "sample {i}");
        }
        let again = build_dataset(&prices, &values, &spec, 50).unwrap();
        assert_eq!(again, d);
        let short = values.label(1, 50).unwrap();
        assert!(build_dataset(&prices.slice(0, 100).unwrap(), &values, &spec, 50).is_err());
        assert_eq!(short.num_segments(), 50);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (prices, values, params) = small();
        let c = quick(params);
        let d = build_dataset(&prices, &values, &c.feature_spec(5).unwrap(), 50).unwrap();
        let a = train_one(&c, &d, &prices, 3).unwrap();
        assert!(a.final_loss() <= a.epoch_losses[0]);
        let b = train_one(&c, &d, &prices, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_labels_are_learned() {
        let (prices, values, params) = small();
        let mut c = quick(params);
        c.epochs = 20;
        let mut d = build_dataset(&prices, &values, &c.feature_spec(5).unwrap(), 50).unwrap();
        d.target_norm = TargetNorm { mean: 25.0, std: 1.0 };
        d.targets.iter_mut().for_each(|v| *v = 0.0);
        let m = train_one(&c, &d, &prices, 0).unwrap();
        let y = m.model.predict_batch(d.features_row(100), 1).unwrap();
        assert!(y.iter().all(|v| (v - 25.0).abs() <= 0.25), "{y:?}");
    }

    #[test]
    fn selection_takes_max_profit() {
        let (prices, values, params) = small();
        let mut c = quick(params);
        c.n_seeds = 3;
        c.epochs = 3;
        let d = build_dataset(&prices, &values, &c.feature_spec(5).unwrap(), 50).unwrap();
        let sel = train_select(&c, &d, &prices).unwrap();
        let best = sel.runs.iter().filter_map(|r| r.training_profit).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(sel.best.training_profit, best);
        assert_eq!(sel.runs.len(), 3);
        c.n_seeds = 0;
        assert!(train_select(&c, &d, &prices).is_err());
    }

    #[test]
    fn ties_go_to_lower_seed() {
        assert_eq!(select_best(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(select_best(&[5.0]), Some(0));
        assert_eq!(select_best(&[]), None);
        let scaled: Vec<f64> = [1.0, 3.0, 2.0].iter().map(|p| p * 7.5).collect();
        assert_eq!(select_best(&scaled), Some(1));
    }

    #[test]
    fn logs_have_one_row_per_seed() {
        let runs = vec![
            SeedSummary { seed: 0, epoch_losses: vec![1.0, 0.5], training_profit: Some(3.0), error: None },
            SeedSummary {
                seed: 1,
                epoch_losses: vec![],
                training_profit: None,
                error: Some("epoch 2: loss, NaN".into()),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seeds.csv");
        write_seed_log(&p, &runs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0,2,0.5,3,"));
        let e = dir.path().join("epochs.csv");
        write_epoch_log(&e, &runs).unwrap();
        assert_eq!(std::fs::read_to_string(&e).unwrap().lines().count(), 3);
    }
}

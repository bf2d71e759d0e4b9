//! Single-period dispatch against a marginal value curve, and the backtest
//! loop that chains it over a price series.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::curve::{MarginalValue, MarginalValueCurve};
use crate::dp::ValueFunctionSeries;
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::mlp::MlpModel;
use crate::prices::PriceSeries;
use crate::storage::{step_soc, Dispatch, StorageParams};

/// Periods predicted per network call in model mode.
const PREDICT_CHUNK: usize = 2048;

const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Energy-optimal move for one period given the value of SoC left behind.
///
/// Charges while the marginal value above the current SoC beats `λ/η^b`,
/// otherwise discharges (non-negative prices only) while the marginal value
/// below stays under `(λ−c)·η^p`, otherwise idles.
pub fn single_period_dispatch<M: MarginalValue + ?Sized>(
    curve: &M,
    price: f64,
    params: &StorageParams,
    soc_prev: f64,
) -> Dispatch {
    let e_max = params.energy_mwh();
    let cap = params.energy_per_period();
    let soc = soc_prev.clamp(0.0, e_max);
    let (eta_b, eta_p) = (params.eta_charge(), params.eta_discharge());

    let top = curve.climb(soc, (soc + params.max_soc_rise()).min(e_max), params.charge_threshold(price));
    if top > soc {
        let charge = ((top - soc) / eta_b).min(cap);
        let soc_end = step_soc(params, soc, charge, 0.0).clamp(0.0, e_max);
        return Dispatch { charge, discharge: 0.0, soc_end };
    }
    if let Some(theta_d) = params.discharge_threshold(price) {
        let bottom = curve.descend(soc, (soc - params.max_soc_drop()).max(0.0), theta_d);
        if bottom < soc {
            let discharge = ((soc - bottom) * eta_p).min(cap);
            let soc_end = step_soc(params, soc, 0.0, discharge).clamp(0.0, e_max);
            return Dispatch { charge: 0.0, discharge, soc_end };
        }
    }
    Dispatch::idle(soc)
}

/// One row of the dispatch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub timestamp: Option<NaiveDateTime>,
    pub price: f64,
    pub charge: f64,
    pub discharge: f64,
    pub soc: f64,
    pub profit: f64,
}

/// Running state of a backtest.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub soc: f64,
    pub profit: f64,
    pub discharged: f64,
    pub log: Vec<DispatchRecord>,
}

impl ControlState {
    pub fn new(soc0: f64) -> Self {
        ControlState { soc: soc0, profit: 0.0, discharged: 0.0, log: Vec::new() }
    }

    pub fn periods(&self) -> usize {
        self.log.len()
    }

    fn apply(&mut self, d: &Dispatch, price: f64, params: &StorageParams, timestamp: Option<NaiveDateTime>) {
        let profit = d.revenue(price, params);
        self.soc = d.soc_end;
        self.profit += profit;
        self.discharged += d.discharge;
        self.log.push(DispatchRecord {
            timestamp,
            price,
            charge: d.charge,
            discharge: d.discharge,
            soc: d.soc_end,
            profit,
        });
    }
}

fn check_soc0(params: &StorageParams, soc0: f64) -> Result<()> {
    if !(0.0..=params.energy_mwh()).contains(&soc0) {
        return Err(Error::Domain(format!("initial SoC {soc0} outside [0, {}]", params.energy_mwh())));
    }
    Ok(())
}

/// Greedy dispatch over `rtp` where period `t` values leftover SoC with
/// `curve_for(t)`.
pub fn dispatch_along<'a, M, F>(
    rtp: &[f64],
    params: &StorageParams,
    soc0: f64,
    mut curve_for: F,
) -> Result<ControlState>
where
    M: MarginalValue + ?Sized + 'a,
    F: FnMut(usize) -> &'a M,
{
    check_soc0(params, soc0)?;
    let mut state = ControlState::new(soc0);
    state.log.reserve(rtp.len());
    for (t, &price) in rtp.iter().enumerate() {
        let d = single_period_dispatch(curve_for(t), price, params, state.soc);
        state.apply(&d, price, params, None);
    }
    Ok(state)
}

/// Where the backtest gets the curve for each period.
#[derive(Debug, Clone, Copy)]
pub enum CurveSource<'a> {
    /// Exact curves computed from the same prices.
    Hindsight(&'a ValueFunctionSeries),
    /// Curves predicted from causal features.
    Model(&'a MlpModel),
    /// The same curve every period.
    Constant(&'a MarginalValueCurve),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub state: ControlState,
    /// Leading periods forced idle for lack of feature history.
    pub warmup: usize,
}

pub fn run_backtest(
    prices: &PriceSeries,
    params: &StorageParams,
    source: CurveSource<'_>,
    soc0: f64,
) -> Result<BacktestResult> {
    check_soc0(params, soc0)?;
    let mut state = ControlState::new(soc0);
    state.log.reserve(prices.len());
    let rtp = prices.rtp();
    let stamp = |t: usize| Some(prices.timestamp(t));
    let mut warmup = 0;

    match source {
        CurveSource::Hindsight(series) => {
            if series.horizon() != prices.len() {
                return Err(Error::Input(format!(
                    "value series covers {} periods, prices have {}",
                    series.horizon(),
                    prices.len()
                )));
            }
            check_capacity(series.capacity(), params)?;
            for (t, &price) in rtp.iter().enumerate() {
                let d = single_period_dispatch(series.profile(t + 1), price, params, state.soc);
                state.apply(&d, price, params, stamp(t));
            }
        }
        CurveSource::Constant(curve) => {
            check_capacity(curve.capacity(), params)?;
            for (t, &price) in rtp.iter().enumerate() {
                let d = single_period_dispatch(curve, price, params, state.soc);
                state.apply(&d, price, params, stamp(t));
            }
        }
        CurveSource::Model(model) => {
            let spec = &model.feature_spec;
            check_spec(spec, prices)?;
            warmup = spec.first_valid().min(prices.len());
            if warmup > 0 {
                info!("idling the first {warmup} periods while the feature window fills");
            }
            for (t, &price) in rtp[..warmup].iter().enumerate() {
                state.apply(&Dispatch::idle(state.soc), price, params, stamp(t));
            }
            let k = model.output_dim();
            let mut start = warmup;
            while start < prices.len() {
                let end = (start + PREDICT_CHUNK).min(prices.len());
                let curves = predict_curves(model, prices, start..end)?;
                debug_assert_eq!(curves.len(), (end - start) * k);
                for (i, t) in (start..end).enumerate() {
                    let curve = MarginalValueCurve::new(curves[i * k..(i + 1) * k].to_vec(), params.energy_mwh())?
                        .monotone_projection();
                    let d = single_period_dispatch(&curve, rtp[t], params, state.soc);
                    state.apply(&d, rtp[t], params, stamp(t));
                }
                start = end;
            }
        }
    }
    Ok(BacktestResult { state, warmup })
}

fn check_capacity(capacity: f64, params: &StorageParams) -> Result<()> {
    let e = params.energy_mwh();
    if (capacity - e).abs() > 1e-9 * e {
        return Err(Error::Input(format!("curves span {capacity} MWh but the asset holds {e} MWh")));
    }
    Ok(())
}

fn check_spec(spec: &FeatureSpec, prices: &PriceSeries) -> Result<()> {
    if spec.period_minutes != prices.period_minutes() {
        return Err(Error::Input(format!(
            "model expects {}-minute prices, data has {}-minute periods",
            spec.period_minutes,
            prices.period_minutes()
        )));
    }
    Ok(())
}

/// Row-major predicted marginal values for periods `range`.
pub fn predict_curves(model: &MlpModel, prices: &PriceSeries, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
    let spec = &model.feature_spec;
    let n = range.len();
    let mut x = Vec::with_capacity(n * spec.len());
    for t in range {
        let at = x.len();
        spec.raw_into(prices, t, &mut x)?;
        if let Some(norm) = &spec.normalization {
            norm.apply(&mut x[at..]);
        }
    }
    model.predict_batch(&x, n)
}

pub fn write_dispatch_log(path: impl AsRef<Path>, log: &[DispatchRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = String::from("timestamp,price,charge_mwh,discharge_mwh,soc_mwh,profit\n");
    for r in log {
        let ts = r.timestamp.map(|t| t.format(TIME_FORMAT).to_string()).unwrap_or_default();
        body.push_str(&format!("{ts},{},{},{},{},{}\n", r.price, r.charge, r.discharge, r.soc, r.profit));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_dispatch_log(path: impl AsRef<Path>) -> Result<Vec<DispatchRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if row.len() != 6 {
            return Err(Error::parse(path, line, format!("expected 6 fields, found {}", row.len())));
        }
        let num = |k: usize| -> Result<f64> {
            row[k].trim().parse().map_err(|_| Error::parse(path, line, format!("bad number {:?}", &row[k])))
        };
        let timestamp = match row[0].trim() {
            "" => None,
            s => Some(
                NaiveDateTime::parse_from_str(s, TIME_FORMAT)
                    .map_err(|e| Error::parse(path, line, format!("bad timestamp {s:?}: {e}")))?,
            ),
        };
        out.push(DispatchRecord {
            timestamp,
            price: num(1)?,
            charge: num(2)?,
            discharge: num(3)?,
            soc: num(4)?,
            profit: num(5)?,
        });
    }
    if out.is_empty() {
        warn!("{} holds no dispatch rows", path.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::feasible;

    fn five_minute() -> StorageParams {
        StorageParams::default()
    }

    /// Best objective over a fine grid of charge and discharge amounts.
    fn enumerate(curve: &MarginalValueCurve, price: f64, params: &StorageParams, soc: f64) -> f64 {
        let cap = params.energy_per_period();
        let mut best = f64::NEG_INFINITY;
        for j in 0..=2000 {
            let a = cap * j as f64 / 2000.0;
            for (b, p) in [(a, 0.0), (0.0, a)] {
                if p > 0.0 && price < 0.0 {
                    continue;
                }
                let end = step_soc(params, soc, b, p);
                if !(-1e-12..=params.energy_mwh() + 1e-12).contains(&end) {
                    continue;
                }
                let end = end.clamp(0.0, params.energy_mwh());
                let v = price * (p - b) - params.marginal_cost() * p + curve.integrate(soc, end).unwrap();
                best = best.max(v);
            }
        }
        best
    }

    fn objective(curve: &MarginalValueCurve, price: f64, params: &StorageParams, soc: f64, d: &Dispatch) -> f64 {
        d.revenue(price, params) + curve.integrate(soc, d.soc_end).unwrap()
    }

    #[test]
    fn discharge_above_threshold() {
        let p = five_minute();
        let curve = MarginalValueCurve::constant(1001, 1.0, 30.0).unwrap();
        let d = single_period_dispatch(&curve, 50.0, &p, 0.5);
        assert!((d.discharge - p.energy_per_period()).abs() < 1e-12);
        assert_eq!(d.charge, 0.0);
        let gap = enumerate(&curve, 50.0, &p, 0.5) - objective(&curve, 50.0, &p, 0.5, &d);
        assert!(gap.abs() < 1e-9, "gap {gap}");
    }

    #[test]
    fn idle_inside_band() {
        let p = five_minute();
        let curve = MarginalValueCurve::constant(1001, 1.0, 30.0).unwrap();
        let d = single_period_dispatch(&curve, 30.0, &p, 0.5);
        assert_eq!(d, Dispatch::idle(0.5));
        assert!(enumerate(&curve, 30.0, &p, 0.5) <= 1e-12);
    }

    #[test]
    fn charges_at_negative_price() {
        let p = five_minute();
        let curve = MarginalValueCurve::constant(1001, 1.0, 10.0).unwrap();
        let d = single_period_dispatch(&curve, -5.0, &p, 0.0);
        assert!((d.charge - p.energy_per_period()).abs() < 1e-12);
        assert_eq!(d.discharge, 0.0);
        let gap = enumerate(&curve, -5.0, &p, 0.0) - objective(&curve, -5.0, &p, 0.0, &d);
        assert!(gap.abs() < 1e-9);
    }

    #[test]
    fn stops_at_segment_boundary() {
        let p = StorageParams::new(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let curve = MarginalValueCurve::new(vec![50.0, 40.0, 30.0, 20.0], 1.0).unwrap();
        let d = single_period_dispatch(&curve, 35.0, &p, 0.0);
        assert!((d.soc_end - 0.5).abs() < 1e-12);
        let d = single_period_dispatch(&curve, 35.0, &p, 1.0);
        assert!((d.soc_end - 0.5).abs() < 1e-12);
        assert!((d.discharge - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_on_random_curves() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = StorageParams::new(0.5, 1.0, 0.85, 0.95, 5.0, 0.25).unwrap();
        for _ in 0..40 {
            let mut v = 80.0;
            let values: Vec<f64> = (0..40)
                .map(|_| {
                    v -= rng.random_range(0.0..4.0);
                    v
                })
                .collect();
            let curve = MarginalValueCurve::new(values, 1.0).unwrap();
            let price = rng.random_range(-20.0..90.0);
            let soc = rng.random_range(0.0..1.0);
            let d = single_period_dispatch(&curve, price, &p, soc);
            assert!(feasible(&p, soc, &d, price));
            let gap = enumerate(&curve, price, &p, soc) - objective(&curve, price, &p, soc, &d);
            assert!(gap < 1e-6, "gap {gap} at price {price}, soc {soc}");
        }
    }

    #[test]
    fn zero_prices_idle() {
        let s = PriceSeries::new("Z", start(), 5, vec![0.0; 288], vec![[0.0; 24]]).unwrap();
        let p = five_minute();
        let series = ValueFunctionSeries::generate(s.rtp(), &p, 101).unwrap();
        let r = run_backtest(&s, &p, CurveSource::Hindsight(&series), 0.5).unwrap();
        assert_eq!(r.state.profit, 0.0);
        assert!(r.state.log.iter().all(|x| x.charge == 0.0 && x.discharge == 0.0));
        assert_eq!(r.state.periods(), 288);
    }

    #[test]
    fn hindsight_matches_perfect_foresight() {
        let s = crate::prices::synth_prices(4, 3, 5, &Default::default()).unwrap();
        let p = five_minute();
        let series = ValueFunctionSeries::generate(s.rtp(), &p, 1001).unwrap();
        let r = run_backtest(&s, &p, CurveSource::Hindsight(&series), 0.0).unwrap();
        let opt = crate::dp::perfect_foresight_profit(s.rtp(), &p, 0.0).unwrap();
        assert!((r.state.profit - opt).abs() <= 1e-6 * opt.abs().max(1.0), "{} vs {opt}", r.state.profit);
    }

    #[test]
    fn model_mode_warms_up_idle() {
        let s = crate::prices::synth_prices(4, 2, 5, &Default::default()).unwrap();
        let spec = FeatureSpec::new(36, 24, 5).unwrap();
        let model = MlpModel::new(spec, 8, 50, 1).unwrap();
        let r = run_backtest(&s, &five_minute(), CurveSource::Model(&model), 0.5).unwrap();
        assert_eq!(r.warmup, 36);
        assert_eq!(r.state.periods(), s.len());
        assert!(r.state.log[..36].iter().all(|x| x.charge == 0.0 && x.discharge == 0.0 && x.soc == 0.5));
        let hourly = FeatureSpec::new(3, 0, 60).unwrap();
        let model = MlpModel::new(hourly, 4, 50, 1).unwrap();
        assert!(run_backtest(&s, &five_minute(), CurveSource::Model(&model), 0.5).is_err());
    }

    #[test]
    fn log_round_trip() {
        let s = crate::prices::synth_prices(1, 1, 5, &Default::default()).unwrap();
        let zero = MarginalValueCurve::constant(10, 1.0, 20.0).unwrap();
        let r = run_backtest(&s, &five_minute(), CurveSource::Constant(&zero), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_dispatch_log(&path, &r.state.log).unwrap();
        assert_eq!(read_dispatch_log(&path).unwrap(), r.state.log);
    }

    #[test]
    fn rejects_bad_initial_soc() {
        let p = five_minute();
        let c = MarginalValueCurve::constant(4, 1.0, 0.0).unwrap();
        assert!(dispatch_along(&[1.0], &p, 1.5, |_| &c).is_err());
    }

    fn start() -> NaiveDateTime {
        chrono::NaiveDate::from_ymd_opt(2019, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }
}

use proptest::prelude::*;
use vfarb_core::controller::{dispatch_along, read_dispatch_log, write_dispatch_log};
use vfarb_core::mlp::TargetNorm;
use vfarb_core::{
    compute_metrics, feasible, perfect_foresight_profit, run_backtest, single_period_dispatch, synth_prices,
    CurveSource, FeatureSpec, MarginalValueCurve, MlpModel, RunLabels, StorageParams, SynthProfile,
    ValueFunctionSeries,
};

fn params() -> impl Strategy<Value = StorageParams> {
    (
        0.5f64..4.0,
        1.0f64..4.0,
        0.7f64..=1.0,
        0.7f64..=1.0,
        0.0f64..20.0,
        prop::sample::select(vec![1.0 / 12.0, 0.25, 1.0]),
    )
        .prop_map(|(e, d, eb, ep, c, dt)| StorageParams::new(e / d, e, eb, ep, c, dt).unwrap())
}

fn curve(capacity: f64) -> impl Strategy<Value = MarginalValueCurve> {
    (prop::collection::vec(0.0f64..15.0, 1..60), -30.0f64..120.0).prop_map(move |(steps, top)| {
        let mut v = top;
        let values = steps
            .into_iter()
            .map(|s| {
                v -= s;
                v
            })
            .collect();
        MarginalValueCurve::new(values, capacity).unwrap()
    })
}

fn instance() -> impl Strategy<Value = (StorageParams, MarginalValueCurve, f64, f64)> {
    params().prop_flat_map(|p| {
        let e = p.energy_mwh();
        (Just(p), curve(e), 0.0..=e, -50.0f64..200.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dispatch_is_feasible((p, c, soc, price) in instance()) {
        let d = single_period_dispatch(&c, price, &p, soc);
        prop_assert!(feasible(&p, soc, &d, price));
        prop_assert!(d.charge == 0.0 || d.discharge == 0.0);
        prop_assert!(d.soc_end >= 0.0 && d.soc_end <= p.energy_mwh());
        if price < 0.0 {
            prop_assert_eq!(d.discharge, 0.0);
        }
        if d.discharge > 0.0 {
            prop_assert!((soc - d.soc_end - d.discharge / p.eta_discharge()).abs() <= 1e-12 * p.energy_mwh().max(1.0));
        }
    }

    #[test]
    fn dispatch_beats_every_alternative((p, c, soc, price) in instance(), frac in 0.0f64..=1.0, charge in any::<bool>()) {
        let d = single_period_dispatch(&c, price, &p, soc);
        let objective = |b: f64, q: f64, end: f64| price * (q - b) - p.marginal_cost() * q + c.integrate(soc, end).unwrap();
        let best = objective(d.charge, d.discharge, d.soc_end);
        let amount = frac * p.energy_per_period();
        let (b, q) = if charge { (amount, 0.0) } else { (0.0, amount) };
        let end = soc + b * p.eta_charge() - q / p.eta_discharge();
        if end >= 0.0 && end <= p.energy_mwh() && !(price < 0.0 && q > 0.0) {
            prop_assert!(objective(b, q, end) <= best + 1e-9 * best.abs().max(1.0));
        }
    }

    #[test]
    fn higher_price_never_means_more_net_charge((p, c, soc, price) in instance(), bump in 0.0f64..50.0) {
        let lo = single_period_dispatch(&c, price, &p, soc);
        let hi = single_period_dispatch(&c, price + bump, &p, soc);
        prop_assert!(hi.discharge - hi.charge >= lo.discharge - lo.charge - 1e-12);
    }

    #[test]
    fn trajectory_respects_bounds(p in params(), seed in 0u64..1000, soc_frac in 0.0f64..=1.0) {
        let prices = synth_prices(seed, 1, 5, &SynthProfile::default()).unwrap();
        let rtp = prices.rtp();
        let series = ValueFunctionSeries::generate(rtp, &p, 1).unwrap();
        let soc0 = soc_frac * p.energy_mwh();
        let run = dispatch_along(rtp, &p, soc0, |t| series.profile(t + 1)).unwrap();
        prop_assert_eq!(run.log.len(), rtp.len());
        let mut prev = soc0;
        for r in &run.log {
            prop_assert!(r.soc >= 0.0 && r.soc <= p.energy_mwh());
            prop_assert!(r.charge == 0.0 || r.discharge == 0.0);
            prop_assert!((r.soc - (prev + r.charge * p.eta_charge() - r.discharge / p.eta_discharge())).abs() < 1e-9);
            prev = r.soc;
        }
        let opt = perfect_foresight_profit(rtp, &p, soc0).unwrap();
        prop_assert!((run.profit - opt).abs() <= 1e-9 * opt.abs().max(1.0));
    }

    #[test]
    fn network_outputs_are_finite(seed in 0u64..500, x in prop::collection::vec(-1e3f64..1e3, 8)) {
        let spec = FeatureSpec::new(8, 0, 5).unwrap();
        let mut m = MlpModel::new(spec, 6, 5, seed).unwrap();
        m.target_norm = TargetNorm { mean: 30.0, std: 20.0 };
        prop_assert!(m.forward(&x).unwrap().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn same_seed_same_initialization() {
    let spec = FeatureSpec::new(36, 24, 5).unwrap();
    let a = MlpModel::new(spec.clone(), 60, 50, 11).unwrap();
    let b = MlpModel::new(spec.clone(), 60, 50, 11).unwrap();
    let c = MlpModel::new(spec, 60, 50, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
}

#[test]
fn metrics_recompute_from_persisted_log() {
    let prices = synth_prices(3, 4, 5, &SynthProfile::default()).unwrap();
    let p = StorageParams::default();
    let flat = MarginalValueCurve::constant(50, 1.0, 30.0).unwrap();
    let run = run_backtest(&prices, &p, CurveSource::Constant(&flat), 0.5).unwrap();
    let opt = perfect_foresight_profit(prices.rtp(), &p, 0.5).unwrap();
    let labels = RunLabels { zone: "SYNTH".into(), setting: "const".into(), duration_hours: 2.0, marginal_cost: 10.0 };
    let direct = compute_metrics(&run.state.log, opt, prices.period_hours(), &labels);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_dispatch_log(&path, &run.state.log).unwrap();
    let back = read_dispatch_log(&path).unwrap();
    let again = compute_metrics(&back, opt, prices.period_hours(), &labels);
    assert_eq!(direct, again);
    assert!(direct.profit_ratio.unwrap() <= 100.0);
    assert!((direct.profit - run.state.profit).abs() < 1e-9);
    assert!((direct.discharged - run.state.discharged).abs() < 1e-12);
}

#[test]
fn hindsight_ratio_is_at_most_100() {
    for seed in 0..5 {
        let prices = synth_prices(seed, 2, 5, &SynthProfile::default()).unwrap();
        let p = StorageParams::default();
        let series = ValueFunctionSeries::generate(prices.rtp(), &p, 1001).unwrap();
        let run = run_backtest(&prices, &p, CurveSource::Hindsight(&series), 0.0).unwrap();
        let opt = perfect_foresight_profit(prices.rtp(), &p, 0.0).unwrap();
        let labels = RunLabels::default();
        let m = compute_metrics(&run.state.log, opt, prices.period_hours(), &labels);
        let ratio = m.profit_ratio.unwrap();
        assert!((0.0..=100.0 + 1e-9).contains(&ratio), "seed {seed}: {ratio}");
        assert!((ratio - 100.0).abs() < 1e-6);
    }
}

//! Backtest metrics: profit ratio against perfect foresight, annualized
//! revenue and discharge, and revenue per MWh discharged.
//!
//! Annualization scales horizon totals by `8760 / (T·Δt)`, so a 30-day
//! backtest is multiplied by 8760/720 regardless of leap days.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::controller::DispatchRecord;
use crate::error::{Error, Result};

pub const HOURS_PER_YEAR: f64 = 8760.0;

/// Labels identifying a run in comparison tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLabels {
    pub zone: String,
    pub setting: String,
    pub duration_hours: f64,
    pub marginal_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub zone: String,
    pub setting: String,
    pub duration_hours: f64,
    pub marginal_cost: f64,
    pub periods: usize,
    pub period_hours: f64,
    pub profit: f64,
    pub optimal_profit: f64,
    /// Percent; absent when the optimum is not positive.
    pub profit_ratio: Option<f64>,
    pub annual_profit: f64,
    /// Total discharged energy over the horizon, MWh.
    pub discharged: f64,
    /// Discharged energy per year, MWh.
    pub annual_discharge: f64,
    /// Absent when nothing was discharged.
    pub revenue_per_mwh: Option<f64>,
}

impl MetricsReport {
    pub fn labels(&self) -> RunLabels {
        RunLabels {
            zone: self.zone.clone(),
            setting: self.setting.clone(),
            duration_hours: self.duration_hours,
            marginal_cost: self.marginal_cost,
        }
    }
}

pub fn compute_metrics(
    log: &[DispatchRecord],
    optimal_profit: f64,
    period_hours: f64,
    labels: &RunLabels,
) -> MetricsReport {
    let profit: f64 = log.iter().map(|r| r.profit).sum();
    let discharged: f64 = log.iter().map(|r| r.discharge).sum();
    let horizon_hours = log.len() as f64 * period_hours;
    let scale = if horizon_hours > 0.0 { HOURS_PER_YEAR / horizon_hours } else { 0.0 };
    let profit_ratio = if optimal_profit > 0.0 {
        Some(100.0 * profit / optimal_profit)
    } else {
        if profit > 0.0 {
            warn!("optimal profit {optimal_profit} is not positive but the run earned {profit}; ratio omitted");
        }
        None
    };
    MetricsReport {
        zone: labels.zone.clone(),
        setting: labels.setting.clone(),
        duration_hours: labels.duration_hours,
        marginal_cost: labels.marginal_cost,
        periods: log.len(),
        period_hours,
        profit,
        optimal_profit,
        profit_ratio,
        annual_profit: profit * scale,
        discharged,
        annual_discharge: discharged * scale,
        revenue_per_mwh: (discharged > 0.0).then(|| profit / discharged),
    }
}

pub fn write_reports(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    for r in reports {
        w.serialize(r).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(path, i as u64 + 2, e.to_string())))
        .collect()
}

/// Merges reports into one row per label set, sorted by zone, setting,
/// duration and cost. Later reports replace earlier ones with the same labels.
pub fn compare(reports: Vec<MetricsReport>) -> Vec<MetricsReport> {
    if let (Some(lo), Some(hi)) = (reports.iter().map(|r| r.periods).min(), reports.iter().map(|r| r.periods).max()) {
        if lo != hi {
            warn!("reports cover different horizons ({lo} to {hi} periods)");
        }
    }
    let mut grid: BTreeMap<(String, String, u64, u64), MetricsReport> = BTreeMap::new();
    for r in reports {
        let key = (r.zone.clone(), r.setting.clone(), order_key(r.duration_hours), order_key(r.marginal_cost));
        let (zone, setting) = (r.zone.clone(), r.setting.clone());
        if grid.insert(key, r).is_some() {
            warn!("duplicate report for zone {zone} setting {setting}; keeping the later one");
        }
    }
    grid.into_values().collect()
}

/// Maps a float to an integer with the same ordering.
fn order_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Fixed-width comparison table, one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
    let mut s = format!(
        "{:<10} {:<10} {:>8} {:>8} {:>10} {:>12} {:>12} {:>10}\n",
        "zone", "setting", "dur_h", "mc", "ratio_%", "rev_k$/yr", "dis_GWh/yr", "$/MWh"
    );
    for r in reports {
        writeln!(
            s,
            "{:<10} {:<10} {:>8} {:>8} {:>10} {:>12.2} {:>12.3} {:>10}",
            r.zone,
            r.setting,
            r.duration_hours,
            r.marginal_cost,
            opt(r.profit_ratio, 2),
            r.annual_profit / 1e3,
            r.annual_discharge / 1e3,
            opt(r.revenue_per_mwh, 2)
        )
        .expect("string write");
    }
    s
}

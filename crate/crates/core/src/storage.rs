//! Storage asset description and the single-period feasibility set.
//!
//! Charge `b` and discharge `p` are energies per market period (MWh), so the
//! power rating enters only through the per-period cap `P̄ = P·Δt`.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack used when checking energy balances and bounds.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct StorageParams {
    power_mw: f64,
    energy_mwh: f64,
    eta_charge: f64,
    eta_discharge: f64,
    marginal_cost: f64,
    period_hours: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawParams {
    power_mw: f64,
    energy_mwh: f64,
    eta_charge: f64,
    eta_discharge: f64,
    marginal_cost: f64,
    period_hours: f64,
}

impl TryFrom<RawParams> for StorageParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        StorageParams::new(r.power_mw, r.energy_mwh, r.eta_charge, r.eta_discharge, r.marginal_cost, r.period_hours)
    }
}

impl From<StorageParams> for RawParams {
    fn from(p: StorageParams) -> Self {
        RawParams {
            power_mw: p.power_mw,
            energy_mwh: p.energy_mwh,
            eta_charge: p.eta_charge,
            eta_discharge: p.eta_discharge,
            marginal_cost: p.marginal_cost,
            period_hours: p.period_hours,
        }
    }
}

impl Default for StorageParams {
    /// 1 MWh / 0.5 MW, 90% one-way efficiency, $10/MWh discharge cost, 5-minute periods.
    fn default() -> Self {
        StorageParams {
            power_mw: 0.5,
            energy_mwh: 1.0,
            eta_charge: 0.9,
            eta_discharge: 0.9,
            marginal_cost: 10.0,
            period_hours: 1.0 / 12.0,
        }
    }
}

impl StorageParams {
    pub fn new(
        power_mw: f64,
        energy_mwh: f64,
        eta_charge: f64,
        eta_discharge: f64,
        marginal_cost: f64,
        period_hours: f64,
    ) -> Result<Self> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::InvalidParams(what.to_string())) };
        check(power_mw.is_finite() && power_mw > 0.0, "power rating must be positive")?;
        check(energy_mwh.is_finite() && energy_mwh > 0.0, "energy capacity must be positive")?;
        check(eta_charge > 0.0 && eta_charge <= 1.0, "charge efficiency must lie in (0, 1]")?;
        check(eta_discharge > 0.0 && eta_discharge <= 1.0, "discharge efficiency must lie in (0, 1]")?;
        check(marginal_cost.is_finite() && marginal_cost >= 0.0, "marginal discharge cost must be non-negative")?;
        check(period_hours.is_finite() && period_hours > 0.0, "period length must be positive")?;
        Ok(StorageParams { power_mw, energy_mwh, eta_charge, eta_discharge, marginal_cost, period_hours })
    }

    pub fn power_mw(&self) -> f64 {
        self.power_mw
    }

    pub fn energy_mwh(&self) -> f64 {
        self.energy_mwh
    }

    pub fn eta_charge(&self) -> f64 {
        self.eta_charge
    }

    pub fn eta_discharge(&self) -> f64 {
        self.eta_discharge
    }

    pub fn marginal_cost(&self) -> f64 {
        self.marginal_cost
    }

    pub fn period_hours(&self) -> f64 {
        self.period_hours
    }

    /// Energy that can cross the grid connection in one period, `P·Δt`.
    pub fn energy_per_period(&self) -> f64 {
        self.power_mw * self.period_hours
    }

    /// Duration in hours, `E / P`.
    pub fn duration_hours(&self) -> f64 {
        self.energy_mwh / self.power_mw
    }

    /// SoC gained by a full-power charge.
    pub fn max_soc_rise(&self) -> f64 {
        self.energy_per_period() * self.eta_charge
    }

    /// SoC lost by a full-power discharge.
    pub fn max_soc_drop(&self) -> f64 {
        self.energy_per_period() / self.eta_discharge
    }

    /// Marginal value of stored energy above which buying at `price` pays off.
    pub fn charge_threshold(&self, price: f64) -> f64 {
        price / self.eta_charge
    }

    /// Marginal value below which selling at `price` pays off. `None` at
    /// negative prices, where discharge is disallowed.
    pub fn discharge_threshold(&self, price: f64) -> Option<f64> {
        (price >= 0.0).then_some((price - self.marginal_cost) * self.eta_discharge)
    }

    pub fn with_marginal_cost(mut self, c: f64) -> Result<Self> {
        self.marginal_cost = c;
        Self::try_from(RawParams::from(self))
    }
}

/// Energies for one period: grid-side charge `b`, grid-side discharge `p`, and
/// the SoC at the end of the period.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Dispatch {
    pub charge: f64,
    pub discharge: f64,
    pub soc_end: f64,
}

impl Dispatch {
    pub fn idle(soc: f64) -> Self {
        Dispatch { charge: 0.0, discharge: 0.0, soc_end: soc }
    }

    /// Market revenue less discharge cost, `λ(p − b) − c·p`.
    pub fn revenue(&self, price: f64, params: &StorageParams) -> f64 {
        price * (self.discharge - self.charge) - params.marginal_cost * self.discharge
    }
}

/// SoC after charging `b` and discharging `p`. No clamping.
pub fn step_soc(params: &StorageParams, soc_prev: f64, charge: f64, discharge: f64) -> f64 {
    soc_prev - discharge / params.eta_discharge + charge * params.eta_charge
}

/// Membership test for the feasibility set of one period.
pub fn feasible(params: &StorageParams, soc_prev: f64, d: &Dispatch, price: f64) -> bool {
    let cap = params.energy_per_period();
    let e_max = params.energy_mwh;
    let within = |x: f64, hi: f64| x >= -FEAS_TOL && x <= hi + FEAS_TOL;

    within(d.charge, cap)
        && within(d.discharge, cap)
        && within(d.soc_end, e_max)
        && (d.soc_end - step_soc(params, soc_prev, d.charge, d.discharge)).abs() <= FEAS_TOL
        && !(price < 0.0 && d.discharge > 0.0)
}

/// Everything the controller observes at one period.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSignal {
    pub rtp: f64,
    pub dap_day: [f64; 24],
    pub timestamp: NaiveDateTime,
}

//! Brute-force tabular value iteration, used to cross-check the analytic
//! recursion and the perfect-foresight profit.
//!
//! SoC lives on `soc_grid_n` equally spaced points. Each state tries idle,
//! `action_grid_n − 1` evenly spaced charge levels, the same number of
//! discharge levels (only at non-negative prices), and the two moves that
//! land exactly on an SoC bound. Off-grid successors are valued by linear
//! interpolation.

use log::warn;

use crate::curve::MarginalValueCurve;
use crate::dp::ValueFunctionSeries;
use crate::error::{Error, Result};
use crate::storage::StorageParams;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// `V_0(e_0)`.
    pub optimal_profit: f64,
    /// SoC grid points.
    pub grid: Vec<f64>,
    /// `values[t][i] = V_t(grid[i])` for `t = 0..=T`.
    pub values: Vec<Vec<f64>>,
    period_hours: f64,
}

impl OracleSolution {
    /// Finite-difference marginals on the `soc_grid_n − 1` grid cells.
    pub fn marginal_curve(&self, t: usize) -> MarginalValueCurve {
        let v = &self.values[t];
        let h = self.grid[1] - self.grid[0];
        let slopes = v.windows(2).map(|w| (w[1] - w[0]) / h).collect();
        MarginalValueCurve::new(slopes, *self.grid.last().expect("grid")).expect("finite values")
    }

    pub fn series(&self) -> ValueFunctionSeries {
        let curves: Vec<_> = (0..self.values.len()).map(|t| self.marginal_curve(t)).collect();
        ValueFunctionSeries::from_curves(&curves, self.period_hours).expect("consistent curves")
    }

    /// `V_t(e)` by linear interpolation.
    pub fn value_at(&self, t: usize, e: f64) -> f64 {
        interpolate(&self.values[t], self.grid[1] - self.grid[0], e)
    }
}

fn interpolate(values: &[f64], h: f64, e: f64) -> f64 {
    let n = values.len();
    let r = (e / h).clamp(0.0, (n - 1) as f64);
    let i = (r.floor() as usize).min(n - 2);
    let f = r - i as f64;
    values[i] * (1.0 - f) + values[i + 1] * f
}

pub fn oracle_dp(
    rtp: &[f64],
    params: &StorageParams,
    soc_grid_n: usize,
    action_grid_n: usize,
    soc0: f64,
) -> Result<OracleSolution> {
    if soc_grid_n < 2 || action_grid_n < 2 {
        return Err(Error::Domain("oracle grids need at least two points".into()));
    }
    let e_max = params.energy_mwh();
    if !(0.0..=e_max).contains(&soc0) {
        return Err(Error::Domain(format!("initial SoC {soc0} outside [0, {e_max}]")));
    }
    let h = e_max / (soc_grid_n - 1) as f64;
    let cap = params.energy_per_period();
    if h > params.max_soc_rise() || h > params.max_soc_drop() {
        warn!("oracle SoC spacing {h} is coarser than one period of power; results will be rough");
    }
    let (eta_b, eta_p, c) = (params.eta_charge(), params.eta_discharge(), params.marginal_cost());
    let grid: Vec<f64> = (0..soc_grid_n).map(|i| e_max * i as f64 / (soc_grid_n - 1) as f64).collect();
    let levels: Vec<f64> = (1..action_grid_n).map(|j| cap * j as f64 / (action_grid_n - 1) as f64).collect();
    let slack = 1e-12 * e_max;

    let mut values = vec![vec![0.0; soc_grid_n]];
    for &price in rtp.iter().rev() {
        let next = values.last().expect("terminal");
        let mut cur = Vec::with_capacity(soc_grid_n);
        for &e in &grid {
            let mut best = interpolate(next, h, e);
            for &b in &levels {
                let to = e + b * eta_b;
                if to > e_max + slack {
                    break;
                }
                best = best.max(-price * b + interpolate(next, h, to));
            }
            let fill = (e_max - e) / eta_b;
            if fill <= cap {
                best = best.max(-price * fill + next[soc_grid_n - 1]);
            }
            if price >= 0.0 {
                for &p in &levels {
                    let to = e - p / eta_p;
                    if to < -slack {
                        break;
                    }
                    best = best.max((price - c) * p + interpolate(next, h, to));
                }
                let drain = e * eta_p;
                if drain <= cap {
                    best = best.max((price - c) * drain + next[0]);
                }
            }
            cur.push(best);
        }
        values.push(cur);
    }
    values.reverse();
    let optimal_profit = interpolate(&values[0], h, soc0);
    Ok(OracleSolution { optimal_profit, grid, values, period_hours: params.period_hours() })
}

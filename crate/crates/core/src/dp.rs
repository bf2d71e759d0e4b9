//! Hindsight-optimal opportunity value functions by backward recursion.
//!
//! `V_{t-1}(e) = max λ_t(p−b) − c·p + V_t(e')` over the one-period feasible set.
//! With `V_t` concave and piecewise linear, the maximization is a max-plus
//! convolution of `V_t` with a two-piece concave reward, and the result's
//! slopes are the merge of both slope sequences sorted in decreasing order:
//! the charge piece (length `η^b·P̄`, slope `λ/η^b`) and, for `λ ≥ 0`, the
//! discharge piece (length `P̄/η^p`, slope `(λ−c)·η^p`). The SoC domain
//! `[0, E]` is then a fixed window of the merged sequence. [`SlopeProfile`]
//! carries that exact representation; [`ValueFunctionSeries::curve`]
//! projects it onto equal segments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::controller::{self, ControlState};
use crate::curve::{MarginalValue, MarginalValueCurve};
use crate::error::{Error, Result};
use crate::prices::PriceSeries;
use crate::storage::StorageParams;

pub mod oracle;

pub use oracle::{oracle_dp, OracleSolution};

/// Segment count of the generated curves (0.001 MWh on a 1 MWh asset).
pub const DEFAULT_SEGMENTS: usize = 1001;

const VALUES_MAGIC: &[u8; 8] = b"VFARBVF1";

/// Non-increasing piecewise-constant marginal value with arbitrary breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeProfile {
    /// Right end of each piece; the last equals the capacity.
    ends: Vec<f64>,
    slopes: Vec<f64>,
}

impl SlopeProfile {
    pub fn flat(capacity: f64, value: f64) -> Self {
        SlopeProfile { ends: vec![capacity], slopes: vec![value] }
    }

    /// Exact piecewise form of an equal-segment curve, with equal neighbours fused.
    pub fn from_curve(curve: &MarginalValueCurve) -> Self {
        let k = curve.num_segments();
        let cap = curve.capacity();
        let mut out = SlopeProfile { ends: Vec::new(), slopes: Vec::new() };
        for (i, &v) in curve.values().iter().enumerate() {
            let end = if i + 1 == k { cap } else { cap * (i + 1) as f64 / k as f64 };
            out.push(end, v);
        }
        out
    }

    fn push(&mut self, end: f64, slope: f64) {
        if self.slopes.last() == Some(&slope) {
            *self.ends.last_mut().expect("non-empty") = end;
        } else {
            self.ends.push(end);
            self.slopes.push(slope);
        }
    }

    pub fn capacity(&self) -> f64 {
        *self.ends.last().expect("profile has at least one piece")
    }

    pub fn num_pieces(&self) -> usize {
        self.slopes.len()
    }

    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let starts = std::iter::once(0.0).chain(self.ends.iter().copied());
        starts.zip(self.ends.iter().copied()).zip(self.slopes.iter().copied()).map(|((a, b), s)| (a, b, s))
    }

    pub fn max_slope(&self) -> f64 {
        self.slopes[0]
    }

    pub fn min_slope(&self) -> f64 {
        *self.slopes.last().expect("non-empty")
    }

    /// One step of the backward recursion: the marginal value at the start of
    /// a period priced at `price`, given `self` at its end.
    pub fn backward(&self, price: f64, params: &StorageParams) -> SlopeProfile {
        let cap = self.capacity();
        let rise = params.max_soc_rise();
        let mut inserts = Vec::with_capacity(2);
        inserts.push((rise, params.charge_threshold(price)));
        if let Some(theta_d) = params.discharge_threshold(price) {
            inserts.push((params.max_soc_drop(), theta_d));
        }
        // Charge threshold never sits below the discharge threshold.
        inserts.sort_by(|a, b| b.1.total_cmp(&a.1));

        let mut merged = Vec::with_capacity(self.slopes.len() + inserts.len());
        let mut pending = inserts.into_iter().peekable();
        for (a, b, s) in self.pieces() {
            while let Some(&(len, theta)) = pending.peek() {
                if theta > s {
                    merged.push((len, theta));
                    pending.next();
                } else {
                    break;
                }
            }
            merged.push((b - a, s));
        }
        merged.extend(pending);

        // The merged function lives on [-rise, E + drop]; keep [0, E].
        let tiny = 1e-13 * cap;
        let mut out = SlopeProfile { ends: Vec::with_capacity(merged.len()), slopes: Vec::with_capacity(merged.len()) };
        let mut pos = -rise;
        for (len, s) in merged {
            let lo = pos.max(0.0);
            let hi = (pos + len).min(cap);
            pos += len;
            if hi - lo > tiny {
                out.push(hi, s);
            }
            if pos >= cap {
                break;
            }
        }
        if out.slopes.is_empty() {
            // Only reachable when E is below the numerical floor.
            out.push(cap, self.min_slope());
        }
        *out.ends.last_mut().expect("non-empty") = cap;
        out
    }

    /// Equal-segment curve whose segment values are the exact averages of
    /// `self` over each segment.
    pub fn project(&self, segments: usize) -> MarginalValueCurve {
        let cap = self.capacity();
        let k = segments.max(1);
        let width = cap / k as f64;
        let mut values = Vec::with_capacity(k);
        let mut piece = 0;
        for j in 0..k {
            let lo = cap * j as f64 / k as f64;
            let hi = if j + 1 == k { cap } else { cap * (j + 1) as f64 / k as f64 };
            while piece + 1 < self.ends.len() && self.ends[piece] <= lo {
                piece += 1;
            }
            if self.ends[piece] >= hi {
                values.push(self.slopes[piece]);
                continue;
            }
            let mut acc = 0.0;
            let mut i = piece;
            let mut start = lo;
            while start < hi && i < self.ends.len() {
                let end = self.ends[i].min(hi);
                acc += self.slopes[i] * (end - start);
                start = end;
                i += 1;
            }
            values.push(acc / width);
        }
        MarginalValueCurve::new(values, cap).expect("finite slopes and positive capacity")
    }

    /// `∫_0^e` of the marginal value.
    pub fn integral_to(&self, e: f64) -> f64 {
        let mut acc = 0.0;
        for (a, b, s) in self.pieces() {
            if e <= a {
                break;
            }
            acc += s * (b.min(e) - a);
        }
        acc
    }

    fn tol(&self) -> f64 {
        1e-12 * self.capacity()
    }
}

impl MarginalValue for SlopeProfile {
    fn capacity(&self) -> f64 {
        SlopeProfile::capacity(self)
    }

    fn climb(&self, from: f64, limit: f64, threshold: f64) -> f64 {
        let tol = self.tol();
        let mut i = self.ends.partition_point(|&x| x <= from + tol);
        let mut reach = from;
        while reach < limit && i < self.slopes.len() && self.slopes[i] > threshold {
            reach = self.ends[i].min(limit);
            i += 1;
        }
        reach
    }

    fn descend(&self, from: f64, limit: f64, threshold: f64) -> f64 {
        let tol = self.tol();
        if from <= tol {
            return from;
        }
        let mut i = self.ends.partition_point(|&x| x < from - tol).min(self.slopes.len() - 1);
        let mut reach = from;
        loop {
            if reach <= limit || self.slopes[i] >= threshold {
                break;
            }
            let start = if i == 0 { 0.0 } else { self.ends[i - 1] };
            reach = start.max(limit);
            if i == 0 {
                break;
            }
            i -= 1;
        }
        reach
    }
}

/// Marginal value curves for the end of every period `t = 0..=T` of a price
/// history; entry `t` is the value of SoC held at the end of period `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctionSeries {
    capacity: f64,
    period_hours: f64,
    segments: usize,
    profiles: Vec<SlopeProfile>,
}

impl ValueFunctionSeries {
    /// Backward recursion from a zero terminal value over `rtp`.
    pub fn generate(rtp: &[f64], params: &StorageParams, segments: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::Domain("segment count must be positive".into()));
        }
        if let Some(i) = rtp.iter().position(|p| !p.is_finite()) {
            return Err(Error::Input(format!("price at period {i} is not finite")));
        }
        let mut profiles = Vec::with_capacity(rtp.len() + 1);
        profiles.push(SlopeProfile::flat(params.energy_mwh(), 0.0));
        for &price in rtp.iter().rev() {
            let next = profiles.last().expect("terminal pushed").backward(price, params);
            profiles.push(next);
        }
        profiles.reverse();
        Ok(ValueFunctionSeries {
            capacity: params.energy_mwh(),
            period_hours: params.period_hours(),
            segments,
            profiles,
        })
    }

    /// Wraps explicit equal-segment curves; all must share a capacity and segment count.
    pub fn from_curves(curves: &[MarginalValueCurve], period_hours: f64) -> Result<Self> {
        let first = curves.first().ok_or_else(|| Error::Input("no curves supplied".into()))?;
        let (capacity, segments) = (first.capacity(), first.num_segments());
        if curves.iter().any(|c| c.num_segments() != segments || c.capacity() != capacity) {
            return Err(Error::Input("curves disagree on capacity or segment count".into()));
        }
        Ok(ValueFunctionSeries {
            capacity,
            period_hours,
            segments,
            profiles: curves.iter().map(SlopeProfile::from_curve).collect(),
        })
    }

    /// Number of periods `T`; there are `T + 1` curves.
    pub fn horizon(&self) -> usize {
        self.profiles.len() - 1
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn period_hours(&self) -> f64 {
        self.period_hours
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn profile(&self, t: usize) -> &SlopeProfile {
        &self.profiles[t]
    }

    pub fn profiles(&self) -> &[SlopeProfile] {
        &self.profiles
    }

    pub fn curve(&self, t: usize) -> MarginalValueCurve {
        self.profiles[t].project(self.segments)
    }

    /// Training label for period `t`: the curve at its end, re-binned to `target` segments.
    pub fn label(&self, t: usize, target: usize) -> Result<MarginalValueCurve> {
        self.curve(t).downsample(target)
    }

    /// Writes the binary layout documented in the README: magic, header, then
    /// `(T+1)·K` little-endian `f64` values row by row.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(VALUES_MAGIC)?;
        put(&self.capacity.to_le_bytes())?;
        put(&(self.segments as u64).to_le_bytes())?;
        put(&(self.horizon() as u64).to_le_bytes())?;
        put(&self.period_hours.to_le_bytes())?;
        for t in 0..self.len() {
            for v in self.curve(t).values() {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != VALUES_MAGIC {
            return Err(Error::Input(format!("{}: not a value-function file", path.display())));
        }
        let mut word = [0u8; 8];
        let mut next = |what: &str| -> Result<[u8; 8]> {
            r.read_exact(&mut word)
                .map_err(|e| Error::Input(format!("{}: truncated while reading {what}: {e}", path.display())))?;
            Ok(word)
        };
        let capacity = f64::from_le_bytes(next("capacity")?);
        let segments = u64::from_le_bytes(next("segment count")?) as usize;
        let horizon = u64::from_le_bytes(next("horizon")?) as usize;
        let period_hours = f64::from_le_bytes(next("period length")?);
        if !(capacity.is_finite() && capacity > 0.0 && period_hours.is_finite() && period_hours > 0.0) || segments == 0
        {
            return Err(Error::Input(format!("{}: invalid header", path.display())));
        }
        let mut profiles = Vec::with_capacity(horizon + 1);
        let mut row = vec![0.0; segments];
        for t in 0..=horizon {
            for v in row.iter_mut() {
                *v = f64::from_le_bytes(next(&format!("row {t}"))?);
            }
            let curve = MarginalValueCurve::new(row.clone(), capacity)
                .map_err(|e| Error::Input(format!("{}: row {t}: {e}", path.display())))?;
            profiles.push(SlopeProfile::from_curve(&curve));
        }
        Ok(ValueFunctionSeries { capacity, period_hours, segments, profiles })
    }
}

/// Backward recursion over a loaded price series.
pub fn generate_series(prices: &PriceSeries, params: &StorageParams, segments: usize) -> Result<ValueFunctionSeries> {
    if prices.is_empty() {
        return Err(Error::Input("price series is empty".into()));
    }
    check_period(prices, params)?;
    ValueFunctionSeries::generate(prices.rtp(), params, segments)
}

pub(crate) fn check_period(prices: &PriceSeries, params: &StorageParams) -> Result<()> {
    if (prices.period_hours() - params.period_hours()).abs() > 1e-9 {
        return Err(Error::Input(format!(
            "price series has {}-hour periods but the storage model expects {}",
            prices.period_hours(),
            params.period_hours()
        )));
    }
    Ok(())
}

/// One backward step on an equal-segment curve, re-projected onto the same segments.
pub fn backward_update(next: &MarginalValueCurve, price: f64, params: &StorageParams) -> Result<MarginalValueCurve> {
    if !price.is_finite() {
        return Err(Error::Precondition(format!("price {price} is not finite")));
    }
    if (next.capacity() - params.energy_mwh()).abs() > 1e-12 * params.energy_mwh() {
        return Err(Error::Precondition("curve capacity differs from the storage capacity".into()));
    }
    let scale = next.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if !next.is_non_increasing(1e-12 * scale) {
        return Err(Error::Precondition("next-period curve is not non-increasing".into()));
    }
    Ok(SlopeProfile::from_curve(next).backward(price, params).project(next.num_segments()))
}

/// Dispatch trajectory that is optimal with full knowledge of `rtp`.
pub fn perfect_foresight(rtp: &[f64], params: &StorageParams, soc0: f64) -> Result<ControlState> {
    let series = ValueFunctionSeries::generate(rtp, params, 1)?;
    controller::dispatch_along(rtp, params, soc0, |t| series.profile(t + 1))
}

/// Cumulative revenue of the hindsight-optimal dispatch from `soc0`.
pub fn perfect_foresight_profit(rtp: &[f64], params: &StorageParams, soc0: f64) -> Result<f64> {
    perfect_foresight(rtp, params, soc0).map(|s| s.profit)
}

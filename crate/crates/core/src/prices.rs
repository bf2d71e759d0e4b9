//! Real-time and day-ahead price ingestion, alignment, and a synthetic generator.
//!
//! Timestamps are naive market-local times on a uniform grid. Every real-time
//! period carries the 24 hourly day-ahead prices of its operating day.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::PriceSignal;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Longest run of missing real-time periods that is patched by carry-forward.
const MAX_GAP_MINUTES: i64 = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    zone: String,
    start: NaiveDateTime,
    period_minutes: u32,
    rtp: Vec<f64>,
    /// One row per calendar day from `start.date()` to the last period's date.
    dap: Vec<[f64; 24]>,
}

impl PriceSeries {
    pub fn new(
        zone: impl Into<String>,
        start: NaiveDateTime,
        period_minutes: u32,
        rtp: Vec<f64>,
        dap: Vec<[f64; 24]>,
    ) -> Result<Self> {
        if period_minutes == 0 || 60 % period_minutes != 0 {
            return Err(Error::Input(format!("period of {period_minutes} minutes does not divide an hour")));
        }
        if start.second() != 0 || start.nanosecond() != 0 || start.minute() % period_minutes != 0 {
            return Err(Error::Input(format!("start {start} is not on the {period_minutes}-minute grid")));
        }
        if let Some(i) = rtp.iter().position(|p| !p.is_finite()) {
            return Err(Error::Input(format!("real-time price at period {i} is not finite")));
        }
        if dap.iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Input("day-ahead prices contain non-finite values".into()));
        }
        let mut series = PriceSeries { zone: zone.into(), start, period_minutes, rtp, dap };
        let days = if series.rtp.is_empty() { 0 } else { series.day_index(series.rtp.len() - 1) + 1 };
        if series.dap.len() != days {
            return Err(Error::Input(format!(
                "series spans {days} days but {} day-ahead rows were given",
                series.dap.len()
            )));
        }
        series.zone = series.zone.trim().to_string();
        Ok(series)
    }

    pub fn zone(&self) -> &str {
        &self.zone
    }

    pub fn with_zone(mut self, zone: impl Into<String>) -> Self {
        self.zone = zone.into();
        self
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn period_minutes(&self) -> u32 {
        self.period_minutes
    }

    pub fn period_hours(&self) -> f64 {
        self.period_minutes as f64 / 60.0
    }

    pub fn periods_per_hour(&self) -> usize {
        (60 / self.period_minutes) as usize
    }

    pub fn len(&self) -> usize {
        self.rtp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rtp.is_empty()
    }

    pub fn rtp(&self) -> &[f64] {
        &self.rtp
    }

    pub fn dap_days(&self) -> &[[f64; 24]] {
        &self.dap
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.period_minutes as i64 * i as i64)
    }

    pub fn day_index(&self, i: usize) -> usize {
        (self.timestamp(i).date() - self.start.date()).num_days() as usize
    }

    pub fn hour(&self, i: usize) -> usize {
        self.timestamp(i).hour() as usize
    }

    pub fn dap_day(&self, i: usize) -> &[f64; 24] {
        &self.dap[self.day_index(i)]
    }

    pub fn dap_at(&self, i: usize) -> f64 {
        self.dap_day(i)[self.hour(i)]
    }

    pub fn signal(&self, i: usize) -> PriceSignal {
        PriceSignal { rtp: self.rtp[i], dap_day: *self.dap_day(i), timestamp: self.timestamp(i) }
    }

    /// Periods `from..to` as a standalone series.
    pub fn slice(&self, from: usize, to: usize) -> Result<PriceSeries> {
        if from > to || to > self.len() {
            return Err(Error::Domain(format!("slice {from}..{to} outside 0..{}", self.len())));
        }
        let dap =
            if from == to { Vec::new() } else { self.dap[self.day_index(from)..=self.day_index(to - 1)].to_vec() };
        PriceSeries::new(self.zone.clone(), self.timestamp(from), self.period_minutes, self.rtp[from..to].to_vec(), dap)
    }

    /// Splits after `days` whole days of periods counted from the start.
    pub fn split_days(&self, days: usize) -> Result<(PriceSeries, PriceSeries)> {
        let cut = (days * 24 * self.periods_per_hour()).min(self.len());
        Ok((self.slice(0, cut)?, self.slice(cut, self.len())?))
    }
}

/// Column mapping and filters for delimited price files. Both the real-time
/// and the day-ahead file are read with the same mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSchema {
    pub timestamp_column: String,
    pub price_column: String,
    /// `chrono` format string for the timestamp column.
    pub timestamp_format: String,
    /// When set together with `zone`, only rows whose column equals `zone` are kept.
    pub zone_column: Option<String>,
    pub zone: Option<String>,
    /// First operating day kept (inclusive).
    pub start: Option<NaiveDate>,
    /// First operating day dropped (exclusive end).
    pub end: Option<NaiveDate>,
    pub period_minutes: u32,
}

impl Default for PriceSchema {
    fn default() -> Self {
        PriceSchema {
            timestamp_column: "timestamp".into(),
            price_column: "price".into(),
            timestamp_format: TIMESTAMP_FORMAT.into(),
            zone_column: None,
            zone: None,
            start: None,
            end: None,
            period_minutes: 5,
        }
    }
}

impl PriceSchema {
    fn keeps(&self, ts: &NaiveDateTime) -> bool {
        let d = ts.date();
        self.start.is_none_or(|s| d >= s) && self.end.is_none_or(|e| d < e)
    }
}

struct Row {
    ts: NaiveDateTime,
    price: f64,
    line: u64,
}

fn read_rows(path: &Path, schema: &PriceSchema) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path).map_err(|e| {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Input(format!("{}: {other:?}", path.display())),
        }
    })?;
    let headers = reader.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("{}: no column named {name:?}", path.display())))
    };
    let ts_col = column(&schema.timestamp_column)?;
    let price_col = column(&schema.price_column)?;
    let zone_filter = match (&schema.zone_column, &schema.zone) {
        (Some(c), Some(z)) => Some((column(c)?, z.as_str())),
        _ => None,
    };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if let Some((zc, zone)) = zone_filter {
            if record.get(zc) != Some(zone) {
                continue;
            }
        }
        let field = |i: usize| record.get(i).ok_or_else(|| Error::parse(path, line, "missing field"));
        let raw_ts = field(ts_col)?;
        let ts = NaiveDateTime::parse_from_str(raw_ts, &schema.timestamp_format)
            .map_err(|e| Error::parse(path, line, format!("bad timestamp {raw_ts:?}: {e}")))?;
        if !schema.keeps(&ts) {
            continue;
        }
        let raw_price = field(price_col)?;
        let price: f64 = raw_price.parse().map_err(|_| Error::parse(path, line, format!("bad price {raw_price:?}")))?;
        if !price.is_finite() {
            return Err(Error::parse(path, line, format!("non-finite price {raw_price:?}")));
        }
        rows.push(Row { ts, price, line });
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no price rows in the requested range", path.display())));
    }
    Ok(rows)
}

/// Real-time prices on a uniform grid, before day-ahead alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RtpTrace {
    pub start: NaiveDateTime,
    pub period_minutes: u32,
    pub values: Vec<f64>,
    /// Periods patched by carry-forward.
    pub filled: usize,
}

pub fn load_rtp(path: impl AsRef<Path>, schema: &PriceSchema) -> Result<RtpTrace> {
    let path = path.as_ref();
    let period = schema.period_minutes;
    if period == 0 || 60 % period != 0 {
        return Err(Error::Input(format!("period of {period} minutes does not divide an hour")));
    }
    let rows = read_rows(path, schema)?;
    let step = Duration::minutes(period as i64);
    let first = &rows[0];
    if first.ts.second() != 0 || first.ts.minute() % period != 0 {
        return Err(Error::parse(path, first.line, format!("{} is not on the {period}-minute grid", first.ts)));
    }

    let mut values = vec![first.price];
    let mut filled = 0;
    for pair in rows.windows(2) {
        let (prev, row) = (&pair[0], &pair[1]);
        let delta = row.ts - prev.ts;
        if delta == Duration::zero() {
            return Err(Error::parse(path, row.line, format!("duplicate timestamp {}", row.ts)));
        }
        if delta < Duration::zero() {
            return Err(Error::parse(path, row.line, format!("timestamp {} goes backwards", row.ts)));
        }
        let minutes = delta.num_minutes();
        if delta != Duration::minutes(minutes) || minutes % period as i64 != 0 {
            return Err(Error::parse(path, row.line, format!("{} is off the {period}-minute grid", row.ts)));
        }
        let missing = (minutes / period as i64 - 1) as usize;
        if missing > 0 {
            if minutes - step.num_minutes() > MAX_GAP_MINUTES {
                return Err(Error::parse(
                    path,
                    row.line,
                    format!("gap of {missing} periods between {} and {}", prev.ts, row.ts),
                ));
            }
            warn!("{}: filling {missing} missing period(s) after {} by carry-forward", path.display(), prev.ts);
            values.extend(std::iter::repeat_n(prev.price, missing));
            filled += missing;
        }
        values.push(row.price);
    }
    Ok(RtpTrace { start: first.ts, period_minutes: period, values, filled })
}

pub fn load_dap(path: impl AsRef<Path>, schema: &PriceSchema) -> Result<BTreeMap<NaiveDate, [f64; 24]>> {
    let path = path.as_ref();
    let rows = read_rows(path, schema)?;
    let mut days: BTreeMap<NaiveDate, [Option<f64>; 24]> = BTreeMap::new();
    for row in rows {
        if row.ts.minute() != 0 || row.ts.second() != 0 {
            return Err(Error::parse(path, row.line, format!("{} is not on the hour", row.ts)));
        }
        let slot = &mut days.entry(row.ts.date()).or_insert([None; 24])[row.ts.hour() as usize];
        if slot.is_some() {
            return Err(Error::parse(path, row.line, format!("duplicate timestamp {}", row.ts)));
        }
        *slot = Some(row.price);
    }
    let mut complete = BTreeMap::new();
    for (date, hours) in days {
        if hours.iter().all(Option::is_some) {
            complete.insert(date, hours.map(|h| h.expect("checked")));
        }
    }
    Ok(complete)
}

/// Loads and aligns real-time and day-ahead files.
pub fn load_prices(
    rtp_path: impl AsRef<Path>,
    dap_path: impl AsRef<Path>,
    schema: &PriceSchema,
) -> Result<PriceSeries> {
    let rtp_path = rtp_path.as_ref();
    let trace = load_rtp(rtp_path, schema)?;
    let dap = load_dap(dap_path.as_ref(), schema)?;
    let first = trace.start.date();
    let last = (trace.start + Duration::minutes(trace.period_minutes as i64 * (trace.values.len() as i64 - 1))).date();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for date in first.iter_days().take_while(|d| *d <= last) {
        match dap.get(&date) {
            Some(r) => rows.push(*r),
            None => missing.push(date.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "{}: no complete day-ahead prices for {}",
            dap_path.as_ref().display(),
            missing.join(", ")
        )));
    }
    let zone = schema
        .zone
        .clone()
        .unwrap_or_else(|| rtp_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    PriceSeries::new(zone, trace.start, trace.period_minutes, trace.values, rows)
}

/// Writes both files in the default schema.
pub fn write_prices(series: &PriceSeries, rtp_path: impl AsRef<Path>, dap_path: impl AsRef<Path>) -> Result<()> {
    fn open(path: &Path) -> Result<csv::Writer<std::fs::File>> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(csv::Writer::from_writer(file))
    }
    fn write(w: &mut csv::Writer<std::fs::File>, path: &Path, ts: NaiveDateTime, price: f64) -> Result<()> {
        w.write_record([ts.format(TIMESTAMP_FORMAT).to_string(), price.to_string()])
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
    let (rtp_path, dap_path) = (rtp_path.as_ref(), dap_path.as_ref());
    let mut w = open(rtp_path)?;
    w.write_record(["timestamp", "price"]).map_err(|e| Error::Input(e.to_string()))?;
    for (i, &p) in series.rtp.iter().enumerate() {
        write(&mut w, rtp_path, series.timestamp(i), p)?;
    }
    w.flush().map_err(|e| Error::io(rtp_path, e))?;

    let mut w = open(dap_path)?;
    w.write_record(["timestamp", "price"]).map_err(|e| Error::Input(e.to_string()))?;
    let midnight = series.start.date().and_hms_opt(0, 0, 0).expect("valid midnight");
    for (d, day) in series.dap.iter().enumerate() {
        for (h, &p) in day.iter().enumerate() {
            write(&mut w, dap_path, midnight + Duration::hours((d * 24 + h) as i64), p)?;
        }
    }
    w.flush().map_err(|e| Error::io(dap_path, e))
}

/// Shape of the synthetic market. Day-ahead prices follow a daily sinusoid
/// around a per-day level; real-time prices add bounded noise to the
/// day-ahead hour, plus rare exponential spikes and negative dips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthProfile {
    pub base: f64,
    pub amplitude: f64,
    /// Day-to-day level variation as a fraction of `base`, uniform.
    pub level_spread: f64,
    /// Half-width of the uniform day-ahead noise.
    pub dap_noise: f64,
    /// Std-dev of the real-time noise, clipped at three deviations.
    pub rtp_noise: f64,
    pub spike_prob: f64,
    pub spike_mean: f64,
    pub negative_prob: f64,
    pub negative_depth: f64,
    pub start: NaiveDate,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            base: 35.0,
            amplitude: 12.0,
            level_spread: 0.25,
            dap_noise: 3.0,
            rtp_noise: 3.0,
            spike_prob: 0.005,
            spike_mean: 100.0,
            negative_prob: 0.005,
            negative_depth: 20.0,
            start: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
        }
    }
}

impl SynthProfile {
    /// Highest price reachable without a spike.
    pub fn envelope_max(&self) -> f64 {
        self.base * (1.0 + self.level_spread) + self.amplitude + self.dap_noise + 3.0 * self.rtp_noise
    }

    /// Lowest price reachable without a negative dip.
    pub fn envelope_min(&self) -> f64 {
        self.base * (1.0 - self.level_spread) - self.amplitude - self.dap_noise - 3.0 * self.rtp_noise
    }

    fn shape(hour: f64) -> f64 {
        -(2.0 * std::f64::consts::PI * (hour - 4.0) / 24.0).cos()
    }
}

pub fn synth_prices(seed: u64, days: usize, period_minutes: u32, profile: &SynthProfile) -> Result<PriceSeries> {
    if days == 0 {
        return Err(Error::Domain("synthetic series needs at least one day".into()));
    }
    if period_minutes == 0 || 60 % period_minutes != 0 {
        return Err(Error::Input(format!("period of {period_minutes} minutes does not divide an hour")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_hour = (60 / period_minutes) as usize;
    let mut rtp = Vec::with_capacity(days * 24 * per_hour);
    let mut dap = Vec::with_capacity(days);
    for _ in 0..days {
        let level = profile.base * (1.0 + profile.level_spread * rng.random_range(-1.0..=1.0));
        let mut day = [0.0; 24];
        for (h, slot) in day.iter_mut().enumerate() {
            *slot = level
                + profile.amplitude * SynthProfile::shape(h as f64)
                + profile.dap_noise * rng.random_range(-1.0..=1.0);
        }
        for &hourly in &day {
            for _ in 0..per_hour {
                let z: f64 = StandardNormal.sample(&mut rng);
                let mut price = hourly + profile.rtp_noise * z.clamp(-3.0, 3.0);
                let spike: f64 = Exp1.sample(&mut rng);
                if rng.random::<f64>() < profile.spike_prob {
                    price += profile.spike_mean * spike;
                }
                let dip: f64 = rng.random();
                if rng.random::<f64>() < profile.negative_prob {
                    price = -profile.negative_depth * dip;
                }
                rtp.push(price);
            }
        }
        dap.push(day);
    }
    let start = profile.start.and_hms_opt(0, 0, 0).expect("valid midnight");
    PriceSeries::new("SYNTH", start, period_minutes, rtp, dap)
}

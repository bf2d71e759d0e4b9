//! Predictor vectors built from price history.
//!
//! The vector for period `t` is `[λ_{t−1}, …, λ_{t−W}]` followed, when
//! enabled, by the 24 day-ahead prices of `t`'s operating day.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prices::PriceSeries;

/// Standard deviations below this are treated as zero and replaced by one.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub n_rtp_lags: usize,
    pub n_dap: usize,
    pub period_minutes: u32,
    pub normalization: Option<Normalization>,
}

impl FeatureSpec {
    pub fn new(n_rtp_lags: usize, n_dap: usize, period_minutes: u32) -> Result<Self> {
        if n_rtp_lags == 0 {
            return Err(Error::InvalidParams("at least one real-time lag is required".into()));
        }
        if n_dap != 0 && n_dap != 24 {
            return Err(Error::InvalidParams(format!("day-ahead feature count must be 0 or 24, got {n_dap}")));
        }
        Ok(FeatureSpec { n_rtp_lags, n_dap, period_minutes, normalization: None })
    }

    pub fn len(&self) -> usize {
        self.n_rtp_lags + self.n_dap
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First period with a full look-back window.
    pub fn first_valid(&self) -> usize {
        self.n_rtp_lags
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.mean.len() != self.len() || norm.std.len() != self.len() {
            return Err(Error::InvalidParams(format!(
                "normalization covers {} features, spec has {}",
                norm.mean.len(),
                self.len()
            )));
        }
        self.normalization = Some(norm);
        Ok(self)
    }

    /// Unnormalized features for period `t`, appended to `out`.
    pub fn raw_into(&self, series: &PriceSeries, t: usize, out: &mut Vec<f64>) -> Result<()> {
        if series.period_minutes() != self.period_minutes {
            return Err(Error::Input(format!(
                "features expect {}-minute periods, series has {}",
                self.period_minutes,
                series.period_minutes()
            )));
        }
        if t < self.n_rtp_lags || t >= series.len() {
            return Err(Error::Domain(format!(
                "period {t} has no full feature window; valid periods are {}..{}",
                self.first_valid(),
                series.len()
            )));
        }
        let rtp = series.rtp();
        out.extend((1..=self.n_rtp_lags).map(|lag| rtp[t - lag]));
        if self.n_dap == 24 {
            out.extend_from_slice(series.dap_day(t));
        }
        Ok(())
    }
}

/// Normalized (when statistics are present) feature vector for period `t`.
pub fn build_features(series: &PriceSeries, t: usize, spec: &FeatureSpec) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(spec.len());
    spec.raw_into(series, t, &mut x)?;
    if let Some(norm) = &spec.normalization {
        norm.apply(&mut x);
    }
    Ok(x)
}

/// Population mean and standard deviation of each feature column.
pub fn fit_normalization<R: AsRef<[f64]>>(rows: &[R]) -> Result<Normalization> {
    if rows.len() < 2 {
        return Err(Error::Input(format!("need at least 2 samples to fit normalization, got {}", rows.len())));
    }
    let dim = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != dim) {
        return Err(Error::Input("feature rows differ in length".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s < STD_FLOOR { 1.0 } else { s }).collect();
    Ok(Normalization { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prices::{synth_prices, SynthProfile};

    fn series() -> PriceSeries {
        synth_prices(11, 2, 5, &SynthProfile::default()).unwrap()
    }

    #[test]
    fn lengths_match_settings() {
        let s = series();
        let one = FeatureSpec::new(36, 0, 5).unwrap();
        assert_eq!(build_features(&s, 36, &one).unwrap().len(), 36);
        let three = FeatureSpec::new(36, 24, 5).unwrap();
        assert_eq!(build_features(&s, 300, &three).unwrap().len(), 60);
        let two = FeatureSpec::new(288, 24, 5).unwrap();
        assert_eq!(build_features(&s, 288, &two).unwrap().len(), 312);
    }

    #[test]
    fn lag_order_and_day_ahead() {
        let s = series();
        let spec = FeatureSpec::new(3, 24, 5).unwrap();
        let x = build_features(&s, 400, &spec).unwrap();
        assert_eq!(&x[..3], &[s.rtp()[399], s.rtp()[398], s.rtp()[397]]);
        assert_eq!(&x[3..], s.dap_day(400));
    }

    #[test]
    fn short_history_names_first_valid() {
        let s = series();
        let spec = FeatureSpec::new(36, 0, 5).unwrap();
        let err = build_features(&s, 10, &spec).unwrap_err().to_string();
        assert!(err.contains("36.."), "{err}");
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(FeatureSpec::new(0, 0, 5).is_err());
        assert!(FeatureSpec::new(36, 12, 5).is_err());
        let s = series();
        let hourly = FeatureSpec::new(3, 0, 60).unwrap();
        assert!(build_features(&s, 10, &hourly).is_err());
    }

    #[test]
    fn causal_in_current_price() {
        let s = series();
        let spec = FeatureSpec::new(36, 24, 5).unwrap();
        let before = build_features(&s, 200, &spec).unwrap();
        let mut rtp = s.rtp().to_vec();
        for p in &mut rtp[200..] {
            *p += 1000.0;
        }
        let bumped = PriceSeries::new(s.zone(), s.start(), 5, rtp, s.dap_days().to_vec()).unwrap();
        assert_eq!(build_features(&bumped, 200, &spec).unwrap(), before);
    }

    #[test]
    fn normalization_examples() {
        let n = fit_normalization(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(n.mean, vec![1.0]);
        assert_eq!(n.std, vec![1.0]);

        let flat = fit_normalization(&[vec![5.0, 5.0], vec![5.0, 5.0], vec![5.0, 5.0]]).unwrap();
        assert_eq!(flat.std, vec![1.0, 1.0]);
        let mut x = vec![5.0, 5.0];
        flat.apply(&mut x);
        assert_eq!(x, vec![0.0, 0.0]);

        assert!(fit_normalization(&[vec![1.0]]).is_err());
    }

    #[test]
    fn normalization_ignores_order() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.5]).collect();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(3, 11);
        let a = fit_normalization(&rows).unwrap();
        let b = fit_normalization(&shuffled).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean).chain(a.std.iter().zip(&b.std)) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let s = PriceSeries::new("flat", s_start(), 5, vec![42.0; 400], vec![[42.0; 24]; 2]).unwrap();
        let spec = FeatureSpec::new(36, 24, 5).unwrap();
        let rows: Vec<Vec<f64>> = (36..400).map(|t| build_features(&s, t, &spec).unwrap()).collect();
        let spec = spec.with_normalization(fit_normalization(&rows).unwrap()).unwrap();
        assert!(build_features(&s, 100, &spec).unwrap().iter().all(|&v| v == 0.0));
    }

    fn s_start() -> chrono::NaiveDateTime {
        chrono::NaiveDate::from_ymd_opt(2019, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }
}

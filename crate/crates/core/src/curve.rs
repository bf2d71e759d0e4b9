//! Piecewise-constant marginal value curves over equal-width SoC segments.
//!
//! A curve stores `v(e)`, the derivative of the piecewise-linear opportunity
//! value `V(e)`. Segment `k` covers `[k·E/K, (k+1)·E/K]`.

use crate::error::{Error, Result};

/// Relative slack for snapping a SoC onto a segment boundary.
const SNAP_TOL: f64 = 1e-9;

/// Marginal values that a dispatch rule can walk along.
///
/// Implementations are assumed non-increasing in SoC; the reach queries stop
/// at the first stretch that fails the threshold.
pub trait MarginalValue {
    fn capacity(&self) -> f64;

    /// Largest SoC in `[from, limit]` such that the marginal value is strictly
    /// above `threshold` everywhere on `(from, result)`.
    fn climb(&self, from: f64, limit: f64, threshold: f64) -> f64;

    /// Smallest SoC in `[limit, from]` such that the marginal value is strictly
    /// below `threshold` everywhere on `(result, from)`.
    fn descend(&self, from: f64, limit: f64, threshold: f64) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalValueCurve {
    values: Vec<f64>,
    capacity: f64,
}

impl MarginalValueCurve {
    pub fn new(values: Vec<f64>, capacity: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("a curve needs at least one segment".into()));
        }
        if !(capacity.is_finite() && capacity > 0.0) {
            return Err(Error::Domain(format!("capacity must be positive, got {capacity}")));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("segment {k} holds a non-finite value")));
        }
        Ok(MarginalValueCurve { values, capacity })
    }

    pub fn constant(segments: usize, capacity: f64, value: f64) -> Result<Self> {
        Self::new(vec![value; segments], capacity)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn num_segments(&self) -> usize {
        self.values.len()
    }

    pub fn segment_width(&self) -> f64 {
        self.capacity / self.values.len() as f64
    }

    /// Right edge of segment `k`.
    fn edge(&self, k: usize) -> f64 {
        if k >= self.values.len() {
            self.capacity
        } else {
            self.capacity * k as f64 / self.values.len() as f64
        }
    }

    fn check_soc(&self, e: f64) -> Result<()> {
        let slack = SNAP_TOL * self.capacity;
        if e.is_finite() && e >= -slack && e <= self.capacity + slack {
            Ok(())
        } else {
            Err(Error::Domain(format!("SoC {e} outside [0, {}]", self.capacity)))
        }
    }

    /// Position of `e` in segment units, snapped to an integer when within tolerance.
    fn position(&self, e: f64) -> (f64, bool) {
        let r = e / self.segment_width();
        let k = r.round();
        if (r - k).abs() <= SNAP_TOL * self.values.len().max(1) as f64 {
            (k, true)
        } else {
            (r, false)
        }
    }

    /// Segment directly above `e` (the one a charge enters first).
    fn segment_above(&self, e: f64) -> usize {
        let (r, _) = self.position(e);
        (r.floor().max(0.0) as usize).min(self.values.len())
    }

    /// Segment directly below `e` (the one a discharge drains first), `None` at zero.
    fn segment_below(&self, e: f64) -> Option<usize> {
        let (r, on_edge) = self.position(e);
        let k = if on_edge { r as i64 - 1 } else { r.floor() as i64 };
        (k >= 0).then(|| (k as usize).min(self.values.len() - 1))
    }

    /// Value of the segment containing `e`; on a shared edge the lower segment wins.
    pub fn eval_marginal(&self, e: f64) -> Result<f64> {
        self.check_soc(e)?;
        Ok(self.values[self.segment_below(e).unwrap_or(0)])
    }

    /// `∫_0^e v`.
    fn cumulative(&self, e: f64) -> f64 {
        let w = self.segment_width();
        let (r, on_edge) = self.position(e);
        let full = (r.floor().max(0.0) as usize).min(self.values.len());
        let mut acc: f64 = self.values[..full].iter().sum::<f64>() * w;
        if !on_edge && full < self.values.len() {
            acc += self.values[full] * (e - self.edge(full));
        }
        acc
    }

    /// Signed `∫_{from}^{to} v(e) de`.
    pub fn integrate(&self, from: f64, to: f64) -> Result<f64> {
        self.check_soc(from)?;
        self.check_soc(to)?;
        Ok(self.cumulative(to) - self.cumulative(from))
    }

    /// Re-bins onto `target` equal segments using width-weighted means, which
    /// keeps the integral over `[0, E]` intact.
    pub fn downsample(&self, target: usize) -> Result<Self> {
        let k = self.values.len();
        if target == 0 {
            return Err(Error::Domain("target segment count must be positive".into()));
        }
        if target > k {
            return Err(Error::Domain(format!("cannot down-sample {k} segments to {target}")));
        }
        // In units of E/(k·target), source i spans [i·target, (i+1)·target) and
        // target j spans [j·k, (j+1)·k), so overlaps are exact integers.
        let mut out = Vec::with_capacity(target);
        for j in 0..target {
            let lo = j * k;
            let hi = lo + k;
            let mut acc = 0.0;
            for i in lo / target..=((hi - 1) / target).min(k - 1) {
                let s_lo = i * target;
                let s_hi = s_lo + target;
                let overlap = s_hi.min(hi).saturating_sub(s_lo.max(lo));
                acc += self.values[i] * overlap as f64;
            }
            out.push(acc / k as f64);
        }
        Self::new(out, self.capacity)
    }

    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0] + tol)
    }

    /// Closest non-increasing curve in the least-squares sense (pool adjacent
    /// violators). Segment integrals are preserved block-wise.
    pub fn monotone_projection(&self) -> Self {
        let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(self.values.len());
        for &v in &self.values {
            blocks.push((v, 1));
            while blocks.len() > 1 {
                let (v1, n1) = blocks[blocks.len() - 1];
                let (v0, n0) = blocks[blocks.len() - 2];
                if v1 <= v0 {
                    break;
                }
                blocks.pop();
                let last = blocks.last_mut().expect("two blocks present");
                *last = ((v0 * n0 as f64 + v1 * n1 as f64) / (n0 + n1) as f64, n0 + n1);
            }
        }
        let values = blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect();
        MarginalValueCurve { values, capacity: self.capacity }
    }
}

impl MarginalValue for MarginalValueCurve {
    fn capacity(&self) -> f64 {
        self.capacity
    }

    fn climb(&self, from: f64, limit: f64, threshold: f64) -> f64 {
        let mut reach = from;
        let mut k = self.segment_above(from);
        while reach < limit && k < self.values.len() && self.values[k] > threshold {
            reach = self.edge(k + 1).min(limit);
            k += 1;
        }
        reach
    }

    fn descend(&self, from: f64, limit: f64, threshold: f64) -> f64 {
        let mut reach = from;
        let mut below = self.segment_below(from);
        while let Some(k) = below {
            if reach <= limit || self.values[k] >= threshold {
                break;
            }
            reach = self.edge(k).max(limit);
            below = k.checked_sub(1);
        }
        reach
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_step() -> MarginalValueCurve {
        MarginalValueCurve::new(vec![10.0, 4.0], 1.0).unwrap()
    }

    #[test]
    fn eval_examples() {
        let c = two_step();
        assert_eq!(c.eval_marginal(0.25).unwrap(), 10.0);
        assert_eq!(c.eval_marginal(0.75).unwrap(), 4.0);
        // Shared edge resolves to the lower segment.
        assert_eq!(c.eval_marginal(0.5).unwrap(), 10.0);
        assert_eq!(c.eval_marginal(0.0).unwrap(), 10.0);
        assert_eq!(c.eval_marginal(1.0).unwrap(), 4.0);
        let flat = MarginalValueCurve::constant(1001, 1.0, 7.0).unwrap();
        assert_eq!(flat.eval_marginal(0.3141).unwrap(), 7.0);
    }

    #[test]
    fn eval_out_of_range() {
        let c = two_step();
        assert!(matches!(c.eval_marginal(1.2), Err(Error::Domain(_))));
        assert!(matches!(c.eval_marginal(-0.1), Err(Error::Domain(_))));
        assert!(c.integrate(0.0, 1.5).is_err());
    }

    #[test]
    fn integrate_examples() {
        let c = two_step();
        assert!((c.integrate(0.0, 1.0).unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(c.integrate(0.3, 0.3).unwrap(), 0.0);
        assert!((c.integrate(0.25, 0.75).unwrap() - 3.5).abs() < 1e-12);
        assert!((c.integrate(0.75, 0.25).unwrap() + 3.5).abs() < 1e-12);
    }

    #[test]
    fn downsample_examples() {
        let block = MarginalValueCurve::new(vec![8.0, 8.0, 2.0, 2.0], 1.0).unwrap();
        assert_eq!(block.downsample(2).unwrap().values(), &[8.0, 2.0]);
        let ramp = MarginalValueCurve::new(vec![8.0, 6.0, 4.0, 2.0], 1.0).unwrap();
        assert_eq!(ramp.downsample(2).unwrap().values(), &[7.0, 3.0]);
        let flat = MarginalValueCurve::constant(1001, 1.0, 7.0).unwrap();
        assert!(flat.downsample(50).unwrap().values().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        assert!(ramp.downsample(0).is_err());
        assert!(ramp.downsample(5).is_err());
    }

    #[test]
    fn uneven_downsample_weights() {
        // 3 -> 2: target 0 covers source 0 fully and half of source 1.
        let c = MarginalValueCurve::new(vec![6.0, 3.0, 0.0], 1.5).unwrap();
        let d = c.downsample(2).unwrap();
        assert!((d.values()[0] - 5.0).abs() < 1e-12);
        assert!((d.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn climb_and_descend() {
        let c = MarginalValueCurve::new(vec![50.0, 40.0, 30.0, 20.0], 1.0).unwrap();
        assert_eq!(c.climb(0.25, 1.0, 35.0), 0.5);
        assert_eq!(c.climb(0.3, 0.4, 35.0), 0.4);
        assert_eq!(c.climb(0.5, 1.0, 35.0), 0.5);
        assert_eq!(c.descend(1.0, 0.0, 35.0), 0.5);
        assert_eq!(c.descend(0.6, 0.55, 35.0), 0.55);
        assert_eq!(c.descend(0.5, 0.0, 35.0), 0.5);
        assert_eq!(c.descend(0.0, 0.0, 100.0), 0.0);
        assert_eq!(c.climb(1.0, 1.0, -100.0), 1.0);
    }

    #[test]
    fn pav_projection() {
        let c = MarginalValueCurve::new(vec![5.0, 7.0, 3.0, 4.0, 1.0], 1.0).unwrap();
        let m = c.monotone_projection();
        assert_eq!(m.values(), &[6.0, 6.0, 3.5, 3.5, 1.0]);
        assert!((m.integrate(0.0, 1.0).unwrap() - c.integrate(0.0, 1.0).unwrap()).abs() < 1e-12);
    }

    fn non_increasing(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..20.0, k).prop_map(|steps| {
            let mut v = 100.0;
            steps
                .into_iter()
                .map(|s| {
                    v -= s;
                    v
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn downsample_preserves_integral_and_order(vals in non_increasing(1..300), frac in 0.0f64..1.0) {
            let k = vals.len();
            let target = 1 + ((k - 1) as f64 * frac) as usize;
            let c = MarginalValueCurve::new(vals, 2.0).unwrap();
            let d = c.downsample(target).unwrap();
            let a = c.integrate(0.0, 2.0).unwrap();
            let b = d.integrate(0.0, 2.0).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            prop_assert!(d.is_non_increasing(1e-9));
        }

        #[test]
        fn integral_is_additive(vals in non_increasing(1..60), x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0) {
            let c = MarginalValueCurve::new(vals, 1.0).unwrap();
            let lhs = c.integrate(x, y).unwrap() + c.integrate(y, z).unwrap();
            prop_assert!((lhs - c.integrate(x, z).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn eval_constant_inside_segment(vals in non_increasing(1..60), u in 0.01f64..0.99, w in 0.01f64..0.99) {
            let c = MarginalValueCurve::new(vals, 1.0).unwrap();
            let k = ((c.num_segments() as f64 - 1.0) * u) as usize;
            let width = c.segment_width();
            let a = (k as f64 + 0.01) * width;
            let b = (k as f64 + 0.01 + 0.98 * w) * width;
            prop_assert_eq!(c.eval_marginal(a).unwrap(), c.eval_marginal(b).unwrap());
        }
    }
}

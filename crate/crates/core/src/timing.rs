//! Learned action timing.
//!
//! Each worker's number of clock advances per communication round is modeled
//! as Poisson distributed. The rate is estimated by exponential smoothing over
//! past rounds. An intent is acted on in the current round if its start clock
//! could be reached before the next round finishes, using a high quantile of
//! the two-round clock count as a soft upper bound.

use std::collections::HashMap;

use crate::config::TimingConfig;
use crate::error::{Error, Result};
use crate::model::Clock;

/// Quantile arguments above this value are not evaluated; the caller acts
/// unconditionally instead.
pub const RATE_CAP: f64 = 1e6;

/// Smallest `k` with `P[Poisson(lambda) <= k] >= p`.
pub fn poisson_quantile(lambda: f64, p: f64) -> Result<u64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "poisson rate must be positive and finite, got {lambda}"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile must be in (0,1), got {p}")));
    }
    // Past this point the partial sum has numerically saturated.
    let limit = (lambda + 60.0 * lambda.sqrt() + 100.0).ceil() as u64;
    let mut cdf = KahanSum::default();

    if lambda < 700.0 {
        // e^-lambda is representable; walk the pmf by multiplication.
        let mut pmf = (-lambda).exp();
        let mut k = 0u64;
        loop {
            cdf.add(pmf);
            if cdf.value() >= p || k >= limit {
                return Ok(k);
            }
            k += 1;
            pmf *= lambda / k as f64;
        }
    } else {
        let ln_lambda = lambda.ln();
        let mut log_pmf = -lambda;
        let mut k = 0u64;
        loop {
            cdf.add(log_pmf.exp());
            if cdf.value() >= p || k >= limit {
                return Ok(k);
            }
            k += 1;
            log_pmf += ln_lambda - (k as f64).ln();
        }
    }
}

#[derive(Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// Memoizes quantiles for repeated rates within a round.
#[derive(Default, Debug)]
pub struct QuantileCache {
    memo: HashMap<(u64, u64), u64>,
}

impl QuantileCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.memo.clear();
    }

    pub fn quantile(&mut self, lambda: f64, p: f64) -> Result<u64> {
        let key = (lambda.to_bits(), p.to_bits());
        if let Some(&q) = self.memo.get(&key) {
            return Ok(q);
        }
        let q = poisson_quantile(lambda, p)?;
        self.memo.insert(key, q);
        Ok(q)
    }
}

/// Smoothed estimate of clocks per round for one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct RateEstimator {
    lambda_hat: f64,
    alpha: f64,
    p: f64,
    last_clock: Clock,
}

/// Result of observing one round start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateObservation {
    /// Clocks since the previous round start.
    pub delta: Clock,
    /// Updated estimate.
    pub lambda_hat: f64,
    /// Rate used for the decision: `max(lambda_hat, delta)`.
    pub decision_rate: f64,
}

impl RateEstimator {
    pub fn new(cfg: &TimingConfig, start_clock: Clock) -> Self {
        RateEstimator {
            lambda_hat: cfg.initial_rate,
            alpha: cfg.alpha,
            p: cfg.quantile,
            last_clock: start_clock,
        }
    }

    pub fn with_state(lambda_hat: f64, alpha: f64, p: f64, last_clock: Clock) -> Self {
        RateEstimator {
            lambda_hat,
            alpha,
            p,
            last_clock,
        }
    }

    pub fn lambda_hat(&self) -> f64 {
        self.lambda_hat
    }

    pub fn last_clock(&self) -> Clock {
        self.last_clock
    }

    pub fn quantile_p(&self) -> f64 {
        self.p
    }

    /// Updates the estimate with the clock at the start of this round. Runs
    /// once per worker per round. The estimate is left unchanged when the
    /// worker made no progress.
    pub fn observe(&mut self, c_now: Clock) -> RateObservation {
        let delta = c_now.saturating_sub(self.last_clock);
        if delta > 0 {
            self.lambda_hat = (1.0 - self.alpha) * self.lambda_hat + self.alpha * delta as f64;
        }
        self.last_clock = c_now;
        RateObservation {
            delta,
            lambda_hat: self.lambda_hat,
            decision_rate: self.lambda_hat.max(delta as f64),
        }
    }

    /// Start clocks strictly below the returned bound are acted on this round.
    /// `None` means act on everything.
    pub fn act_bound(&self, c_now: Clock, obs: &RateObservation, cache: &mut QuantileCache) -> Option<Clock> {
        act_bound(c_now, obs.decision_rate, self.p, cache)
    }
}

/// `c_now + Q(2 * rate, p)`, or `None` when the quantile argument exceeds
/// [`RATE_CAP`].
pub fn act_bound(c_now: Clock, rate: f64, p: f64, cache: &mut QuantileCache) -> Option<Clock> {
    let lambda = 2.0 * rate;
    if lambda > RATE_CAP {
        return None;
    }
    // lambda is positive: the estimate starts positive and never shrinks to 0.
    let q = cache.quantile(lambda, p).expect("validated timing parameters");
    Some(c_now.saturating_add(q))
}

/// One step of the per-intent decision: updates the estimator with the round
/// start clock and reports whether an intent starting at `c_start` must be
/// acted on now.
pub fn update_and_decide(est: &mut RateEstimator, c_now: Clock, c_start: Clock, cache: &mut QuantileCache) -> bool {
    let obs = est.observe(c_now);
    match est.act_bound(c_now, &obs, cache) {
        Some(bound) => c_start < bound,
        None => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantile_examples() {
        assert_eq!(poisson_quantile(1.0, 0.5).unwrap(), 1);
        assert_eq!(poisson_quantile(1.0, 0.3).unwrap(), 0);
        assert_eq!(poisson_quantile(2.0, 0.9999).unwrap(), 9);
    }

    #[test]
    fn quantile_rejects_bad_input() {
        assert!(poisson_quantile(0.0, 0.5).is_err());
        assert!(poisson_quantile(-1.0, 0.5).is_err());
        assert!(poisson_quantile(f64::NAN, 0.5).is_err());
        assert!(poisson_quantile(1.0, 0.0).is_err());
        assert!(poisson_quantile(1.0, 1.0).is_err());
    }

    #[test]
    fn quantile_large_rates_are_near_mean() {
        // normal approximation: mean + z * sd, z(0.9999) ~ 3.72
        for &lambda in &[1e3, 1e4, 2e5] {
            let q = poisson_quantile(lambda, 0.9999).unwrap() as f64;
            let approx = lambda + 3.719 * lambda.sqrt();
            assert!(
                (q - approx).abs() < 0.05 * lambda.sqrt() + 3.0,
                "{lambda}: {q} vs {approx}"
            );
        }
    }

    fn estimator(lambda: f64, last: Clock) -> RateEstimator {
        RateEstimator::with_state(lambda, 0.1, 0.9999, last)
    }

    #[test]
    fn no_progress_keeps_estimate() {
        let mut est = estimator(10.0, 5);
        let obs = est.observe(5);
        assert_eq!(obs.delta, 0);
        assert_eq!(est.lambda_hat(), 10.0);
        assert_eq!(obs.decision_rate, 10.0);
    }

    #[test]
    fn smoothing_and_max_rule() {
        let mut est = estimator(10.0, 0);
        let obs = est.observe(20);
        assert_eq!(est.lambda_hat(), 11.0);
        assert_eq!(obs.decision_rate, 20.0);
        let mut cache = QuantileCache::new();
        let bound = est.act_bound(20, &obs, &mut cache).unwrap();
        assert_eq!(bound, 20 + poisson_quantile(40.0, 0.9999).unwrap());
    }

    #[test]
    fn act_when_start_is_within_quantile() {
        // lambda_hat' = 1 after observing delta = 1 from lambda_hat = 1
        let mut est = estimator(1.0, 9);
        let mut cache = QuantileCache::new();
        assert!(update_and_decide(&mut est, 10, 15, &mut cache));
        assert_eq!(est.lambda_hat(), 1.0);
        let mut est = estimator(1.0, 9);
        // Q(2, 0.9999) = 9, so 19 is not below 10 + 9
        assert!(!update_and_decide(&mut est, 10, 19, &mut cache));
        let mut est = estimator(1.0, 9);
        assert!(update_and_decide(&mut est, 10, 18, &mut cache));
    }

    #[test]
    fn capped_rates_act_unconditionally() {
        let mut cache = QuantileCache::new();
        assert_eq!(act_bound(0, 6e5, 0.9999, &mut cache), None);
        assert!(act_bound(0, 4e5, 0.9999, &mut cache).is_some());
    }

    proptest! {
        #[test]
        fn monotone_in_rate(a in 0.01f64..200.0, b in 0.01f64..200.0, p in 0.01f64..0.9999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(poisson_quantile(lo, p).unwrap() <= poisson_quantile(hi, p).unwrap());
        }

        #[test]
        fn monotone_in_p(l in 0.01f64..200.0, a in 0.001f64..0.9999, b in 0.001f64..0.9999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(poisson_quantile(l, lo).unwrap() <= poisson_quantile(l, hi).unwrap());
        }

        #[test]
        fn stalled_rounds_keep_estimate(l in 0.1f64..100.0, c in 0u64..1000, n in 1usize..50) {
            let mut est = estimator(l, c);
            for _ in 0..n {
                est.observe(c);
            }
            prop_assert_eq!(est.lambda_hat(), l);
        }

        #[test]
        fn waiting_implies_start_beyond_bound(
            l in 0.1f64..50.0, last in 0u64..100, step in 0u64..40, ahead in 0u64..200,
        ) {
            let mut est = estimator(l, last);
            let c_now = last + step;
            let c_start = c_now + ahead;
            let mut cache = QuantileCache::new();
            let act = update_and_decide(&mut est, c_now, c_start, &mut cache);
            let rate = est.lambda_hat().max(step as f64);
            let q = poisson_quantile(2.0 * rate, 0.9999).unwrap();
            if !act {
                prop_assert!(c_start >= c_now + q);
            }
            // a sudden speed-up is used directly
            if step as f64 > l {
                prop_assert_eq!(rate, step as f64);
            }
        }
    }
}

//! Exact per-node counters.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

/// Log-linear histogram of non-negative values with ~1.5% relative error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
    sum: f64,
    max: f64,
}

const SUB: usize = 64;

impl Histogram {
    fn bucket(v: f64) -> usize {
        let v = v.max(0.0);
        if v < SUB as f64 {
            return v as usize;
        }
        let exp = v.log2().floor() as usize; // >= 6
        let base = (1u64 << exp) as f64;
        let sub = ((v - base) / base * SUB as f64) as usize;
        SUB + (exp - 6) * SUB + sub.min(SUB - 1)
    }

    fn bucket_mid(i: usize) -> f64 {
        if i < SUB {
            return i as f64 + 0.5;
        }
        let exp = (i - SUB) / SUB + 6;
        let sub = (i - SUB) % SUB;
        let base = (1u64 << exp) as f64;
        base + (sub as f64 + 0.5) * base / SUB as f64
    }

    pub fn record(&mut self, v: f64) {
        let b = Self::bucket(v);
        if self.counts.len() <= b {
            self.counts.resize(b + 1, 0);
        }
        self.counts[b] += 1;
        self.total += 1;
        self.sum += v;
        self.max = self.max.max(v);
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.sum / self.total as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn quantile(&self, q: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let rank = ((q * self.total as f64).ceil() as u64).clamp(1, self.total);
        let mut seen = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Self::bucket_mid(i).min(self.max);
            }
        }
        self.max
    }

    /// Samples recorded after `earlier`, which must be an older copy of
    /// this histogram. The maximum is kept as is.
    pub fn since(&self, earlier: &Histogram) -> Histogram {
        let mut counts = self.counts.clone();
        for (a, b) in counts.iter_mut().zip(&earlier.counts) {
            *a = a.saturating_sub(*b);
        }
        Histogram {
            counts,
            total: self.total.saturating_sub(earlier.total),
            sum: (self.sum - earlier.sum).max(0.0),
            max: self.max,
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.sum += other.sum;
        self.max = self.max.max(other.max);
    }
}

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        /// Live counters, safe to bump from any thread.
        #[derive(Debug, Default)]
        pub struct NodeMetrics {
            $(pub $name: AtomicU64,)*
            /// Replica staleness at reads, in microseconds.
            pub staleness_us: Mutex<Histogram>,
        }

        /// Plain copy of [`NodeMetrics`].
        #[derive(Clone, Debug, Default, PartialEq)]
        pub struct MetricsSnapshot {
            $(pub $name: u64,)*
            pub staleness_us: Histogram,
        }

        impl NodeMetrics {
            pub fn snapshot(&self) -> MetricsSnapshot {
                MetricsSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                    staleness_us: self.staleness_us.lock().clone(),
                }
            }
        }

        impl MetricsSnapshot {
            /// Sums counters; `max_hops` takes the maximum.
            pub fn accumulate(&mut self, o: &MetricsSnapshot) {
                let hops = self.max_hops.max(o.max_hops);
                $(self.$name += o.$name;)*
                self.max_hops = hops;
                self.staleness_us.merge(&o.staleness_us);
            }

            /// Counts accumulated after `earlier`, an older snapshot of the
            /// same node. `max_hops` and the staleness histogram cover the
            /// whole run.
            pub fn since(&self, earlier: &MetricsSnapshot) -> MetricsSnapshot {
                let mut d = MetricsSnapshot {
                    $($name: self.$name.saturating_sub(earlier.$name),)*
                    staleness_us: self.staleness_us.clone(),
                };
                d.max_hops = self.max_hops;
                d
            }

            pub fn names() -> &'static [&'static str] {
                &[$(stringify!($name),)*]
            }

            pub fn values(&self) -> Vec<u64> {
                vec![$(self.$name,)*]
            }
        }
    };
}

counters!(
    bytes_sent,
    frames_sent,
    requests_sent,
    responses_sent,
    read_bytes_sent,
    pulls,
    pulls_owned,
    pulls_replica,
    pulls_remote,
    pushes,
    pushes_queued,
    relocations_out,
    relocations_in,
    replica_creations,
    replica_destructions,
    intent_starts_sent,
    intent_ends_sent,
    late_intents,
    stale_announcements,
    protocol_warnings,
    forwards,
    max_hops,
    hop_violations,
);

impl NodeMetrics {
    pub fn add(&self, counter: &AtomicU64, v: u64) {
        counter.fetch_add(v, Ordering::Relaxed);
    }

    pub fn record_hops(&self, hops: u8) {
        self.max_hops.fetch_max(hops as u64, Ordering::Relaxed);
        if hops > 3 {
            self.hop_violations.fetch_add(1, Ordering::Relaxed);
        }
    }
}

impl MetricsSnapshot {
    pub fn remote_access_share(&self) -> f64 {
        if self.pulls == 0 {
            0.0
        } else {
            self.pulls_remote as f64 / self.pulls as f64
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent + self.read_bytes_sent
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn since_drops_earlier_samples() {
        let mut h = Histogram::default();
        for v in [1.0, 2.0, 3.0] {
            h.record(v);
        }
        let early = h.clone();
        h.record(1000.0);
        let d = h.since(&early);
        assert_eq!(d.count(), 1);
        assert_eq!(d.mean(), 1000.0);
        assert!((d.quantile(0.5) - 1000.0).abs() < 20.0);
    }

    #[test]
    fn histogram_quantiles_are_close() {
        let mut h = Histogram::default();
        for v in 1..=10_000 {
            h.record(v as f64);
        }
        assert_eq!(h.count(), 10_000);
        assert!((h.mean() - 5000.5).abs() < 1e-9);
        for q in [0.5, 0.9, 0.99] {
            let want = q * 10_000.0;
            let got = h.quantile(q);
            assert!((got - want).abs() / want < 0.02, "{q}: {got}");
        }
        assert_eq!(h.max(), 10_000.0);
    }

    #[test]
    fn accumulate_takes_max_of_hops() {
        let mut a = MetricsSnapshot {
            max_hops: 2,
            pulls: 3,
            ..Default::default()
        };
        let b = MetricsSnapshot {
            max_hops: 3,
            pulls: 4,
            ..Default::default()
        };
        a.accumulate(&b);
        assert_eq!((a.max_hops, a.pulls), (3, 7));
    }
}

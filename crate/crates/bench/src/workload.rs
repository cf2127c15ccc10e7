//! Deterministic access sequences.
//!
//! Every worker gets a fixed list of batches per epoch; a batch is the
//! sorted, duplicate-free set of keys it touches. Sequences depend only on
//! the spec, the cluster shape and the seed.

use std::fmt;
use std::str::FromStr;

use intentps_core::{Error, Key, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    /// Keys drawn from a Zipf distribution over a shuffled key space.
    ZipfHotspot,
    /// Matrix factorization: private row keys per worker, shared column keys
    /// visited in column order.
    RowLocalityMF,
    UniformSparse,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 3] = [
        WorkloadKind::ZipfHotspot,
        WorkloadKind::RowLocalityMF,
        WorkloadKind::UniformSparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::ZipfHotspot => "zipf",
            WorkloadKind::RowLocalityMF => "mf",
            WorkloadKind::UniformSparse => "uniform",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown workload '{s}' (zipf, mf, uniform)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub num_keys: u64,
    pub value_len: usize,
    /// Batches each worker processes per epoch.
    pub batches_per_epoch: u64,
    /// Data points per batch.
    pub batch_size: usize,
    pub zipf_exponent: f64,
    /// How many batches ahead of use a worker signals intent.
    pub signal_offset_batches: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::ZipfHotspot,
            num_keys: 100_000,
            value_len: 8,
            batches_per_epoch: 200,
            batch_size: 32,
            zipf_exponent: 1.1,
            signal_offset_batches: 16,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_keys < 2 {
            return Err(Error::Config("workload needs at least two keys".into()));
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("batches and batch size must be positive".into()));
        }
        if self.value_len == 0 {
            return Err(Error::Config("value length must be positive".into()));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::Config("zipf exponent must be positive".into()));
        }
        Ok(())
    }

    /// Number of column keys of the MF layout; the rest are rows.
    pub fn mf_columns(&self) -> u64 {
        (self.num_keys / 32).max(1)
    }
}

/// Batches of one worker across all epochs, indexed by its clock.
pub type WorkerPlan = Vec<Vec<Key>>;

fn stream_seed(seed: u64, worker: usize, epoch: u64) -> u64 {
    let mut z = seed ^ (worker as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plans for all `total_workers` workers, in global worker order
/// (node-major).
pub fn generate(spec: &WorkloadSpec, total_workers: usize, epochs: u64) -> Result<Vec<WorkerPlan>> {
    spec.validate()?;
    let zipf = match spec.kind {
        WorkloadKind::ZipfHotspot => Some(ZipfKeys::new(spec)?),
        _ => None,
    };
    Ok((0..total_workers)
        .map(|w| {
            (0..epochs)
                .flat_map(|e| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, w, e));
                    match spec.kind {
                        WorkloadKind::ZipfHotspot => zipf.as_ref().unwrap().epoch(spec, &mut rng),
                        WorkloadKind::UniformSparse => uniform_epoch(spec, &mut rng),
                        WorkloadKind::RowLocalityMF => mf_epoch(spec, w, total_workers, &mut rng),
                    }
                })
                .collect()
        })
        .collect())
}

fn finish(mut keys: Vec<Key>) -> Vec<Key> {
    keys.sort_unstable();
    keys.dedup();
    keys
}

struct ZipfKeys {
    dist: Zipf<f64>,
    /// Key of every popularity rank.
    by_rank: Vec<Key>,
}

impl ZipfKeys {
    fn new(spec: &WorkloadSpec) -> Result<Self> {
        let dist =
            Zipf::new(spec.num_keys as f64, spec.zipf_exponent).map_err(|e| Error::Config(format!("zipf: {e}")))?;
        let mut by_rank: Vec<Key> = (0..spec.num_keys).map(Key).collect();
        by_rank.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        Ok(ZipfKeys { dist, by_rank })
    }

    fn epoch(&self, spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Key>> {
        (0..spec.batches_per_epoch)
            .map(|_| {
                finish(
                    (0..spec.batch_size)
                        .map(|_| self.by_rank[self.dist.sample(rng) as usize - 1])
                        .collect(),
                )
            })
            .collect()
    }
}

fn uniform_epoch(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Key>> {
    (0..spec.batches_per_epoch)
        .map(|_| {
            finish(
                (0..spec.batch_size)
                    .map(|_| Key(rng.random_range(0..spec.num_keys)))
                    .collect(),
            )
        })
        .collect()
}

/// Rows are split evenly between workers, so rows are private to a worker
/// and therefore to a node. Each worker visits its points sorted by column,
/// starting at a worker-specific column so that workers sweep different
/// parts of the column space at any time.
fn mf_epoch(spec: &WorkloadSpec, worker: usize, total_workers: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Key>> {
    let cols = spec.mf_columns();
    let rows = spec.num_keys - cols;
    let per = (rows / total_workers as u64).max(1);
    let first_row = (worker as u64 * per).min(rows - 1);
    let row_count = per.min(rows - first_row);
    let shift = worker as u64 * cols / total_workers as u64;

    let n = spec.batches_per_epoch as usize * spec.batch_size;
    let mut points: Vec<(u64, u64)> = (0..n)
        .map(|_| {
            let row = first_row + rng.random_range(0..row_count);
            let col = rng.random_range(0..cols);
            ((col + cols - shift) % cols, row)
        })
        .collect();
    points.sort_unstable();
    points
        .chunks(spec.batch_size)
        .map(|chunk| {
            finish(
                chunk
                    .iter()
                    .flat_map(|&(c, row)| [Key(row), Key(rows + (c + shift) % cols)])
                    .collect(),
            )
        })
        .collect()
}

/// Sign pattern of the additive update applied to `key`: every push adds
/// this vector, so final values are access counts times the pattern.
pub fn update_pattern(key: Key, value_len: usize) -> Vec<f32> {
    (0..value_len)
        .map(|i| {
            let h = stream_seed(key.0, i, 0x5EED);
            if h & 1 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Number of times each key is pushed over all plans.
pub fn access_counts(plans: &[WorkerPlan], num_keys: u64) -> Vec<u64> {
    let mut counts = vec![0u64; num_keys as usize];
    for plan in plans {
        for batch in plan {
            for k in batch {
                counts[k.index()] += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: WorkloadKind) -> WorkloadSpec {
        WorkloadSpec {
            kind,
            num_keys: 4096,
            batches_per_epoch: 20,
            batch_size: 16,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn plans_are_deterministic_and_sized() {
        for kind in WorkloadKind::ALL {
            let a = generate(&spec(kind), 8, 2).unwrap();
            assert_eq!(a, generate(&spec(kind), 8, 2).unwrap());
            assert_eq!(a.len(), 8);
            assert!(a.iter().all(|p| p.len() == 40));
            assert!(a
                .iter()
                .flatten()
                .all(|b| !b.is_empty() && b.windows(2).all(|w| w[0] < w[1])));
            assert!(a.iter().flatten().flatten().all(|k| k.0 < 4096));
        }
    }

    #[test]
    fn mf_rows_are_private_to_workers() {
        let s = spec(WorkloadKind::RowLocalityMF);
        let rows = s.num_keys - s.mf_columns();
        let plans = generate(&s, 8, 1).unwrap();
        let mut owner = vec![None; rows as usize];
        for (w, plan) in plans.iter().enumerate() {
            for k in plan.iter().flatten().filter(|k| k.0 < rows) {
                assert!(owner[k.index()].replace(w).is_none_or(|o| o == w));
            }
        }
    }

    #[test]
    fn names_parse() {
        for k in WorkloadKind::ALL {
            assert_eq!(k.name().parse::<WorkloadKind>().unwrap(), k);
        }
        assert!("zip".parse::<WorkloadKind>().is_err());
    }
}

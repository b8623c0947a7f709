use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::world::EnvType;

use super::{DatasetError, DatasetReader, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Seeded shuffled partition into `(train, test)`, each sorted ascending.
/// The train side gets `round(fraction * n)` records, clamped so neither
/// side is empty.
pub fn split_dataset(n_records: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_records < 2 {
        return Err(DatasetError::TooFewRecords(n_records));
    }
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(DatasetError::BadFraction(f));
    }
    let n_train = ((f * n_records as f64).round() as usize).clamp(1, n_records - 1);
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: u64,
    /// Every environment name, including those with no records.
    pub per_env: BTreeMap<String, u64>,
    pub dr_records: u64,
    /// `None` when there are no records.
    pub dr_fraction: Option<f64>,
    /// Bin edges, `HISTOGRAM_BINS + 1` values spanning `[-1, 1]`.
    pub histogram_edges: Vec<f64>,
    /// Counts per bin; the last bin is closed on the right.
    pub histogram: Vec<u64>,
    pub mean_abs_steering: Option<f64>,
}

/// Statistics over `(env, dr, steering)` triples.
pub fn steering_stats(items: impl IntoIterator<Item = (EnvType, bool, f32)>) -> DatasetStats {
    let mut per_env: BTreeMap<String, u64> = EnvType::ALL.iter().map(|e| (e.name().to_string(), 0)).collect();
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let (mut records, mut dr_records, mut abs_sum) = (0u64, 0u64, 0f64);
    for (env, dr, s) in items {
        records += 1;
        *per_env.entry(env.name().to_string()).or_default() += 1;
        dr_records += dr as u64;
        abs_sum += (s as f64).abs();
        let bin = (((s as f64 + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor() as isize).clamp(0, HISTOGRAM_BINS as isize - 1);
        histogram[bin as usize] += 1;
    }
    let frac = |x: f64| (records > 0).then(|| x / records as f64);
    DatasetStats {
        records,
        per_env,
        dr_records,
        dr_fraction: frac(dr_records as f64),
        histogram_edges: (0..=HISTOGRAM_BINS).map(|i| -1.0 + 2.0 * i as f64 / HISTOGRAM_BINS as f64).collect(),
        histogram,
        mean_abs_steering: frac(abs_sum),
    }
}

/// Streams `path` once; images and clouds are never held together.
pub fn dataset_stats(path: impl AsRef<Path>) -> Result<DatasetStats> {
    let items = DatasetReader::open(path)?
        .map(|r| r.map(|t| (t.env, t.dr, t.steering)))
        .collect::<Result<Vec<_>>>()?;
    Ok(steering_stats(items))
}

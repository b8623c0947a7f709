use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::nets::{forward, ForwardOptions, ModelWeights};

use super::{Result, TrainError};

const EVAL_BATCH: usize = 32;

/// Eval-mode predictions for `indices`, in order. Chunks are independent
/// because batchnorm uses running statistics, so they may run concurrently.
pub fn predict(weights: &ModelWeights, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f32>> {
    if let Some(&index) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(TrainError::IndexOutOfRange { index, len: dataset.len() });
    }
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let parts = nav_tensor::par::map_slice(&chunks, |chunk| -> Result<Vec<f32>> {
        let batch = dataset.batch(chunk, weights.arch);
        Ok(forward(weights, &batch, ForwardOptions::eval())?.predictions()?)
    });
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// RMSE per environment present in the test set.
    pub per_env: BTreeMap<String, f64>,
    pub per_env_count: BTreeMap<String, usize>,
    /// Pooled over every test record.
    pub overall: f64,
    /// Unweighted mean of the per-environment values.
    pub average: f64,
    pub count: usize,
}

fn rmse(pairs: impl Iterator<Item = (f32, f32)>) -> (f64, usize) {
    let (mut s, mut n) = (0f64, 0usize);
    for (p, y) in pairs {
        let d = p as f64 - y as f64;
        s += d * d;
        n += 1;
    }
    ((s / n as f64).sqrt(), n)
}

pub fn evaluate_rmse(weights: &ModelWeights, dataset: &Dataset, test_idx: &[usize]) -> Result<RmseReport> {
    if test_idx.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let preds = predict(weights, dataset, test_idx)?;
    let mut groups: BTreeMap<String, Vec<(f32, f32)>> = BTreeMap::new();
    for (&i, &p) in test_idx.iter().zip(&preds) {
        let s = &dataset.samples[i];
        groups.entry(s.env.name().to_string()).or_default().push((p, s.steering));
    }
    let (overall, count) = rmse(test_idx.iter().zip(&preds).map(|(&i, &p)| (p, dataset.samples[i].steering)));
    let mut per_env = BTreeMap::new();
    let mut per_env_count = BTreeMap::new();
    for (env, pairs) in &groups {
        let (r, n) = rmse(pairs.iter().copied());
        per_env.insert(env.clone(), r);
        per_env_count.insert(env.clone(), n);
    }
    let average = per_env.values().sum::<f64>() / per_env.len() as f64;
    Ok(RmseReport {
        per_env,
        per_env_count,
        overall,
        average,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_weights, Arch};
    use crate::train::tests::synthetic;

    fn constant_head(arch: Arch, value: f32, ds: &Dataset) -> ModelWeights {
        let mut w = init_weights(arch, &ds.config, 4).unwrap();
        w.get_mut("head.w").unwrap().data_mut().fill(0.0);
        w.get_mut("head.b").unwrap().data_mut().fill(value);
        w
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let ds = synthetic(&[0.25, 0.25, 0.25], 1);
        let w = constant_head(Arch::Nmfnet, 0.25, &ds);
        let r = evaluate_rmse(&w, &ds, &[0, 1, 2]).unwrap();
        assert_eq!(r.overall, 0.0);
        let ds = synthetic(&[-0.5, 0.5], 1);
        let w = constant_head(Arch::Rgbnet, 0.0, &ds);
        let r = evaluate_rmse(&w, &ds, &[0, 1]).unwrap();
        assert!((r.overall - 0.5).abs() < 1e-12);
        assert_eq!(r.count, 2);
        assert!(matches!(evaluate_rmse(&w, &ds, &[]), Err(TrainError::EmptyTestSet)));
    }

    #[test]
    fn per_env_grouping_and_average() {
        // Environments cycle with the index in the synthetic set.
        let labels = [0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4];
        let ds = synthetic(&labels, 2);
        let w = constant_head(Arch::Rgbnet, 0.0, &ds);
        let r = evaluate_rmse(&w, &ds, &(0..8).collect::<Vec<_>>()).unwrap();
        assert_eq!(r.per_env.len(), 4);
        for (k, env) in ["normal_city", "collapsed_house", "collapsed_city", "cave"].iter().enumerate() {
            let y = labels[k] as f64;
            assert!((r.per_env[*env] - y.abs()).abs() < 1e-7, "{env}");
        }
        let mean = r.per_env.values().sum::<f64>() / 4.0;
        assert_eq!(r.average, mean);
    }

    #[test]
    fn batching_does_not_change_predictions() {
        let labels: Vec<f32> = (0..40).map(|i| i as f32 / 40.0).collect();
        let ds = synthetic(&labels, 3);
        let w = init_weights(Arch::Nmfnet, &ds.config, 9).unwrap();
        let idx: Vec<usize> = (0..40).collect();
        let all = predict(&w, &ds, &idx).unwrap();
        for i in [0, 17, 39] {
            assert_eq!(predict(&w, &ds, &[i]).unwrap()[0], all[i]);
        }
    }
}

//! Behaviour-cloning trainer (SGD with momentum on an MSE loss), RMSE
//! evaluation and Grad-CAM saliency.

mod eval;
mod gradcam;

pub use eval::{evaluate_rmse, predict, RmseReport};
pub use gradcam::{bilinear_upsample, grad_cam, GradCam};

use std::io::Write;

use indexmap::IndexMap;
use nav_tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::nets::{forward, init_weights, Arch, ForwardOptions, ModelWeights, NetConfig, NetsError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error("training split is empty")]
    EmptySplit,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("no trainable weight named {0:?}")]
    UnknownParameter(String),
    #[error("gradient for {name:?} has {found} values, weight has {expected}")]
    ShapeMismatch { name: String, expected: usize, found: usize },
    #[error("non-finite gradient for {0:?}")]
    NonFiniteGradient(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Nets(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub net: NetConfig,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    /// Stops after this many SGD steps if set.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn new(arch: Arch, net: NetConfig) -> Self {
        Self {
            arch,
            net,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        self.net.validate()?;
        Ok(())
    }
}

/// Per-parameter velocity, zero until the first step touches it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumState {
    pub velocity: IndexMap<String, Vec<f32>>,
}

impl MomentumState {
    /// Zero velocity for every trainable entry of `weights`.
    pub fn zeros_like(weights: &ModelWeights) -> Self {
        let velocity = weights
            .iter()
            .filter(|(n, _)| !ModelWeights::is_buffer(n))
            .map(|(n, t)| (n.to_string(), vec![0.0; t.len()]))
            .collect();
        Self { velocity }
    }
}

pub type ParamGrads = IndexMap<String, Vec<f32>>;

/// `v <- mu v + g`, `w <- w - lr v`, elementwise. All gradients are checked
/// before any weight changes.
pub fn sgd_step(weights: &mut ModelWeights, grads: &ParamGrads, vel: &mut MomentumState, lr: f64, mu: f64) -> Result<()> {
    for (name, g) in grads {
        if ModelWeights::is_buffer(name) || !weights.contains(name) {
            return Err(TrainError::UnknownParameter(name.clone()));
        }
        let expected = weights.get(name)?.len();
        if g.len() != expected {
            return Err(TrainError::ShapeMismatch {
                name: name.clone(),
                expected,
                found: g.len(),
            });
        }
        if let Some(v) = vel.velocity.get(name) {
            if v.len() != expected {
                return Err(TrainError::ShapeMismatch {
                    name: name.clone(),
                    expected,
                    found: v.len(),
                });
            }
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    let (lr, mu) = (lr as f32, mu as f32);
    for (name, g) in grads {
        let v = vel.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let w = weights.get_mut(name)?.data_mut();
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mu * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub epochs: Vec<EpochLoss>,
    /// Loss of every SGD step in order.
    pub step_losses: Vec<f64>,
}

/// Dropout seed for one step, decorrelated from the shuffle stream.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains from a fresh seeded initialization.
pub fn train(dataset: &Dataset, train_idx: &[usize], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, train_idx, cfg, None, |_, _| {})
}

/// Like [`train`], optionally continuing from `init` and reporting each
/// finished epoch with the weights at that point.
pub fn train_with(
    dataset: &Dataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    init: Option<ModelWeights>,
    mut on_epoch: impl FnMut(&EpochLoss, &ModelWeights),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if let Some(&index) = train_idx.iter().find(|&&i| i >= dataset.len()) {
        return Err(TrainError::IndexOutOfRange { index, len: dataset.len() });
    }
    if dataset.config != cfg.net {
        return Err(TrainError::InvalidConfig("dataset was loaded with a different network config".into()));
    }
    let mut weights = match init {
        Some(w) => {
            w.expect_arch(cfg.arch)?;
            w.check_layout(&cfg.net)?;
            w
        }
        None => init_weights(cfg.arch, &cfg.net, cfg.seed)?,
    };
    let mut vel = MomentumState::zeros_like(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order = train_idx.to_vec();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut seen, mut steps) = (0f64, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let loss = train_step(dataset, chunk, cfg, &mut weights, &mut vel, step_seed(cfg.seed, step)).map_err(|e| match e {
                TrainError::Nets(NetsError::Tensor(TensorError::NonFinite { op })) => TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                TrainError::NonFiniteGradient(name) => TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite gradient for {name}"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
            step += 1;
            step_losses.push(loss);
        }
        if steps == 0 {
            break 'outer;
        }
        let e = EpochLoss {
            epoch,
            loss: sum / seen as f64,
            steps,
        };
        on_epoch(&e, &weights);
        epochs.push(e);
    }
    Ok(TrainOutcome {
        weights,
        epochs,
        step_losses,
    })
}

/// One forward/backward/update on `chunk`. Returns the batch loss.
fn train_step(
    dataset: &Dataset,
    chunk: &[usize],
    cfg: &TrainConfig,
    weights: &mut ModelWeights,
    vel: &mut MomentumState,
    seed: u64,
) -> Result<f64> {
    let batch = dataset.batch(chunk, cfg.arch);
    let labels = dataset.labels(chunk);
    let mut f = forward(weights, &batch, ForwardOptions::train(seed, cfg.net.dropout))?;
    let target = f.tape.constant(Tensor::new(vec![chunk.len()], labels)?)?;
    let loss_var = f.tape.mse(f.output, target)?;
    let loss = f.tape.scalar_f64(loss_var)?;
    let mut g = f.tape.backward(loss_var)?;
    let grads: ParamGrads = f
        .params
        .iter()
        .map(|(name, v)| (name.clone(), g.take(*v).unwrap_or_default()))
        .collect();
    f.commit_stats(weights)?;
    sgd_step(weights, &grads, vel, cfg.lr, cfg.momentum)?;
    Ok(loss)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(mut out: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetHeader, Sample};
    use crate::sensors::{DistanceMap, SensorRig};
    use crate::world::EnvType;
    use rand::Rng;

    fn one_param(w: f32) -> ModelWeights {
        let mut m = ModelWeights::new(Arch::Rgbnet);
        m.insert("head.w", Tensor::full(&[1, 1], w));
        m
    }

    #[test]
    fn momentum_by_hand() {
        let mut w = one_param(1.0);
        let mut vel = MomentumState::zeros_like(&w);
        let g: ParamGrads = [("head.w".to_string(), vec![1.0])].into_iter().collect();
        sgd_step(&mut w, &g, &mut vel, 0.01, 0.9).unwrap();
        assert_eq!(vel.velocity["head.w"], vec![1.0]);
        assert!((w.get("head.w").unwrap().data()[0] - 0.99).abs() < 1e-7);
        sgd_step(&mut w, &g, &mut vel, 0.01, 0.9).unwrap();
        assert!((vel.velocity["head.w"][0] - 1.9).abs() < 1e-7);
        assert!((w.get("head.w").unwrap().data()[0] - 0.971).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_and_plain_descent() {
        let mut w = one_param(0.3);
        let mut vel = MomentumState::zeros_like(&w);
        let zero: ParamGrads = [("head.w".to_string(), vec![0.0])].into_iter().collect();
        sgd_step(&mut w, &zero, &mut vel, 0.01, 0.9).unwrap();
        assert_eq!(w.get("head.w").unwrap().data(), &[0.3]);
        let g: ParamGrads = [("head.w".to_string(), vec![0.25])].into_iter().collect();
        for _ in 0..3 {
            let before = w.get("head.w").unwrap().data()[0];
            sgd_step(&mut w, &g, &mut vel, 0.1, 0.0).unwrap();
            assert_eq!(w.get("head.w").unwrap().data()[0], before - 0.1f32 * 0.25);
        }
    }

    #[test]
    fn sgd_rejects_bad_gradients() {
        let mut w = one_param(1.0);
        let mut vel = MomentumState::zeros_like(&w);
        let g: ParamGrads = [("head.w".to_string(), vec![1.0, 2.0])].into_iter().collect();
        assert!(matches!(sgd_step(&mut w, &g, &mut vel, 0.01, 0.9), Err(TrainError::ShapeMismatch { .. })));
        let g: ParamGrads = [("head.w".to_string(), vec![f32::NAN])].into_iter().collect();
        assert!(matches!(sgd_step(&mut w, &g, &mut vel, 0.01, 0.9), Err(TrainError::NonFiniteGradient(_))));
        let g: ParamGrads = [("nope".to_string(), vec![1.0])].into_iter().collect();
        assert!(matches!(sgd_step(&mut w, &g, &mut vel, 0.01, 0.9), Err(TrainError::UnknownParameter(_))));
        assert_eq!(w.get("head.w").unwrap().data(), &[1.0]);
    }

    /// Random inputs at tiny geometry with the given labels.
    pub(crate) fn synthetic(labels: &[f32], seed: u64) -> Dataset {
        let cfg = NetConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &steering)| Sample {
                tick: i as u64,
                steering,
                env: EnvType::ALL[i % 4],
                dr: false,
                world_seed: 0,
                sample_seed: 0,
                rgb: (0..3 * cfg.rgb_height * cfg.rgb_width).map(|_| rng.gen()).collect(),
                cloud: (0..cfg.points).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
                dmap: DistanceMap {
                    height: cfg.dmap_height,
                    width: cfg.dmap_width,
                    scale: cfg.dmap_pixels_per_meter(),
                    origin: (0.0, 0.0),
                    cells: (0..cfg.dmap_height * cfg.dmap_width).map(|_| rng.gen_bool(0.2) as u8).collect(),
                },
            })
            .collect();
        Dataset {
            header: DatasetHeader::for_rig(&SensorRig::default()),
            config: cfg,
            samples,
        }
    }

    #[test]
    fn deterministic_and_partial_batches() {
        let ds = synthetic(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.9, -0.9, 0.2, 0.4, 0.1], 1);
        let idx: Vec<usize> = (0..11).collect();
        let mut cfg = TrainConfig::new(Arch::Nmfnet, NetConfig::tiny());
        cfg.epochs = 3;
        cfg.seed = 5;
        let a = train(&ds, &idx, &cfg).unwrap();
        let b = train(&ds, &idx, &cfg).unwrap();
        assert_eq!(a.epochs.len(), 3);
        assert!(a.epochs.iter().all(|e| e.steps == 2));
        assert_eq!(a.step_losses, b.step_losses);
        for ((na, ta), (nb, tb)) in a.weights.iter().zip(b.weights.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        // Running statistics were folded in.
        assert_ne!(a.weights.get("rgb.b1.bn1.running_var").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn zero_labels_zero_head_gives_zero_loss() {
        let ds = synthetic(&[0.0; 8], 2);
        let mut cfg = TrainConfig::new(Arch::Rgbnet, NetConfig::tiny());
        cfg.epochs = 1;
        let mut w = init_weights(Arch::Rgbnet, &cfg.net, 0).unwrap();
        w.get_mut("head.w").unwrap().data_mut().fill(0.0);
        let out = train_with(&ds, &(0..8).collect::<Vec<_>>(), &cfg, Some(w), |_, _| {}).unwrap();
        assert_eq!(out.epochs[0].loss, 0.0);
    }

    #[test]
    fn guards() {
        let ds = synthetic(&[0.0; 4], 3);
        let cfg = TrainConfig::new(Arch::Rgbnet, NetConfig::tiny());
        assert!(matches!(train(&ds, &[], &cfg), Err(TrainError::EmptySplit)));
        assert!(matches!(train(&ds, &[7], &cfg), Err(TrainError::IndexOutOfRange { .. })));
        let bad = TrainConfig { momentum: 1.0, ..cfg.clone() };
        assert!(matches!(train(&ds, &[0], &bad), Err(TrainError::InvalidConfig(_))));
        let diverge = TrainConfig {
            lr: 1e30,
            epochs: 50,
            ..cfg
        };
        let ds = synthetic(&[1.0, -1.0, 0.5, -0.5], 3);
        assert!(matches!(train(&ds, &[0, 1, 2, 3], &diverge), Err(TrainError::Diverged { .. })));
    }
}

use nav_tensor::{BatchNormStats, Mode, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Arch, ModelWeights, NetConfig, NetsError, Result};

/// Feature branch whose last conv map Grad-CAM can inspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rgb,
    Dmap,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Rgb => "rgb",
            Branch::Dmap => "dmap",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.prefix())
    }
}

impl std::str::FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(Branch::Rgb),
            "dmap" => Ok(Branch::Dmap),
            other => Err(format!("unknown branch {other:?} (expected rgb or dmap)")),
        }
    }
}

/// One mini-batch of network inputs.
///
/// `rgb` is `[N, 3, H, W]`, `cloud` is `[N, P, 3]`, `dmap` is `[N, 1, Hd, Wd]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor,
    pub cloud: Option<Tensor>,
    pub dmap: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rgb.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seeds the tape RNG (dropout masks).
    pub seed: u64,
    pub dropout: f32,
    /// Record parameters as differentiable leaves.
    pub track_params: bool,
    /// Record batch inputs as differentiable leaves.
    pub track_inputs: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
            dropout: 0.5,
            track_params: false,
            track_inputs: false,
        }
    }

    pub fn train(seed: u64, dropout: f32) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            dropout,
            track_params: true,
            track_inputs: false,
        }
    }
}

/// A recorded forward pass, ready for backward.
pub struct Forward {
    pub tape: Tape,
    /// Steering predictions, `[N]`.
    pub output: Var,
    pub params: Vec<(String, Var)>,
    /// Running statistics after train-mode batch folding.
    pub stats: Vec<(String, BatchNormStats)>,
    /// Post-ReLU trunk maps per branch.
    pub features: Vec<(Branch, Var)>,
    pub inputs: Vec<(&'static str, Var)>,
}

impl Forward {
    pub fn feature(&self, branch: Branch) -> Option<Var> {
        self.features.iter().find(|(b, _)| *b == branch).map(|(_, v)| *v)
    }

    pub fn input(&self, name: &str) -> Option<Var> {
        self.inputs.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn predictions(&self) -> Result<Vec<f32>> {
        Ok(self.tape.value(self.output)?.data().to_vec())
    }

    /// Writes folded running statistics back into `weights`.
    pub fn commit_stats(&self, weights: &mut ModelWeights) -> Result<()> {
        for (prefix, s) in &self.stats {
            weights.get_mut(&format!("{prefix}.running_mean"))?.data_mut().copy_from_slice(&s.mean);
            weights.get_mut(&format!("{prefix}.running_var"))?.data_mut().copy_from_slice(&s.var);
        }
        Ok(())
    }
}

/// Records layers onto a borrowed tape. Parameters come from `weights`
/// unless a leaf of the same name was supplied up front.
pub(crate) struct Builder<'t, 'w> {
    pub(crate) tape: &'t mut Tape,
    weights: &'w ModelWeights,
    opts: ForwardOptions,
    supplied: Vec<(String, Var)>,
    params: Vec<(String, Var)>,
    stats: Vec<(String, BatchNormStats)>,
    features: Vec<(Branch, Var)>,
    inputs: Vec<(&'static str, Var)>,
}

struct Parts {
    params: Vec<(String, Var)>,
    stats: Vec<(String, BatchNormStats)>,
    features: Vec<(Branch, Var)>,
    inputs: Vec<(&'static str, Var)>,
}

impl<'t, 'w> Builder<'t, 'w> {
    pub(crate) fn new(tape: &'t mut Tape, weights: &'w ModelWeights, opts: ForwardOptions) -> Self {
        Self {
            tape,
            weights,
            opts,
            supplied: Vec::new(),
            params: Vec::new(),
            stats: Vec::new(),
            features: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub(crate) fn with_leaves(mut self, leaves: Vec<(String, Var)>) -> Self {
        self.supplied = leaves;
        self
    }

    fn train(&self) -> bool {
        self.opts.mode == Mode::Train
    }

    pub(crate) fn input(&mut self, name: &'static str, t: &Tensor) -> Result<Var> {
        let v = self.tape.leaf(t.clone().with_grad(self.opts.track_inputs))?;
        self.inputs.push((name, v));
        Ok(v)
    }

    fn param(&mut self, name: String) -> Result<Var> {
        if let Some((_, v)) = self.supplied.iter().find(|(n, _)| *n == name) {
            return Ok(*v);
        }
        let t = self.weights.get(&name)?.clone();
        if self.opts.track_params {
            let v = self.tape.param(t)?;
            self.params.push((name, v));
            Ok(v)
        } else {
            Ok(self.tape.constant(t)?)
        }
    }

    fn conv(&mut self, p: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(format!("{p}.w"))?;
        let b = self.param(format!("{p}.b"))?;
        Ok(self.tape.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn dense(&mut self, p: &str, x: Var) -> Result<Var> {
        let w = self.param(format!("{p}.w"))?;
        let b = self.param(format!("{p}.b"))?;
        Ok(self.tape.dense(x, w, Some(b))?)
    }

    fn bn(&mut self, p: &str, x: Var) -> Result<Var> {
        let gamma = self.param(format!("{p}.gamma"))?;
        let beta = self.param(format!("{p}.beta"))?;
        let mut stats = BatchNormStats {
            mean: self.weights.get(&format!("{p}.running_mean"))?.data().to_vec(),
            var: self.weights.get(&format!("{p}.running_var"))?.data().to_vec(),
        };
        let train = self.train();
        let y = self.tape.batchnorm(x, gamma, beta, &mut stats, BN_EPS, BN_MOMENTUM, train)?;
        if train {
            self.stats.push((p.to_string(), stats));
        }
        Ok(y)
    }

    /// BN, ReLU, strided conv, BN, ReLU, conv; 1x1 strided conv on the skip.
    pub(crate) fn block(&mut self, p: &str, x: Var) -> Result<Var> {
        let h = self.bn(&format!("{p}.bn1"), x)?;
        let h = self.tape.relu(h)?;
        let h = self.conv(&format!("{p}.conv1"), h, 2, 1)?;
        let h = self.bn(&format!("{p}.bn2"), h)?;
        let h = self.tape.relu(h)?;
        let h = self.conv(&format!("{p}.conv2"), h, 1, 1)?;
        let skip = self.conv(&format!("{p}.skip"), x, 2, 0)?;
        Ok(self.tape.add(h, skip)?)
    }

    fn trunk(&mut self, branch: Branch, x: Var) -> Result<Var> {
        let p = branch.prefix();
        let h = self.conv(&format!("{p}.stem"), x, 2, 2)?;
        let mut h = self.tape.maxpool2d(h, 3, 2, 1)?;
        for b in 1..=3 {
            h = self.block(&format!("{p}.b{b}"), h)?;
        }
        let h = self.bn(&format!("{p}.bn_out"), h)?;
        let h = self.tape.relu(h)?;
        self.features.push((branch, h));
        Ok(h)
    }

    /// Shared per-point MLP then a max over points. `cloud` is `[N, P, 3]`.
    pub(crate) fn pointnet(&mut self, cloud: Var) -> Result<Var> {
        let shape = self.tape.shape(cloud)?.to_vec();
        let (n, p) = match shape.as_slice() {
            [n, p, 3] => (*n, *p),
            _ => return Err(nav_tensor::TensorError::Shape {
                op: "pointnet_encode",
                detail: format!("expected [N, P, 3], got {shape:?}"),
            }
            .into()),
        };
        if p == 0 {
            return Err(nav_tensor::TensorError::Empty { op: "pointnet_encode" }.into());
        }
        let mut h = self.tape.reshape(cloud, &[n * p, 3])?;
        for l in 1..=3 {
            h = self.dense(&format!("cloud.fc{l}"), h)?;
            h = self.bn(&format!("cloud.bn{l}"), h)?;
            h = self.tape.relu(h)?;
        }
        let f = self.tape.shape(h)?[1];
        let h = self.tape.reshape(h, &[n, p, f])?;
        Ok(self.tape.max_pool_set(h)?)
    }

    fn head(&mut self, x: Var) -> Result<Var> {
        let h = self.tape.dropout(x, self.opts.dropout, self.train())?;
        let y = self.dense("head", h)?;
        let n = self.tape.shape(y)?[0];
        Ok(self.tape.reshape(y, &[n])?)
    }

    fn into_parts(self) -> Parts {
        Parts {
            params: self.params,
            stats: self.stats,
            features: self.features,
            inputs: self.inputs,
        }
    }
}

/// Records a full forward pass of either architecture.
pub fn forward(weights: &ModelWeights, batch: &Batch, opts: ForwardOptions) -> Result<Forward> {
    let mut tape = Tape::new(opts.seed);
    let mut b = Builder::new(&mut tape, weights, opts);
    let output = build_network(&mut b, weights.arch, batch)?;
    let p = b.into_parts();
    Ok(Forward {
        tape,
        output,
        params: p.params,
        stats: p.stats,
        features: p.features,
        inputs: p.inputs,
    })
}

/// Both architectures, from batch inputs to `[N]` predictions.
pub(crate) fn build_network(b: &mut Builder, arch: Arch, batch: &Batch) -> Result<Var> {
    let rgb = b.input("rgb", &batch.rgb)?;
    match arch {
        Arch::Rgbnet => {
            let f = b.trunk(Branch::Rgb, rgb)?;
            let f = b.tape.global_avg_pool(f)?;
            b.head(f)
        }
        Arch::Nmfnet => {
            let cloud = batch.cloud.as_ref().ok_or(NetsError::MissingModality("point cloud"))?;
            let dmap = batch.dmap.as_ref().ok_or(NetsError::MissingModality("distance map"))?;
            let (n, cloud_n, dmap_n) = (batch.len(), cloud.shape().first(), dmap.shape().first());
            if cloud_n != Some(&n) || dmap_n != Some(&n) {
                return Err(nav_tensor::TensorError::Shape {
                    op: "nmfnet_forward",
                    detail: format!(
                        "batch sizes differ: rgb {:?}, cloud {:?}, dmap {:?}",
                        batch.rgb.shape(),
                        cloud.shape(),
                        dmap.shape()
                    ),
                }
                .into());
            }
            let cloud = b.input("cloud", cloud)?;
            let dmap = b.input("dmap", dmap)?;

            let f = b.trunk(Branch::Rgb, rgb)?;
            let rgb_feat = b.tape.global_avg_pool(f)?;
            let cloud_feat = b.pointnet(cloud)?;
            let fused = b.tape.concat(rgb_feat, cloud_feat, 1)?;
            let c = b.tape.shape(fused)?[1];
            let h = b.tape.reshape(fused, &[n, c, 1, 1])?;
            let h = b.conv("fuse.conv1", h, 1, 0)?;
            let h = b.bn("fuse.bn1", h)?;
            let h = b.tape.relu(h)?;
            let h = b.conv("fuse.conv2", h, 1, 0)?;
            let h = b.bn("fuse.bn2", h)?;
            let h = b.tape.relu(h)?;
            let c = b.tape.shape(h)?[1];
            let fusion_feat = b.tape.reshape(h, &[n, c])?;

            let f = b.trunk(Branch::Dmap, dmap)?;
            let dmap_feat = b.tape.global_avg_pool(f)?;
            let joint = b.tape.concat(fusion_feat, dmap_feat, 1)?;
            b.head(joint)
        }
    }
}

pub fn rgbnet_forward(weights: &ModelWeights, rgb: &Tensor, mode: Mode) -> Result<Tensor> {
    weights.expect_arch(Arch::Rgbnet)?;
    let batch = Batch {
        rgb: rgb.clone(),
        cloud: None,
        dmap: None,
    };
    run(weights, &batch, mode)
}

pub fn nmfnet_forward(weights: &ModelWeights, rgb: &Tensor, cloud: &Tensor, dmap: &Tensor, mode: Mode) -> Result<Tensor> {
    weights.expect_arch(Arch::Nmfnet)?;
    let batch = Batch {
        rgb: rgb.clone(),
        cloud: Some(cloud.clone()),
        dmap: Some(dmap.clone()),
    };
    run(weights, &batch, mode)
}

fn run(weights: &ModelWeights, batch: &Batch, mode: Mode) -> Result<Tensor> {
    let opts = ForwardOptions {
        mode,
        ..ForwardOptions::eval()
    };
    let f = forward(weights, batch, opts)?;
    Ok(f.tape.value(f.output)?.clone())
}

/// Runs one residual block whose weights are stored under `prefix`
/// (for example `"rgb.b2"`).
pub fn residual_block_forward(weights: &ModelWeights, prefix: &str, input: &Tensor, mode: Mode) -> Result<Tensor> {
    let opts = ForwardOptions {
        mode,
        ..ForwardOptions::eval()
    };
    let mut tape = Tape::new(opts.seed);
    let mut b = Builder::new(&mut tape, weights, opts);
    let x = b.input("x", input)?;
    let y = b.block(prefix, x)?;
    Ok(b.tape.value(y)?.clone())
}

/// Encodes one `[P, 3]` cloud with the set encoder of fusion weights.
pub fn pointnet_encode(weights: &ModelWeights, cloud: &Tensor, mode: Mode) -> Result<Tensor> {
    weights.expect_arch(Arch::Nmfnet)?;
    let opts = ForwardOptions {
        mode,
        ..ForwardOptions::eval()
    };
    let mut tape = Tape::new(opts.seed);
    let mut b = Builder::new(&mut tape, weights, opts);
    let p = cloud.shape().first().copied().unwrap_or(0);
    let batched = cloud.reshaped(&[1, p, cloud.len() / p.max(1)]).map_err(NetsError::from)?;
    let x = b.input("cloud", &batched)?;
    let y = b.pointnet(x)?;
    let feat = b.tape.value(y)?;
    Ok(feat.reshaped(&[feat.len()])?)
}

/// How an entry is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Zeros,
    Ones,
}

fn push_conv(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, cin: usize, cout: usize, k: usize) {
    out.push((format!("{p}.w"), vec![cout, cin, k, k], Init::He { fan_in: cin * k * k }));
    out.push((format!("{p}.b"), vec![cout], Init::Zeros));
}

fn push_dense(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, fin: usize, fout: usize) {
    out.push((format!("{p}.w"), vec![fout, fin], Init::He { fan_in: fin }));
    out.push((format!("{p}.b"), vec![fout], Init::Zeros));
}

/// The steering head starts at zero so the first predictions are 0.
fn push_head(out: &mut Vec<(String, Vec<usize>, Init)>, fin: usize) {
    out.push(("head.w".to_string(), vec![1, fin], Init::Zeros));
    out.push(("head.b".to_string(), vec![1], Init::Zeros));
}

fn push_bn(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, c: usize) {
    out.push((format!("{p}.gamma"), vec![c], Init::Ones));
    out.push((format!("{p}.beta"), vec![c], Init::Zeros));
    out.push((format!("{p}.running_mean"), vec![c], Init::Zeros));
    out.push((format!("{p}.running_var"), vec![c], Init::Ones));
}

fn push_trunk(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, cin: usize, widths: [usize; 3]) {
    push_conv(out, &format!("{p}.stem"), cin, widths[0], 5);
    let chans = [widths[0], widths[0], widths[1], widths[2]];
    for b in 1..=3 {
        let (ci, co) = (chans[b - 1], chans[b]);
        let q = format!("{p}.b{b}");
        push_bn(out, &format!("{q}.bn1"), ci);
        push_conv(out, &format!("{q}.conv1"), ci, co, 3);
        push_bn(out, &format!("{q}.bn2"), co);
        push_conv(out, &format!("{q}.conv2"), co, co, 3);
        push_conv(out, &format!("{q}.skip"), ci, co, 1);
    }
    push_bn(out, &format!("{p}.bn_out"), widths[2]);
}

/// Entry names, shapes and initialisers of an architecture, in order.
pub fn layout(arch: Arch, cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    push_trunk(&mut out, "rgb", 3, cfg.widths);
    match arch {
        Arch::Rgbnet => push_head(&mut out, cfg.rgb_feat()),
        Arch::Nmfnet => {
            let dims = [3, cfg.cloud_hidden[0], cfg.cloud_hidden[1], cfg.cloud_feat];
            for l in 1..=3 {
                push_dense(&mut out, &format!("cloud.fc{l}"), dims[l - 1], dims[l]);
                push_bn(&mut out, &format!("cloud.bn{l}"), dims[l]);
            }
            push_conv(&mut out, "fuse.conv1", cfg.rgb_feat() + cfg.cloud_feat, cfg.fusion[0], 1);
            push_bn(&mut out, "fuse.bn1", cfg.fusion[0]);
            push_conv(&mut out, "fuse.conv2", cfg.fusion[0], cfg.fusion[1], 1);
            push_bn(&mut out, "fuse.bn2", cfg.fusion[1]);
            push_trunk(&mut out, "dmap", 1, cfg.widths);
            push_head(&mut out, cfg.fusion_feat() + cfg.dmap_feat());
        }
    }
    out
}

/// He-normal weights, zero biases and head, identity batchnorm. Deterministic in `seed`.
pub fn init_weights(arch: Arch, cfg: &NetConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new(arch);
    for (name, shape, init) in layout(arch, cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        };
        w.insert(name, Tensor::new(shape, data)?);
    }
    Ok(w)
}

impl ModelWeights {
    /// Checks names and shapes against `layout(self.arch, cfg)`.
    pub fn check_layout(&self, cfg: &NetConfig) -> Result<()> {
        let expected = layout(self.arch, cfg);
        for (name, shape, _) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(NetsError::WeightShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.len() != expected.len() {
            let extra = self.iter().map(|(n, _)| n).find(|n| !expected.iter().any(|(e, _, _)| e == n));
            return Err(NetsError::Corrupt(format!("unexpected weight {:?}", extra.unwrap_or_default())));
        }
        Ok(())
    }
}

use crate::error::{shape_err, Result, TensorError};
use crate::layer::BatchNormStats;
use crate::par;
use crate::tape::{accumulate, Node, Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct BnSaved {
    x: usize,
    gamma: usize,
    beta: usize,
    outer: usize,
    channels: usize,
    inner: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

/// Elements per reduction work item; fixed so partial sums merge
/// identically with or without rayon.
const REDUCE_CHUNK: usize = 1 << 14;

/// Per-channel sums of `f(channel, a, b)` over an `[outer, C, inner]` layout.
fn channel_sums<F>(a: &[f32], b: &[f32], outer: usize, channels: usize, inner: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, f32, f32) -> f64 + Sync + Send,
{
    let row = channels * inner;
    let rows_per = (REDUCE_CHUNK / row.max(1)).max(1);
    let chunks = outer.div_ceil(rows_per);
    let partials = par::map(chunks, |ci| {
        let mut acc = vec![0f64; channels];
        for o in ci * rows_per..((ci + 1) * rows_per).min(outer) {
            for (c, slot) in acc.iter_mut().enumerate() {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    *slot += f(c, a[i], b[i]);
                }
            }
        }
        acc
    });
    let mut total = vec![0f64; channels];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err("batchnorm", format!("expected [N, C, ...], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    /// Batch normalization over axis 1 of `x` (`[N, C]` or `[N, C, H, W]`).
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` (`running = momentum * running + (1 - momentum) * batch`,
    /// unbiased variance). Eval mode uses `stats` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        eps: f32,
        momentum: f32,
        train: bool,
    ) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidLayer(format!("batchnorm eps {eps}")));
        }
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let (outer, channels, inner) = layout(self.nodes[xi].value.shape())?;
        for idx in [gi, bi] {
            if self.nodes[idx].value.shape() != [channels] {
                return shape_err("batchnorm", format!("parameter shape {:?}", self.nodes[idx].value.shape()));
            }
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return shape_err("batchnorm", "running statistics length");
        }
        if stats.mean.iter().chain(&stats.var).any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "batchnorm" });
        }
        let xd = self.nodes[xi].value.data();
        let m = outer * inner;
        let (mean, inv_std) = if train {
            if m == 0 {
                return Err(TensorError::Empty { op: "batchnorm" });
            }
            let sums = channel_sums(xd, xd, outer, channels, inner, |_, v, _| v as f64);
            let mean: Vec<f64> = sums.iter().map(|s| s / m as f64).collect();
            let sq = channel_sums(xd, xd, outer, channels, inner, |c, v, _| {
                let d = v as f64 - mean[c];
                d * d
            });
            let var: Vec<f64> = sq.iter().map(|s| s / m as f64).collect();
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let mom = momentum as f64;
            for c in 0..channels {
                stats.mean[c] = (mom * stats.mean[c] as f64 + (1.0 - mom) * mean[c]) as f32;
                stats.var[c] = (mom * stats.var[c] as f64 + (1.0 - mom) * var[c] * unbias) as f32;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean: Vec<f64> = stats.mean.iter().map(|&v| v as f64).collect();
            let inv_std: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (v as f64 + eps as f64).sqrt()).collect();
            (mean, inv_std)
        };
        let gd = self.nodes[gi].value.data();
        let bd = self.nodes[bi].value.data();
        let row = channels * inner;
        let mut out = vec![0f32; xd.len()];
        par::for_each_chunk_mut(&mut out, row.max(1), |o, chunk| {
            for c in 0..channels {
                let scale = gd[c] as f64 * inv_std[c];
                let shift = bd[c] as f64 - mean[c] * scale;
                let base = o * row + c * inner;
                for i in 0..inner {
                    chunk[c * inner + i] = (xd[base + i] as f64 * scale + shift) as f32;
                }
            }
        });
        let shape = self.nodes[xi].value.shape().to_vec();
        self.push(
            "batchnorm",
            Tensor::from_parts(shape, out),
            &[xi, gi, bi],
            Op::BatchNorm(BnSaved {
                x: xi,
                gamma: gi,
                beta: bi,
                outer,
                channels,
                inner,
                mean,
                inv_std,
                train,
            }),
        )
    }
}

pub(super) fn batchnorm_backward(nodes: &[Node], s: &BnSaved, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let xd = nodes[s.x].value.data();
    let gamma = nodes[s.gamma].value.data();
    let (outer, channels, inner) = (s.outer, s.channels, s.inner);
    let m = (outer * inner) as f64;
    let xhat = |c: usize, v: f32| (v as f64 - s.mean[c]) * s.inv_std[c];

    let sum_g = channel_sums(g, g, outer, channels, inner, |_, gv, _| gv as f64);
    let sum_gx = channel_sums(g, xd, outer, channels, inner, |c, gv, xv| gv as f64 * xhat(c, xv));

    if nodes[s.gamma].needs_grad {
        accumulate(nodes, grads, s.gamma, sum_gx.iter().map(|&v| v as f32).collect());
    }
    if nodes[s.beta].needs_grad {
        accumulate(nodes, grads, s.beta, sum_g.iter().map(|&v| v as f32).collect());
    }
    if nodes[s.x].needs_grad {
        // dx = k1 * g + k2 + k3 * xhat per channel
        let coeffs: Vec<(f64, f64, f64)> = (0..channels)
            .map(|c| {
                let k1 = gamma[c] as f64 * s.inv_std[c];
                if s.train {
                    (k1, -k1 * sum_g[c] / m, -k1 * sum_gx[c] / m)
                } else {
                    (k1, 0.0, 0.0)
                }
            })
            .collect();
        let row = channels * inner;
        let mut dx = vec![0f32; xd.len()];
        par::for_each_chunk_mut(&mut dx, row.max(1), |o, chunk| {
            for (c, &(k1, k2, k3)) in coeffs.iter().enumerate() {
                let base = o * row + c * inner;
                for i in 0..inner {
                    let v = k1 * g[base + i] as f64 + k2 + k3 * xhat(c, xd[base + i]);
                    chunk[c * inner + i] = v as f32;
                }
            }
        });
        accumulate(nodes, grads, s.x, dx);
    }
}

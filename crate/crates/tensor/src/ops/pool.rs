use crate::error::{shape_err, Result, TensorError};
use crate::layer::{nchw, pooled_extent};
use crate::tape::{accumulate, Node, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Max pooling over `k × k` windows; padded cells never win. Ties go to
    /// the lowest input index.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        if kernel == 0 || stride == 0 || pad >= kernel {
            return Err(TensorError::InvalidLayer(format!(
                "maxpool2d kernel {kernel} stride {stride} pad {pad}"
            )));
        }
        let xi = self.index(x)?;
        let [n, c, h, w] = nchw("maxpool2d", self.nodes[xi].value.shape())?;
        let oh = pooled_extent("maxpool2d", h, kernel, stride, pad)?;
        let ow = pooled_extent("maxpool2d", w, kernel, stride, pad)?;
        let xd = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best || best_idx == usize::MAX {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
        self.push(
            "maxpool2d",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[xi],
            Op::MaxPool2d { x: xi, argmax },
        )
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let [n, c, h, w] = nchw("globalavgpool", self.nodes[xi].value.shape())?;
        let area = h * w;
        if area == 0 {
            return Err(TensorError::Empty { op: "globalavgpool" });
        }
        let xd = self.nodes[xi].value.data();
        let out = xd
            .chunks(area)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as f32)
            .collect();
        self.push(
            "globalavgpool",
            Tensor::from_parts(vec![n, c], out),
            &[xi],
            Op::GlobalAvgPool { x: xi },
        )
    }

    /// Symmetric set reduction: feature-wise max over points.
    ///
    /// Accepts `[P, F] -> [F]` or batched `[B, P, F] -> [B, F]`. The gradient
    /// of each output flows to its argmax point (lowest index on ties).
    pub fn max_pool_set(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        let (batch, points, feats, out_shape) = match shape.as_slice() {
            [p, f] => (1, *p, *f, vec![*f]),
            [b, p, f] => (*b, *p, *f, vec![*b, *f]),
            _ => return shape_err("max_pool_set", format!("expected [P, F] or [B, P, F], got {shape:?}")),
        };
        if points == 0 {
            return Err(TensorError::Empty { op: "max_pool_set" });
        }
        let xd = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(batch * feats);
        let mut argmax = Vec::with_capacity(batch * feats);
        for b in 0..batch {
            let base = b * points * feats;
            let mut best: Vec<f32> = xd[base..base + feats].to_vec();
            let mut arg: Vec<usize> = (0..feats).map(|f| base + f).collect();
            for p in 1..points {
                let row = base + p * feats;
                for f in 0..feats {
                    if xd[row + f] > best[f] {
                        best[f] = xd[row + f];
                        arg[f] = row + f;
                    }
                }
            }
            out.extend(best);
            argmax.extend(arg.into_iter().map(|i| i as u32));
        }
        self.push(
            "max_pool_set",
            Tensor::from_parts(out_shape, out),
            &[xi],
            Op::MaxPoolSet { x: xi, argmax },
        )
    }
}

pub(super) fn scatter_argmax(nodes: &[Node], x: usize, argmax: &[u32], g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let mut dx = vec![0f32; nodes[x].value.len()];
    for (&i, &gv) in argmax.iter().zip(g) {
        dx[i as usize] += gv;
    }
    accumulate(nodes, grads, x, dx);
}

pub(super) fn gap_backward(nodes: &[Node], x: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let shape = nodes[x].value.shape();
    let area = shape[2] * shape[3];
    let inv = 1.0 / area as f64;
    let mut dx = Vec::with_capacity(nodes[x].value.len());
    for &gv in g {
        let v = (gv as f64 * inv) as f32;
        dx.extend(std::iter::repeat_n(v, area));
    }
    accumulate(nodes, grads, x, dx);
}

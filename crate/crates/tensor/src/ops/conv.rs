use crate::error::{shape_err, Result};
use crate::gemm::{matmul_into, widen, MatRef};
use crate::layer::{nchw, pooled_extent};
use crate::par;
use crate::tape::{accumulate, Node, Op, Tape, Var};
use crate::tensor::Tensor;

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image into a `patch × positions` column matrix.
    fn im2col(&self, x: &[f32]) -> Vec<f64> {
        let mut col = Vec::with_capacity(self.patch() * self.positions());
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            col.extend(std::iter::repeat_n(0.0, self.ow));
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        col.extend((0..self.ow).map(|ox| {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                src[ix as usize] as f64
                            } else {
                                0.0
                            }
                        }));
                    }
                }
            }
        }
        col
    }

    /// Folds a column matrix back onto an image, summing overlaps.
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut img = vec![0f64; self.c * self.h * self.w];
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                img[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geometry)> {
    let [n, c, h, wd] = nchw("conv2d", x)?;
    let [o, wc, kh, kw] = nchw("conv2d", w)?;
    if wc != c || kh != kw || kh == 0 || stride == 0 {
        return shape_err("conv2d", format!("input {x:?}, weight {w:?}, stride {stride}"));
    }
    let oh = pooled_extent("conv2d", h, kh, stride, pad)?;
    let ow = pooled_extent("conv2d", wd, kh, stride, pad)?;
    Ok((
        n,
        o,
        Geometry {
            c,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        },
    ))
}

impl Tape {
    /// 2-D cross-correlation with zero padding. `x: [N, C, H, W]`,
    /// `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let wi = self.index(w)?;
        let bi = b.map(|b| self.index(b)).transpose()?;
        let (n, o, geo) = geometry(self.nodes[xi].value.shape(), self.nodes[wi].value.shape(), stride, pad)?;
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [o] {
                return shape_err("conv2d", format!("bias {:?}, expected [{o}]", self.nodes[bi].value.shape()));
            }
        }
        let wf = widen(self.nodes[wi].value.data());
        let xd = self.nodes[xi].value.data();
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        let image = geo.c * geo.h * geo.w;
        let p = geo.positions();
        let mut out = vec![0f32; n * o * p];
        par::for_each_chunk_mut(&mut out, o * p, |s, chunk| {
            let col = geo.im2col(&xd[s * image..(s + 1) * image]);
            let mut acc = vec![0f64; o * p];
            matmul_into(
                MatRef::row_major(&wf, o, geo.patch()),
                MatRef::row_major(&col, geo.patch(), p),
                &mut acc,
                0.0,
            );
            for oc in 0..o {
                let bv = bias.map_or(0.0, |b| b[oc] as f64);
                for q in 0..p {
                    chunk[oc * p + q] = (acc[oc * p + q] + bv) as f32;
                }
            }
        });
        let shape = vec![n, o, geo.oh, geo.ow];
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            &inputs,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
                pad,
            },
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let (n, o, geo) =
        geometry(nodes[x].value.shape(), nodes[w].value.shape(), stride, pad).expect("validated in forward");
    let p = geo.positions();
    let k = geo.patch();
    let image = geo.c * geo.h * geo.w;
    let xd = nodes[x].value.data();
    let want_w = nodes[w].needs_grad;
    let want_x = nodes[x].needs_grad;
    let wf = if want_x { widen(nodes[w].value.data()) } else { Vec::new() };

    // Per-sample partial results, merged below in sample order.
    let per_sample = par::map(n, |s| {
        let gs = widen(&g[s * o * p..(s + 1) * o * p]);
        let dw = want_w.then(|| {
            let col = geo.im2col(&xd[s * image..(s + 1) * image]);
            let mut dw = vec![0f64; o * k];
            matmul_into(
                MatRef::row_major(&gs, o, p),
                MatRef::row_major(&col, k, p).t(),
                &mut dw,
                0.0,
            );
            dw
        });
        let dx = want_x.then(|| {
            let mut dcol = vec![0f64; k * p];
            matmul_into(
                MatRef::row_major(&wf, o, k).t(),
                MatRef::row_major(&gs, o, p),
                &mut dcol,
                0.0,
            );
            geo.col2im(&dcol)
        });
        (dw, dx)
    });

    if want_w {
        let mut total = vec![0f64; o * k];
        for (dw, _) in &per_sample {
            if let Some(dw) = dw {
                total.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            }
        }
        accumulate(nodes, grads, w, total.into_iter().map(|v| v as f32).collect());
    }
    if let Some(b) = b {
        if nodes[b].needs_grad {
            let mut db = vec![0f64; o];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    let base = (s * o + oc) * p;
                    *acc += g[base..base + p].iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            accumulate(nodes, grads, b, db.into_iter().map(|v| v as f32).collect());
        }
    }
    if want_x {
        let mut dx = Vec::with_capacity(n * image);
        for (_, d) in per_sample {
            dx.extend(d.expect("computed when x needs grad").into_iter().map(|v| v as f32));
        }
        accumulate(nodes, grads, x, dx);
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn ones_kernel_counts_window_cells() {
        let mut tape = Tape::new(0);
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let out = tape.value(y).unwrap();
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        let v = out.data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[4], 4.0);
        assert_eq!(v[20], 4.0);
        assert_eq!(v[24], 4.0);
        assert_eq!(v[2], 6.0);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(v[r * 5 + c], 9.0);
            }
        }
    }

    #[test]
    fn matches_direct_sliding_window() {
        // direct summation oracle on a random multi-channel case
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (n, c, h, w, o, k, s, pad) = (2, 3, 7, 6, 4, 3, 2, 1);
        let xs: Vec<f32> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ws: Vec<f32> = (0..o * c * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new(0);
        let xv = tape.constant(Tensor::from_slice(&[n, c, h, w], &xs).unwrap()).unwrap();
        let wv = tape.constant(Tensor::from_slice(&[o, c, k, k], &ws).unwrap()).unwrap();
        let y = tape.conv2d(xv, wv, None, s, pad).unwrap();
        let out = tape.value(y).unwrap();
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        assert_eq!((oh, ow), ((h + 2 * pad - k) / s + 1, (w + 2 * pad - k) / s + 1));
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0f64;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - pad as isize;
                                    let ix = (ox * s + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xs[((b * c + ic) * h + iy as usize) * w + ix as usize] as f64
                                        * ws[((oc * c + ic) * k + ki) * k + kj] as f64;
                                }
                            }
                        }
                        let got = out.data()[((b * o + oc) * oh + oy) * ow + ox] as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}

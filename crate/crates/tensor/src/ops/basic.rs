use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::gemm::{matmul_into, widen, MatRef};
use crate::par;
use crate::tape::{accumulate, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// Rows per work item for dense layers; fixed so parallel and sequential
/// builds produce identical sums.
const DENSE_ROW_CHUNK: usize = 512;

impl Tape {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let v = &self.nodes[xi].value;
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("relu", out, &[xi], Op::Relu { x: xi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("add", out, &[ai, bi], Op::Add { a: ai, b: bi })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let out = self.nodes[xi].value.reshaped(shape).map_err(|_| TensorError::Shape {
            op: "reshape",
            detail: format!("{:?} -> {:?}", self.nodes[xi].value.shape(), shape),
        })?;
        self.push("reshape", out, &[xi], Op::Reshape { x: xi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s: f64 = self.nodes[xi].value.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::from_parts(Vec::new(), vec![s as f32]);
        let v = self.push("sum", out, &[xi], Op::Sum { x: xi })?;
        self.set_wide(v, s);
        Ok(v)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)` so eval
    /// mode is the identity.
    pub fn dropout(&mut self, x: Var, rate: f32, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidLayer(format!("dropout rate {rate}")));
        }
        let xi = self.index(x)?;
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.nodes[xi].value.len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.gen::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let v = &self.nodes[xi].value;
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("dropout", out, &[xi], Op::Dropout { x: xi, mask })
    }

    /// Concatenation along `axis`. Shapes must agree on every other axis.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() != sb.len() || axis >= sa.len() {
            return shape_err("concat", format!("{sa:?} and {sb:?} on axis {axis}"));
        }
        for d in 0..sa.len() {
            if d != axis && sa[d] != sb[d] {
                return shape_err("concat", format!("{sa:?} and {sb:?} on axis {axis}"));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let a_inner = sa[axis] * tail;
        let b_inner = sb[axis] * tail;
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut data = Vec::with_capacity(outer * (a_inner + b_inner));
        for o in 0..outer {
            data.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
        }
        let out = Tensor::from_parts(shape, data);
        self.push(
            "concat",
            out,
            &[ai, bi],
            Op::Concat {
                a: ai,
                b: bi,
                outer,
                a_inner,
                b_inner,
            },
        )
    }

    /// `y = x Wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xi = self.index(x)?;
        let wi = self.index(w)?;
        let bi = b.map(|b| self.index(b)).transpose()?;
        let (sx, sw) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return shape_err("dense", format!("input {sx:?}, weight {sw:?}"));
        }
        let (n, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [fout] {
                return shape_err("dense", format!("bias {:?}, expected [{fout}]", self.nodes[bi].value.shape()));
            }
        }
        let wf = widen(self.nodes[wi].value.data());
        let xd = self.nodes[xi].value.data();
        let bias = bi.map(|bi| self.nodes[bi].value.data());
        let mut out = vec![0f32; n * fout];
        par::for_each_chunk_mut(&mut out, DENSE_ROW_CHUNK * fout, |ci, chunk| {
            let rows = chunk.len() / fout;
            let r0 = ci * DENSE_ROW_CHUNK;
            let xs = widen(&xd[r0 * fin..(r0 + rows) * fin]);
            let mut acc = vec![0f64; rows * fout];
            matmul_into(
                MatRef::row_major(&xs, rows, fin),
                MatRef::row_major(&wf, fout, fin).t(),
                &mut acc,
                0.0,
            );
            for r in 0..rows {
                for o in 0..fout {
                    let bv = bias.map_or(0.0, |b| b[o] as f64);
                    chunk[r * fout + o] = (acc[r * fout + o] + bv) as f32;
                }
            }
        });
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        let out = Tensor::from_parts(vec![n, fout], out);
        self.push("dense", out, &inputs, Op::Dense { x: xi, w: wi, b: bi })
    }

    /// Mean squared error `(1/m) Σ (pred - target)²` over equally sized tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = (self.index(pred)?, self.index(target)?);
        let (p, t) = (&self.nodes[pi].value, &self.nodes[ti].value);
        if p.len() != t.len() {
            return shape_err("mse", format!("{} predictions vs {} targets", p.len(), t.len()));
        }
        if p.is_empty() {
            return Err(TensorError::Empty { op: "mse" });
        }
        let m = p.len() as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let out = Tensor::from_parts(Vec::new(), vec![(s / m) as f32]);
        let v = self.push("mse", out, &[pi, ti], Op::Mse { pred: pi, target: ti })?;
        self.set_wide(v, s / m);
        Ok(v)
    }
}

pub(super) fn relu_backward(nodes: &[Node], x: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let xv = nodes[x].value.data();
    let d = xv.iter().zip(g).map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 }).collect();
    accumulate(nodes, grads, x, d);
}

pub(super) fn dropout_backward(nodes: &[Node], x: usize, mask: &[f32], g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let d = g.iter().zip(mask).map(|(a, m)| a * m).collect();
    accumulate(nodes, grads, x, d);
}

#[allow(clippy::too_many_arguments)]
pub(super) fn concat_backward(
    nodes: &[Node],
    a: usize,
    b: usize,
    outer: usize,
    a_inner: usize,
    b_inner: usize,
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let row = a_inner + b_inner;
    let mut ga = Vec::with_capacity(outer * a_inner);
    let mut gb = Vec::with_capacity(outer * b_inner);
    for o in 0..outer {
        ga.extend_from_slice(&g[o * row..o * row + a_inner]);
        gb.extend_from_slice(&g[o * row + a_inner..(o + 1) * row]);
    }
    accumulate(nodes, grads, a, ga);
    accumulate(nodes, grads, b, gb);
}

pub(super) fn dense_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: Option<usize>,
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let sx = nodes[x].value.shape();
    let (n, fin) = (sx[0], sx[1]);
    let fout = nodes[w].value.shape()[0];
    let xd = nodes[x].value.data();
    let chunks = n.div_ceil(DENSE_ROW_CHUNK);

    if nodes[w].needs_grad {
        let partials = par::map(chunks, |ci| {
            let r0 = ci * DENSE_ROW_CHUNK;
            let rows = DENSE_ROW_CHUNK.min(n - r0);
            let xs = widen(&xd[r0 * fin..(r0 + rows) * fin]);
            let gs = widen(&g[r0 * fout..(r0 + rows) * fout]);
            let mut dw = vec![0f64; fout * fin];
            matmul_into(
                MatRef::row_major(&gs, rows, fout).t(),
                MatRef::row_major(&xs, rows, fin),
                &mut dw,
                0.0,
            );
            dw
        });
        let mut total = vec![0f64; fout * fin];
        for p in &partials {
            total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        accumulate(nodes, grads, w, total.into_iter().map(|v| v as f32).collect());
    }
    if let Some(b) = b {
        if nodes[b].needs_grad {
            let mut db = vec![0f64; fout];
            for r in 0..n {
                for o in 0..fout {
                    db[o] += g[r * fout + o] as f64;
                }
            }
            accumulate(nodes, grads, b, db.into_iter().map(|v| v as f32).collect());
        }
    }
    if nodes[x].needs_grad {
        let wf = widen(nodes[w].value.data());
        let mut dx = vec![0f32; n * fin];
        par::for_each_chunk_mut(&mut dx, DENSE_ROW_CHUNK * fin, |ci, chunk| {
            let rows = chunk.len() / fin;
            let r0 = ci * DENSE_ROW_CHUNK;
            let gs = widen(&g[r0 * fout..(r0 + rows) * fout]);
            let mut acc = vec![0f64; rows * fin];
            matmul_into(
                MatRef::row_major(&gs, rows, fout),
                MatRef::row_major(&wf, fout, fin),
                &mut acc,
                0.0,
            );
            chunk.iter_mut().zip(&acc).for_each(|(d, a)| *d = *a as f32);
        });
        accumulate(nodes, grads, x, dx);
    }
}

pub(super) fn mse_backward(nodes: &[Node], pred: usize, target: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let (p, t) = (nodes[pred].value.data(), nodes[target].value.data());
    let m = p.len() as f64;
    let scale = 2.0 * g[0] as f64 / m;
    let diff = |sign: f64| -> Vec<f32> {
        p.iter()
            .zip(t)
            .map(|(&a, &b)| (sign * scale * (a as f64 - b as f64)) as f32)
            .collect()
    };
    if nodes[pred].needs_grad {
        accumulate(nodes, grads, pred, diff(1.0));
    }
    if nodes[target].needs_grad {
        accumulate(nodes, grads, target, diff(-1.0));
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new(0);
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new(3);
        let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0])).unwrap();
        let y = tape.dropout(x, 0.5, false).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0, -2.0, 3.0, 4.0]);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut tape = Tape::new(3);
        let x = tape.constant(Tensor::full(&[1000], 1.0)).unwrap();
        let y = tape.dropout(x, 0.5, true).unwrap();
        let v = tape.value(y).unwrap().data();
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
        let kept = v.iter().filter(|&&a| a > 0.0).count();
        assert!((400..600).contains(&kept), "kept {kept}");
    }

    #[test]
    fn concat_feature_axis() {
        let mut tape = Tape::new(0);
        let a = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[1], &[3.0])).unwrap();
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut tape = Tape::new(0);
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let e = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        let c = tape.concat(a, e, 1).unwrap();
        assert_eq!(tape.value(c).unwrap(), tape.value(a).unwrap());
    }

    #[test]
    fn concat_rejects_mismatch() {
        let mut tape = Tape::new(0);
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        assert!(tape.concat(a, b, 1).is_err());
    }

    #[test]
    fn concat_sum_gradient_is_ones() {
        let mut tape = Tape::new(0);
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.param(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let c = tape.concat(a, b, 1).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.get(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::new(0);
        let p = tape.param(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.constant(t(&[2], &[1.0, 3.0])).unwrap();
        let l = tape.mse(p, y).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), Some(5.0));

        let mut tape = Tape::new(0);
        let p = tape.param(t(&[1], &[0.0])).unwrap();
        let y = tape.constant(t(&[1], &[2.0])).unwrap();
        let l = tape.mse(p, y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &[-4.0]);
    }

    #[test]
    fn mse_length_mismatch() {
        let mut tape = Tape::new(0);
        let p = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(tape.mse(p, y).is_err());
    }

    #[test]
    fn dense_forward() {
        let mut tape = Tape::new(0);
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let w = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let b = tape.constant(t(&[3], &[0.5, 0.0, -1.0])).unwrap();
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.5, 2.0, 2.0]);
    }
}

//! Forward and adjoint implementations of every taped operation.

mod basic;
mod conv;
pub(crate) mod norm;
mod layer;
mod pool;

use crate::tape::{Node, Op};

pub(crate) fn backward_node(nodes: &[Node], i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => conv::conv2d_backward(nodes, *x, *w, *b, *stride, *pad, g, grads),
        Op::BatchNorm(saved) => norm::batchnorm_backward(nodes, saved, g, grads),
        Op::Relu { x } => basic::relu_backward(nodes, *x, g, grads),
        Op::Dense { x, w, b } => basic::dense_backward(nodes, *x, *w, *b, g, grads),
        Op::Dropout { x, mask } => basic::dropout_backward(nodes, *x, mask, g, grads),
        Op::MaxPool2d { x, argmax } => pool::scatter_argmax(nodes, *x, argmax, g, grads),
        Op::GlobalAvgPool { x } => pool::gap_backward(nodes, *x, g, grads),
        Op::MaxPoolSet { x, argmax } => pool::scatter_argmax(nodes, *x, argmax, g, grads),
        Op::Concat { a, b, outer, a_inner, b_inner } => {
            basic::concat_backward(nodes, *a, *b, *outer, *a_inner, *b_inner, g, grads)
        }
        Op::Add { a, b } => {
            crate::tape::accumulate(nodes, grads, *a, g.to_vec());
            crate::tape::accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Reshape { x } => crate::tape::accumulate(nodes, grads, *x, g.to_vec()),
        Op::Mse { pred, target } => basic::mse_backward(nodes, *pred, *target, g, grads),
        Op::Sum { x } => {
            let n = nodes[*x].value.len();
            crate::tape::accumulate(nodes, grads, *x, vec![g[0]; n]);
        }
    }
}

use crate::error::{Result, TensorError};
use crate::layer::{BatchNormStats, LayerSpec, Mode};
use crate::tape::{Tape, Var};

impl Tape {
    /// Applies one layer of the vocabulary. `params` follow
    /// [`LayerSpec::param_shapes`] order; batchnorm also needs `stats`.
    pub fn layer_forward(
        &mut self,
        spec: &LayerSpec,
        input: Var,
        params: &[Var],
        stats: Option<&mut BatchNormStats>,
        mode: Mode,
    ) -> Result<Var> {
        let in_shape = self.shape(input)?.to_vec();
        let expected_out = spec.output_shape(&in_shape)?;
        let wanted = spec.param_shapes();
        if params.len() != wanted.len() {
            return Err(TensorError::InvalidLayer(format!(
                "{} expects {} parameters, got {}",
                spec.kind(),
                wanted.len(),
                params.len()
            )));
        }
        for (&p, (name, shape)) in params.iter().zip(&wanted) {
            if self.shape(p)? != shape.as_slice() {
                return crate::error::shape_err(
                    "layer_forward",
                    format!("{} parameter {name}: expected {shape:?}, got {:?}", spec.kind(), self.shape(p)?),
                );
            }
        }
        let train = mode == Mode::Train;
        let out = match *spec {
            LayerSpec::Conv2d { stride, pad, .. } => self.conv2d(input, params[0], Some(params[1]), stride, pad)?,
            LayerSpec::BatchNorm { eps, momentum, .. } => {
                let stats = stats.ok_or_else(|| TensorError::InvalidLayer("batchnorm needs running statistics".into()))?;
                self.batchnorm(input, params[0], params[1], stats, eps, momentum, train)?
            }
            LayerSpec::Relu => self.relu(input)?,
            LayerSpec::Dense { .. } => self.dense(input, params[0], Some(params[1]))?,
            LayerSpec::Dropout { rate } => self.dropout(input, rate, train)?,
            LayerSpec::MaxPool2d { kernel, stride, pad } => self.maxpool2d(input, kernel, stride, pad)?,
            LayerSpec::GlobalAvgPool => self.global_avg_pool(input)?,
        };
        debug_assert_eq!(self.shape(out)?, expected_out.as_slice());
        Ok(out)
    }
}

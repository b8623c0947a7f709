use crate::error::{Result, TensorError};

/// Forward-pass mode. Eval makes dropout the identity and batchnorm use its
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Hyperparameters of one layer in the supported vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
        momentum: f32,
    },
    Relu,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f32,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "globalavgpool",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::InvalidLayer(msg));
        match *self {
            LayerSpec::Conv2d { kernel, stride, in_channels, out_channels, .. } => {
                if kernel == 0 || stride == 0 {
                    return bad(format!("conv2d kernel {kernel} stride {stride}"));
                }
                if in_channels == 0 || out_channels == 0 {
                    return bad("conv2d with zero channels".into());
                }
            }
            LayerSpec::MaxPool2d { kernel, stride, pad } => {
                if kernel == 0 || stride == 0 {
                    return bad(format!("maxpool2d kernel {kernel} stride {stride}"));
                }
                if pad >= kernel {
                    return bad(format!("maxpool2d pad {pad} >= kernel {kernel}"));
                }
            }
            LayerSpec::BatchNorm { eps, momentum, .. } => {
                if !(eps > 0.0) {
                    return bad(format!("batchnorm eps {eps}"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("batchnorm momentum {momentum}"));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate}"));
                }
            }
            LayerSpec::Dense { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return bad("dense with zero features".into());
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
        }
        Ok(())
    }

    /// Names and shapes of the trainable parameters, in binding order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                ("w", vec![out_channels, in_channels, kernel, kernel]),
                ("b", vec![out_channels]),
            ],
            LayerSpec::BatchNorm { channels, .. } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            LayerSpec::Dense { in_features, out_features } => vec![
                ("w", vec![out_features, in_features]),
                ("b", vec![out_features]),
            ],
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let op = self.kind();
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad } => {
                let [n, c, h, w] = nchw(op, input)?;
                if c != in_channels {
                    return crate::error::shape_err(op, format!("expected {in_channels} channels, got {c}"));
                }
                let oh = pooled_extent(op, h, kernel, stride, pad)?;
                let ow = pooled_extent(op, w, kernel, stride, pad)?;
                Ok(vec![n, out_channels, oh, ow])
            }
            LayerSpec::MaxPool2d { kernel, stride, pad } => {
                let [n, c, h, w] = nchw(op, input)?;
                let oh = pooled_extent(op, h, kernel, stride, pad)?;
                let ow = pooled_extent(op, w, kernel, stride, pad)?;
                Ok(vec![n, c, oh, ow])
            }
            LayerSpec::GlobalAvgPool => {
                let [n, c, _, _] = nchw(op, input)?;
                Ok(vec![n, c])
            }
            LayerSpec::Dense { in_features, out_features } => {
                if input.len() != 2 || input[1] != in_features {
                    return crate::error::shape_err(op, format!("expected [N, {in_features}], got {input:?}"));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.len() < 2 || input[1] != channels {
                    return crate::error::shape_err(op, format!("expected channel axis {channels}, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}

pub(crate) fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        _ => crate::error::shape_err(op, format!("expected N x C x H x W, got {shape:?}")),
    }
}

/// floor((in + 2 pad - kernel) / stride) + 1
pub fn pooled_extent(op: &'static str, input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return crate::error::shape_err(op, format!("kernel {kernel} exceeds padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Running statistics of a batchnorm layer. Train-mode forwards fold the
/// batch statistics into these with the layer momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_arithmetic() {
        let spec = LayerSpec::conv2d(3, 8, 5, 2, 2);
        assert_eq!(spec.output_shape(&[2, 3, 48, 64]).unwrap(), vec![2, 8, 24, 32]);
        let spec = LayerSpec::conv2d(1, 1, 3, 2, 1);
        assert_eq!(spec.output_shape(&[1, 1, 3, 3]).unwrap(), vec![1, 1, 2, 2]);
    }

    #[test]
    fn invalid_specs() {
        assert!(LayerSpec::conv2d(1, 1, 0, 1, 0).validate().is_err());
        assert!(LayerSpec::conv2d(1, 1, 3, 0, 0).validate().is_err());
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { rate: 0.0 }.validate().is_ok());
        assert!(LayerSpec::BatchNorm { channels: 2, eps: 0.0, momentum: 0.9 }.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_error() {
        assert!(LayerSpec::conv2d(3, 8, 3, 1, 1).output_shape(&[1, 4, 8, 8]).is_err());
        assert!(LayerSpec::dense(4, 2).output_shape(&[3, 5]).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::graph::{conv_out_len, conv_transpose_out_len, ConvParams, Graph, NodeId};
use super::params::{uniform_init, Binder, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer vocabulary of the codec and its discriminators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    DepthwiseConv1d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    ConvTranspose1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    LeakyRelu {
        negative_slope: f64,
    },
    Gelu,
    LayerNorm {
        channels: usize,
    },
}

/// A named layer; parameters live in a [`ParamStore`] under `"{name}.weight"`,
/// `"{name}.bias"`, `"{name}.gamma"`, `"{name}.beta"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Padding that keeps length unchanged at stride 1 (odd kernels).
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    /// Stride-1 conv with "same" padding.
    pub fn conv_same(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv1d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride: 1,
                padding: same_padding(kernel, dilation),
                dilation,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("layer `{}`: {what}", self.name)));
        match self.kind {
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                dilation,
                ..
            } => {
                if kernel == 0 || stride == 0 || dilation == 0 {
                    return bad("kernel, stride and dilation must be >= 1");
                }
                if in_channels == 0 || out_channels == 0 {
                    return bad("channel counts must be >= 1");
                }
            }
            LayerKind::DepthwiseConv1d {
                channels,
                kernel,
                stride,
                dilation,
                ..
            } => {
                if kernel == 0 || stride == 0 || dilation == 0 || channels == 0 {
                    return bad("kernel, stride, dilation and channels must be >= 1");
                }
            }
            LayerKind::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                    return bad("kernel, stride and channel counts must be >= 1");
                }
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad("feature counts must be >= 1");
                }
            }
            LayerKind::LeakyRelu { negative_slope } => {
                if !negative_slope.is_finite() {
                    return bad("negative slope must be finite");
                }
            }
            LayerKind::Gelu => {}
            LayerKind::LayerNorm { channels } => {
                if channels == 0 {
                    return bad("channels must be >= 1");
                }
            }
        }
        Ok(())
    }

    /// `(suffix, shape, fan_in)`; fan_in 0 marks an affine LayerNorm tensor.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        match self.kind {
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel], in_channels * kernel),
                ("bias", vec![out_channels], in_channels * kernel),
            ],
            LayerKind::DepthwiseConv1d { channels, kernel, .. } => vec![
                ("weight", vec![channels, 1, kernel], kernel),
                ("bias", vec![channels], kernel),
            ],
            LayerKind::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![in_channels, out_channels, kernel], out_channels * kernel),
                ("bias", vec![out_channels], out_channels * kernel),
            ],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features], in_features),
                ("bias", vec![out_features], in_features),
            ],
            LayerKind::LayerNorm { channels } => vec![("gamma", vec![channels], 0), ("beta", vec![channels], 0)],
            LayerKind::LeakyRelu { .. } | LayerKind::Gelu => vec![],
        }
    }

    pub fn param_name(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    /// Seeded Kaiming-uniform weights (bound `1/sqrt(fan_in)`); LayerNorm
    /// starts at identity.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.validate()?;
        for (suffix, shape, fan_in) in self.param_shapes() {
            let name = self.param_name(suffix);
            let t = match (suffix, fan_in) {
                ("gamma", 0) => Tensor::full(shape, 1.0),
                ("beta", 0) => Tensor::zeros(shape),
                _ => uniform_init(&name, &shape, 1.0 / (fan_in as f32).sqrt(), seed),
            };
            store.insert(name, t);
        }
        Ok(())
    }

    /// Output length along the time axis for an input of `len` steps.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        match self.kind {
            LayerKind::Conv1d {
                kernel,
                stride,
                padding,
                dilation,
                ..
            }
            | LayerKind::DepthwiseConv1d {
                kernel,
                stride,
                padding,
                dilation,
                ..
            } => conv_out_len(
                len,
                kernel,
                ConvParams {
                    stride,
                    padding,
                    dilation,
                    groups: 1,
                },
            ),
            LayerKind::ConvTranspose1d {
                kernel,
                stride,
                padding,
                ..
            } => {
                if len == 0 {
                    None
                } else {
                    conv_transpose_out_len(len, kernel, stride, padding)
                }
            }
            _ => Some(len),
        }
    }

    fn expected_input(&self, input: &[usize]) -> Result<()> {
        let (rank_ok, ch_axis, ch) = match self.kind {
            LayerKind::Conv1d { in_channels, .. } | LayerKind::ConvTranspose1d { in_channels, .. } => {
                (input.len() == 3, 1, Some(in_channels))
            }
            LayerKind::DepthwiseConv1d { channels, .. } => (input.len() == 3, 1, Some(channels)),
            LayerKind::Linear { in_features, .. } => (!input.is_empty(), input.len().saturating_sub(1), Some(in_features)),
            LayerKind::LayerNorm { channels } => (
                input.len() >= 2,
                if input.len() == 3 { 1 } else { input.len().saturating_sub(1) },
                Some(channels),
            ),
            LayerKind::LeakyRelu { .. } | LayerKind::Gelu => (true, 0, None),
        };
        let ok = rank_ok && ch.map_or(true, |c| input.get(ch_axis) == Some(&c));
        if !ok {
            let mut expected = input.to_vec();
            if let Some(c) = ch {
                if let Some(slot) = expected.get_mut(ch_axis) {
                    *slot = c;
                }
            }
            return Err(Error::shape(format!("layer `{}` ({:?})", self.name, self.kind), &expected, input));
        }
        if let Some(l) = input.last() {
            if self.out_len(*l).map_or(true, |o| o == 0) {
                return Err(Error::shape(
                    format!("layer `{}` input length too short", self.name),
                    &[self.min_len()],
                    input,
                ));
            }
        }
        Ok(())
    }

    fn min_len(&self) -> usize {
        (1..100_000).find(|&l| self.out_len(l).is_some_and(|o| o > 0)).unwrap_or(0)
    }

    /// Record this layer on `g`. Conv layers take `[B, C, L]`; linear acts on
    /// the last axis; layer norm normalizes axis 1 of a rank-3 input and the
    /// last axis otherwise.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, binder: &mut Binder<'_>, x: NodeId) -> Result<NodeId> {
        self.validate()?;
        self.expected_input(g.shape(x))?;
        let name_of = |s: &str| self.param_name(s);
        match self.kind {
            LayerKind::Conv1d {
                stride,
                padding,
                dilation,
                ..
            } => {
                let w = binder.bind(g, &name_of("weight"))?;
                let b = binder.bind(g, &name_of("bias"))?;
                g.conv1d(
                    x,
                    w,
                    Some(b),
                    ConvParams {
                        stride,
                        padding,
                        dilation,
                        groups: 1,
                    },
                )
            }
            LayerKind::DepthwiseConv1d {
                channels,
                stride,
                padding,
                dilation,
                ..
            } => {
                let w = binder.bind(g, &name_of("weight"))?;
                let b = binder.bind(g, &name_of("bias"))?;
                g.conv1d(
                    x,
                    w,
                    Some(b),
                    ConvParams {
                        stride,
                        padding,
                        dilation,
                        groups: channels,
                    },
                )
            }
            LayerKind::ConvTranspose1d { stride, padding, .. } => {
                let w = binder.bind(g, &name_of("weight"))?;
                let b = binder.bind(g, &name_of("bias"))?;
                g.conv_transpose1d(x, w, Some(b), stride, padding)
            }
            LayerKind::Linear { .. } => {
                let w = binder.bind(g, &name_of("weight"))?;
                let b = binder.bind(g, &name_of("bias"))?;
                g.linear(x, w, Some(b))
            }
            LayerKind::LeakyRelu { negative_slope } => Ok(g.leaky_relu(x, T::lit(negative_slope))),
            LayerKind::Gelu => Ok(g.gelu(x)),
            LayerKind::LayerNorm { .. } => {
                let gamma = binder.bind(g, &name_of("gamma"))?;
                let beta = binder.bind(g, &name_of("beta"))?;
                let rank = g.shape(x).len();
                let axis = if rank == 3 { 1 } else { rank - 1 };
                g.layer_norm(x, gamma, beta, axis, LAYER_NORM_EPS)
            }
        }
    }
}

/// Evaluate one layer on a concrete input without keeping the graph.
pub fn forward(layer: &LayerSpec, params: &ParamStore, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let mut binder = Binder::new(params);
    let x = g.constant(input);
    let y = layer.apply(&mut g, &mut binder, x)?;
    Ok(g.tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(layer: &LayerSpec, values: &[(&str, Vec<f32>)]) -> ParamStore {
        let mut s = ParamStore::new();
        layer.init(&mut s, 0).unwrap();
        for (suffix, v) in values {
            let name = layer.param_name(suffix);
            let shape = s.get(&name).unwrap().shape().to_vec();
            s.insert(name, Tensor::new(shape, v.clone()).unwrap());
        }
        s
    }

    #[test]
    fn identity_kernel_conv() {
        let layer = LayerSpec::new(
            "c",
            LayerKind::Conv1d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                stride: 1,
                padding: 1,
                dilation: 1,
            },
        );
        let s = store_with(&layer, &[("weight", vec![0.0, 1.0, 0.0]), ("bias", vec![0.0])]);
        let x = Tensor::new([1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(forward(&layer, &s, &x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_linear_yields_bias() {
        let layer = LayerSpec::new(
            "l",
            LayerKind::Linear {
                in_features: 3,
                out_features: 2,
            },
        );
        let s = store_with(&layer, &[("weight", vec![0.0; 6]), ("bias", vec![0.5, -1.5])]);
        let x = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        assert_eq!(forward(&layer, &s, &x).unwrap().data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn transposed_conv_of_ones() {
        let layer = LayerSpec::new(
            "t",
            LayerKind::ConvTranspose1d {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        );
        let s = store_with(&layer, &[("weight", vec![1.0, 1.0]), ("bias", vec![0.0])]);
        let x = Tensor::new([1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(forward(&layer, &s, &x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let layer = LayerSpec::conv_same("enc.stem", 4, 8, 7, 1);
        let mut s = ParamStore::new();
        layer.init(&mut s, 0).unwrap();
        let err = forward(&layer, &s, &Tensor::zeros([1, 3, 16])).unwrap_err().to_string();
        assert!(err.contains("enc.stem"), "{err}");
        assert!(err.contains("[1, 4, 16]") && err.contains("[1, 3, 16]"), "{err}");
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let layer = LayerSpec::new(
            "bad",
            LayerKind::Conv1d {
                in_channels: 1,
                out_channels: 1,
                kernel: 0,
                stride: 1,
                padding: 0,
                dilation: 1,
            },
        );
        assert!(layer.validate().is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let layer = LayerSpec::conv_same("c", 3, 5, 7, 2);
        let mut s = ParamStore::new();
        layer.init(&mut s, 9).unwrap();
        let x = super::super::params::uniform_init("x", &[2, 3, 40], 1.0, 3);
        assert_eq!(forward(&layer, &s, &x).unwrap(), forward(&layer, &s, &x).unwrap());
    }
}

//! Reference architectures and weight initialisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Network, Param};
use crate::rng;
use crate::store::{ConvMeta, LayerDesc, LayerKind, ModelManifest};
use crate::{Error, Result};

/// The built-in reference networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Dense layers with ReLU between them.
    Mlp { hidden: Vec<usize> },
    /// conv3x3(8) → conv3x3(8) → maxpool → dense(32) → dense(classes).
    Cnn,
    /// Like `Cnn` with a point-wise conv(8→16) before pooling.
    CnnPw,
}

impl Arch {
    pub fn manifest(&self, input_shape: &[usize], num_classes: usize) -> Result<ModelManifest> {
        let layers = match self {
            Arch::Mlp { hidden } => {
                let mut layers = vec![LayerDesc::op("flatten", LayerKind::Flatten)];
                for (i, _) in hidden.iter().enumerate() {
                    layers.push(LayerDesc::dense(format!("fc{}", i + 1)));
                    layers.push(LayerDesc::op(format!("relu{}", i + 1), LayerKind::ReLU));
                }
                layers.push(LayerDesc::dense(format!("fc{}", hidden.len() + 1)));
                layers
            }
            Arch::Cnn | Arch::CnnPw => {
                if input_shape.len() != 3 {
                    return Err(Error::arg("convolutional nets need [C, H, W] inputs"));
                }
                let c = input_shape[0];
                let conv = |c_in, c_out, k| ConvMeta { k, c_in, c_out, stride: 1, padding: k / 2 };
                let mut layers = vec![
                    LayerDesc::conv("conv1", conv(c, 8, 3)),
                    LayerDesc::op("relu1", LayerKind::ReLU),
                    LayerDesc::conv("conv2", conv(8, 8, 3)),
                    LayerDesc::op("relu2", LayerKind::ReLU),
                ];
                if *self == Arch::CnnPw {
                    layers.push(LayerDesc::conv("pw", conv(8, 16, 1)));
                    layers.push(LayerDesc::op("relu_pw", LayerKind::ReLU));
                }
                layers.extend([
                    LayerDesc::op("pool", LayerKind::MaxPool2x2),
                    LayerDesc::op("flatten", LayerKind::Flatten),
                    LayerDesc::dense("fc1"),
                    LayerDesc::op("relu3", LayerKind::ReLU),
                    LayerDesc::dense("fc2"),
                ]);
                layers
            }
        };
        Ok(ModelManifest { layers, input_shape: input_shape.to_vec(), num_classes, act_quant: None })
    }

    /// Builds a freshly initialised network.
    pub fn build(&self, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
        let manifest = self.manifest(input_shape, num_classes)?;
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        let hidden: &[usize] = match self {
            Arch::Mlp { hidden } => hidden,
            _ => &[],
        };
        let mut dense_idx = 0;
        for layer in &manifest.layers {
            match layer.kind {
                LayerKind::Dense => {
                    let n_in: usize = shape.iter().product();
                    let n_out = match self {
                        Arch::Mlp { .. } => hidden.get(dense_idx).copied().unwrap_or(num_classes),
                        _ => {
                            if layer.name == "fc1" {
                                32
                            } else {
                                num_classes
                            }
                        }
                    };
                    dense_idx += 1;
                    params.push(init_weight(layer, vec![n_out, n_in], n_in, seed));
                    params.push(zero_bias(layer, n_out));
                    shape = vec![n_out];
                }
                LayerKind::Conv2D => {
                    let m = layer.conv_meta.unwrap();
                    let fan_in = m.c_in * m.k * m.k;
                    params.push(init_weight(layer, vec![m.c_out, m.c_in, m.k, m.k], fan_in, seed));
                    params.push(zero_bias(layer, m.c_out));
                    let h = (shape[1] + 2 * m.padding - m.k) / m.stride + 1;
                    let w = (shape[2] + 2 * m.padding - m.k) / m.stride + 1;
                    shape = vec![m.c_out, h, w];
                }
                LayerKind::MaxPool2x2 => shape = vec![shape[0], shape[1] / 2, shape[2] / 2],
                LayerKind::Flatten => shape = vec![shape.iter().product()],
                LayerKind::ReLU | LayerKind::Softmax => {}
            }
        }
        Network::from_params(manifest, params)
    }
}

/// Uniform in ±sqrt(6 / fan_in), drawn from a per-tensor stream.
fn init_weight(layer: &LayerDesc, shape: Vec<usize>, fan_in: usize, seed: u64) -> Param {
    let name = layer.weight_ref.clone().unwrap();
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng::stream(seed, &["init".into(), (&name).into()]);
    let n = shape.iter().product();
    let values = (0..n).map(|_| f64::from(rng.random_range(-bound..bound) as f32)).collect();
    Param { name, shape, values }
}

fn zero_bias(layer: &LayerDesc, n: usize) -> Param {
    Param { name: layer.bias_ref.clone().unwrap(), shape: vec![n], values: vec![0.0; n] }
}

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::TensorRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerKind {
    Dense,
    Conv2D,
    ReLU,
    MaxPool2x2,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "Dense",
            LayerKind::Conv2D => "Conv2D",
            LayerKind::ReLU => "ReLU",
            LayerKind::MaxPool2x2 => "MaxPool2x2",
            LayerKind::Flatten => "Flatten",
            LayerKind::Softmax => "Softmax",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2D)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<String> for LayerKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Ok(match s.as_str() {
            "Dense" => LayerKind::Dense,
            "Conv2D" => LayerKind::Conv2D,
            "ReLU" => LayerKind::ReLU,
            "MaxPool2x2" => LayerKind::MaxPool2x2,
            "Flatten" => LayerKind::Flatten,
            "Softmax" => LayerKind::Softmax,
            _ => return Err(Error::UnsupportedLayer(s)),
        })
    }
}

impl From<LayerKind> for String {
    fn from(k: LayerKind) -> String {
        k.as_str().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMeta {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_meta: Option<ConvMeta>,
    #[serde(default)]
    pub pointwise: bool,
}

impl LayerDesc {
    /// A parameter-free layer (activation, pooling, flatten, softmax).
    pub fn op(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerDesc {
            name: name.into(),
            kind,
            weight_ref: None,
            bias_ref: None,
            conv_meta: None,
            pointwise: false,
        }
    }

    /// A dense layer with tensors `<name>.weight` and `<name>.bias`.
    pub fn dense(name: impl Into<String>) -> Self {
        let name = name.into();
        LayerDesc {
            weight_ref: Some(format!("{name}.weight")),
            bias_ref: Some(format!("{name}.bias")),
            ..LayerDesc::op(name, LayerKind::Dense)
        }
    }

    /// A convolution with tensors `<name>.weight` and `<name>.bias`.
    pub fn conv(name: impl Into<String>, meta: ConvMeta) -> Self {
        let name = name.into();
        LayerDesc {
            weight_ref: Some(format!("{name}.weight")),
            bias_ref: Some(format!("{name}.bias")),
            conv_meta: Some(meta),
            pointwise: meta.k == 1,
            ..LayerDesc::op(name, LayerKind::Conv2D)
        }
    }
}

/// Uniform activation quantization applied after every ReLU listed in `clips`
/// (range `[0, clip]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub bits: u32,
    pub clips: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layers: Vec<LayerDesc>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_quant: Option<ActQuant>,
}

impl ModelManifest {
    /// Checks tensor references and shape composition. Returns the output
    /// shape of every layer.
    pub fn validate(&self, tensors: &[TensorRecord]) -> Result<Vec<Vec<usize>>> {
        let bad = |msg: String| Error::InvalidManifest(msg);
        if self.num_classes == 0 {
            return Err(bad("num_classes must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(bad(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut by_name: HashMap<&str, &TensorRecord> = HashMap::new();
        for t in tensors {
            if by_name.insert(t.name.as_str(), t).is_some() {
                return Err(bad(format!("tensor `{}` appears twice", t.name)));
            }
        }
        let mut names = std::collections::HashSet::new();
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(bad(format!("layer name `{}` repeated", layer.name)));
            }
            let lookup = |r: &Option<String>| -> Result<Option<&TensorRecord>> {
                match r {
                    None => Ok(None),
                    Some(n) => by_name
                        .get(n.as_str())
                        .copied()
                        .map(Some)
                        .ok_or_else(|| bad(format!("layer `{}` references missing tensor `{n}`", layer.name))),
                }
            };
            let weight = lookup(&layer.weight_ref)?;
            let bias = lookup(&layer.bias_ref)?;
            if layer.kind.has_weights() != weight.is_some() {
                return Err(bad(format!("layer `{}` ({}) weight reference mismatch", layer.name, layer.kind)));
            }
            if !layer.kind.has_weights() && bias.is_some() {
                return Err(bad(format!("layer `{}` cannot have a bias", layer.name)));
            }
            let pointwise = layer.kind == LayerKind::Conv2D && layer.conv_meta.is_some_and(|m| m.k == 1);
            if layer.pointwise != pointwise {
                return Err(bad(format!("layer `{}` pointwise flag inconsistent", layer.name)));
            }
            shape = match layer.kind {
                LayerKind::Dense => {
                    let w = weight.unwrap();
                    let in_dim: usize = shape.iter().product();
                    if shape.len() != 1 || w.shape().len() != 2 || w.shape()[1] != in_dim {
                        return Err(Error::shape(format!(
                            "dense `{}` weight {:?} does not accept input {:?}",
                            layer.name,
                            w.shape(),
                            shape
                        )));
                    }
                    let out = w.shape()[0];
                    check_bias(layer, bias, out)?;
                    vec![out]
                }
                LayerKind::Conv2D => {
                    let w = weight.unwrap();
                    let m = layer
                        .conv_meta
                        .ok_or_else(|| bad(format!("conv `{}` lacks conv_meta", layer.name)))?;
                    if m.k == 0 || m.stride == 0 {
                        return Err(bad(format!("conv `{}` has zero kernel or stride", layer.name)));
                    }
                    if w.shape() != [m.c_out, m.c_in, m.k, m.k] {
                        return Err(Error::shape(format!(
                            "conv `{}` weight {:?} disagrees with meta {:?}",
                            layer.name,
                            w.shape(),
                            m
                        )));
                    }
                    if shape.len() != 3 || shape[0] != m.c_in {
                        return Err(Error::shape(format!(
                            "conv `{}` expects {} input channels, got {:?}",
                            layer.name, m.c_in, shape
                        )));
                    }
                    let (h, wd) = (shape[1] + 2 * m.padding, shape[2] + 2 * m.padding);
                    if h < m.k || wd < m.k {
                        return Err(Error::shape(format!("conv `{}` kernel larger than input", layer.name)));
                    }
                    check_bias(layer, bias, m.c_out)?;
                    vec![m.c_out, (h - m.k) / m.stride + 1, (wd - m.k) / m.stride + 1]
                }
                LayerKind::MaxPool2x2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(Error::shape(format!("pool `{}` needs [C,H,W] input, got {shape:?}", layer.name)));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::ReLU => shape,
                LayerKind::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(bad("Softmax is only allowed as the last layer".into()));
                    }
                    shape
                }
            };
            shapes.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::shape(format!(
                "network output {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        if let Some(aq) = &self.act_quant {
            if aq.bits == 0 {
                return Err(bad("activation bits must be positive".into()));
            }
            for (name, clip) in &aq.clips {
                let ok = self.layers.iter().any(|l| &l.name == name && l.kind == LayerKind::ReLU);
                if !ok || !(*clip > 0.0) {
                    return Err(bad(format!("invalid activation clip for `{name}`")));
                }
            }
        }
        Ok(shapes)
    }
}

fn check_bias(layer: &LayerDesc, bias: Option<&TensorRecord>, out: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [out] => Err(Error::shape(format!(
            "bias of `{}` has shape {:?}, expected [{out}]",
            layer.name,
            b.shape()
        ))),
        _ => Ok(()),
    }
}

//! Tensors, layer manifests and the `.nnmod` container.

mod container;
mod manifest;
mod tensor;

pub use container::{load_model, read_model, save_model, write_model, NNMOD_MAGIC};
pub use manifest::{ActQuant, ConvMeta, LayerDesc, LayerKind, ModelManifest};
pub use tensor::{dequantize_affine, quantize_affine, DType, QuantParams, TensorData, TensorRecord};

use crate::{Error, Result};

/// A manifest together with the tensors it references.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub manifest: ModelManifest,
    pub tensors: Vec<TensorRecord>,
}

impl Model {
    /// Builds a model and checks the manifest against the tensors.
    pub fn new(manifest: ModelManifest, tensors: Vec<TensorRecord>) -> Result<Self> {
        manifest.validate(&tensors)?;
        Ok(Model { manifest, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut TensorRecord> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDesc> {
        self.manifest.layers.iter().find(|l| l.name == name)
    }

    /// The weight tensor of layer `name`.
    pub fn layer_weight(&self, name: &str) -> Result<&TensorRecord> {
        let layer = self.layer(name).ok_or_else(|| Error::Unknown(name.to_string()))?;
        let wref = layer
            .weight_ref
            .as_deref()
            .ok_or_else(|| Error::arg(format!("layer `{name}` has no weights")))?;
        self.tensor(wref).ok_or_else(|| Error::Unknown(wref.to_string()))
    }

    /// Layers that carry a weight tensor, in manifest order.
    pub fn weight_layers(&self) -> impl Iterator<Item = &LayerDesc> {
        self.manifest.layers.iter().filter(|l| l.weight_ref.is_some())
    }

    /// Weight layers sorted by descending parameter count; ties keep manifest order.
    pub fn layers_by_param_count(&self) -> Vec<String> {
        let mut layers: Vec<(usize, &str)> = self
            .weight_layers()
            .map(|l| {
                let n = l
                    .weight_ref
                    .as_deref()
                    .and_then(|w| self.tensor(w))
                    .map_or(0, TensorRecord::len);
                (n, l.name.as_str())
            })
            .collect();
        layers.sort_by(|a, b| b.0.cmp(&a.0));
        layers.into_iter().map(|(_, n)| n.to_string()).collect()
    }

    /// Post-training uint8 quantization of every F32 weight tensor, each with
    /// an affine range covering its own values. Biases stay F32.
    pub fn quantized_u8(&self) -> Result<Model> {
        let weights: Vec<String> = self.weight_layers().filter_map(|l| l.weight_ref.clone()).collect();
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                if t.dtype() != DType::F32 || !weights.contains(&t.name) {
                    return Ok(t.clone());
                }
                let v = t.values_f64();
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                quantize_affine(t, QuantParams::from_range(lo, hi)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(self.manifest.clone(), tensors)
    }

    /// Replaces every U8 tensor by its dequantized F32 counterpart.
    pub fn dequantized(&self) -> Result<Model> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| match t.dtype() {
                DType::U8 => dequantize_affine(t),
                DType::F32 => Ok(t.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { manifest: self.manifest.clone(), tensors })
    }
}

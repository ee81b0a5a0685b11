use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    pub fn bits(self) -> usize {
        self.size_bytes() * 8
    }
}

/// Affine map between reals and uint8 codes: `x = scale * (u - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: u8) -> Result<Self> {
        let q = QuantParams { scale, zero_point };
        q.check()?;
        Ok(q)
    }

    /// Parameters mapping `[lo, hi]` (widened to contain 0) onto 0..=255.
    pub fn from_range(lo: f64, hi: f64) -> Result<Self> {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::arg("quantization range must be finite"));
        }
        let scale = if hi > lo { (hi - lo) / 255.0 } else { 1.0 };
        let zp = (-lo / scale).round().clamp(0.0, 255.0) as u8;
        QuantParams::new(scale, zp)
    }

    fn check(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::arg(format!("quant scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn quantize(&self, x: f64) -> u8 {
        // f64::round is half away from zero.
        ((x / self.scale).round() + f64::from(self.zero_point)).clamp(0.0, 255.0) as u8
    }

    pub fn dequantize(&self, u: u8) -> f64 {
        self.scale * (f64::from(u) - f64::from(self.zero_point))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A named tensor with row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    shape: Vec<usize>,
    data: TensorData,
    quant: Option<QuantParams>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: TensorData,
        quant: Option<QuantParams>,
    ) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidTensor { name: name.clone(), reason };
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.dtype() == DType::U8 && quant.is_none() {
            return Err(invalid("U8 tensor without quant params".into()));
        }
        if let Some(q) = &quant {
            q.check()?;
        }
        Ok(TensorRecord { name, shape, data, quant })
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, TensorData::F32(values), None)
    }

    pub fn u8(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<u8>,
        quant: QuantParams,
    ) -> Result<Self> {
        Self::new(name, shape, TensorData::U8(values), Some(quant))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn quant(&self) -> Option<QuantParams> {
        self.quant
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Real values of the tensor (dequantized for U8).
    pub fn values_f64(&self) -> Vec<f64> {
        match (&self.data, self.quant) {
            (TensorData::F32(v), _) => v.iter().map(|&x| f64::from(x)).collect(),
            (TensorData::U8(v), Some(q)) => v.iter().map(|&u| q.dequantize(u)).collect(),
            (TensorData::U8(v), None) => v.iter().map(|&u| f64::from(u)).collect(),
        }
    }

    /// Replaces the data buffer, keeping name, shape and quant params.
    pub fn with_data(&self, data: TensorData) -> Result<Self> {
        Self::new(self.name.clone(), self.shape.clone(), data, self.quant)
    }
}

/// Maps an F32 tensor to uint8 codes with `u = clamp(round(x / scale) + zp, 0, 255)`.
pub fn quantize_affine(t: &TensorRecord, q: QuantParams) -> Result<TensorRecord> {
    q.check()?;
    let TensorData::F32(values) = t.data() else {
        return Err(Error::arg(format!("`{}` is not an F32 tensor", t.name)));
    };
    let codes = values.iter().map(|&x| q.quantize(f64::from(x))).collect();
    TensorRecord::u8(t.name.clone(), t.shape.clone(), codes, q)
}

/// Maps a U8 tensor back to reals with `x = scale * (u - zp)`.
pub fn dequantize_affine(t: &TensorRecord) -> Result<TensorRecord> {
    let q = t
        .quant
        .ok_or_else(|| Error::arg(format!("`{}` has no quant params", t.name)))?;
    let TensorData::U8(codes) = t.data() else {
        return Err(Error::arg(format!("`{}` is not a U8 tensor", t.name)));
    };
    let values = codes.iter().map(|&u| q.dequantize(u) as f32).collect();
    TensorRecord::f32(t.name.clone(), t.shape.clone(), values)
}

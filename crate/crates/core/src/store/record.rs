use std::borrow::Cow;
use std::fmt;

use half::{bf16, f16};
use safetensors::tensor::View;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    BF16,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub(crate) fn from_safetensors(dtype: safetensors::Dtype) -> Option<Self> {
        match dtype {
            safetensors::Dtype::F32 => Some(DType::F32),
            safetensors::Dtype::F16 => Some(DType::F16),
            safetensors::Dtype::BF16 => Some(DType::BF16),
            safetensors::Dtype::F64 => Some(DType::F64),
            _ => None,
        }
    }

    pub(crate) fn to_safetensors(self) -> safetensors::Dtype {
        match self {
            DType::F32 => safetensors::Dtype::F32,
            DType::F16 => safetensors::Dtype::F16,
            DType::BF16 => safetensors::Dtype::BF16,
            DType::F64 => safetensors::Dtype::F64,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::BF16 => "bf16",
            DType::F64 => "f64",
        };
        f.write_str(s)
    }
}

/// One named weight tensor.
///
/// The payload is kept as the little-endian bytes read from disk, so half
/// precision tensors survive a load/save cycle bit for bit. Values are only
/// widened when a computation asks for them.
#[derive(Clone, PartialEq)]
pub struct TensorRecord {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl fmt::Debug for TensorRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorRecord")
            .field("name", &self.name)
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl TensorRecord {
    pub fn from_bytes(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel * dtype.size_bytes() != data.len() {
            return Err(Error::ShapeLength {
                name,
                shape,
                len: data.len() / dtype.size_bytes(),
            });
        }
        Ok(Self {
            name,
            dtype,
            shape,
            data,
        })
    }

    /// Builds a record from working-precision values, rounding to `dtype`
    /// with round-to-nearest-even.
    pub fn from_f32(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: &[f32],
        dtype: DType,
    ) -> Result<Self> {
        let data = encode_f32(values, dtype);
        Self::from_bytes(name, dtype, shape, data)
    }

    pub fn from_f64(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: &[f64],
        dtype: DType,
    ) -> Result<Self> {
        let data = match dtype {
            DType::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            DType::F16 => values
                .iter()
                .flat_map(|&v| f16::from_f64(v).to_le_bytes())
                .collect(),
            DType::BF16 => values
                .iter()
                .flat_map(|&v| bf16::from_f64(v).to_le_bytes())
                .collect(),
        };
        Self::from_bytes(name, dtype, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub(crate) fn set_name(&mut self, name: String) {
        self.name = name;
    }

    /// Values widened (or narrowed, for f64) to the 32-bit working precision.
    pub fn to_f32(&self) -> Vec<f32> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            DType::BF16 => self
                .data
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            DType::F64 => self.to_f64().into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect(),
            _ => self.to_f32().into_iter().map(f64::from).collect(),
        }
    }

    /// Re-encodes into another dtype. Identity when the dtype already matches.
    pub fn cast(&self, dtype: DType) -> TensorRecord {
        if dtype == self.dtype {
            return self.clone();
        }
        let data = match (self.dtype, dtype) {
            (DType::F64, _) => {
                return TensorRecord::from_f64(&*self.name, self.shape.clone(), &self.to_f64(), dtype)
                    .expect("shape preserved")
            }
            (_, DType::F64) => self.to_f64().iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => encode_f32(&self.to_f32(), dtype),
        };
        TensorRecord {
            name: self.name.clone(),
            dtype,
            shape: self.shape.clone(),
            data,
        }
    }

    /// Copies the leading sub-block of shape `block_shape` (same rank).
    pub(crate) fn leading_block(&self, block_shape: &[usize]) -> TensorRecord {
        debug_assert_eq!(block_shape.len(), self.shape.len());
        if block_shape == self.shape.as_slice() {
            return self.clone();
        }
        let esz = self.dtype.size_bytes();
        let data = match self.shape.len() {
            1 => self.data[..block_shape[0] * esz].to_vec(),
            2 => {
                let row_bytes = self.shape[1] * esz;
                let keep = block_shape[1] * esz;
                let mut out = Vec::with_capacity(block_shape[0] * keep);
                for row in self.data.chunks_exact(row_bytes).take(block_shape[0]) {
                    out.extend_from_slice(&row[..keep]);
                }
                out
            }
            r => unreachable!("leading_block called on rank-{r} tensor"),
        };
        TensorRecord {
            name: self.name.clone(),
            dtype: self.dtype,
            shape: block_shape.to_vec(),
            data,
        }
    }

    /// Writes `block` over the leading sub-block of `self`. Both must share
    /// rank and dtype, and `block` must fit.
    pub(crate) fn overwrite_leading_block(&mut self, block: &TensorRecord) {
        debug_assert_eq!(block.dtype, self.dtype);
        debug_assert_eq!(block.shape.len(), self.shape.len());
        let esz = self.dtype.size_bytes();
        match self.shape.len() {
            1 => self.data[..block.data.len()].copy_from_slice(&block.data),
            2 => {
                let row_bytes = self.shape[1] * esz;
                let block_row = block.shape[1] * esz;
                for (dst, src) in self
                    .data
                    .chunks_exact_mut(row_bytes)
                    .zip(block.data.chunks_exact(block_row))
                {
                    dst[..block_row].copy_from_slice(src);
                }
            }
            r => unreachable!("overwrite_leading_block called on rank-{r} tensor"),
        }
    }
}

fn encode_f32(values: &[f32], dtype: DType) -> Vec<u8> {
    match dtype {
        DType::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F16 => values
            .iter()
            .flat_map(|&v| f16::from_f32(v).to_le_bytes())
            .collect(),
        DType::BF16 => values
            .iter()
            .flat_map(|&v| bf16::from_f32(v).to_le_bytes())
            .collect(),
        DType::F64 => values
            .iter()
            .flat_map(|&v| f64::from(v).to_le_bytes())
            .collect(),
    }
}

impl View for &TensorRecord {
    fn dtype(&self) -> safetensors::Dtype {
        self.dtype.to_safetensors()
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }

    fn data_len(&self) -> usize {
        self.data.len()
    }
}

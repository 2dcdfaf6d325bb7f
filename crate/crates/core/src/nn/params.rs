//! Flat parameter and gradient storage with a named layout sidecar.
//!
//! Every network in this crate keeps its weights in a single `Vec<f64>` so
//! that optimizers, checksums and the encryption layer can treat them as
//! plain vectors. The [`Layout`] records which slice belongs to which tensor.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorDesc {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of named tensors. Immutable once built; shared by reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    tensors: Vec<TensorDesc>,
}

impl Layout {
    pub fn new(tensors: Vec<TensorDesc>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[TensorDesc] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(TensorDesc::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Start offset of every tensor, in layout order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tensors.len());
        let mut acc = 0;
        for t in &self.tensors {
            out.push(acc);
            acc += t.numel();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::contract(format!(
                "parameter count {} does not match layout size {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let idx = self.layout.tensors.iter().position(|t| t.name == name)?;
        let off = self.layout.offsets()[idx];
        Some(&self.values[off..off + self.layout.tensors[idx].numel()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let idx = self.layout.tensors.iter().position(|t| t.name == name)?;
        let off = self.layout.offsets()[idx];
        let n = self.layout.tensors[idx].numel();
        Some(&mut self.values[off..off + n])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// SHA-256 over the little-endian bytes of every value, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex_string(&h.finalize())
    }

    pub(crate) fn check_layout(&self, other: &Arc<Layout>) -> Result<()> {
        if Arc::ptr_eq(&self.layout, other) || *self.layout == **other {
            Ok(())
        } else {
            Err(Error::contract("parameter layouts differ"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::contract(format!(
                "gradient length {} does not match layout size {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self += other`, element-wise.
    pub fn accumulate(&mut self, other: &GradientVector) -> Result<()> {
        if *self.layout != *other.layout {
            return Err(Error::contract("gradient layouts differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

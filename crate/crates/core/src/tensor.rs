//! Dense row-major tensors and the keyed parameter containers built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Leading (batch) dimension.
    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension slice.
    pub fn sample_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
}

impl ParamRole {
    pub fn is_weight(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::LinearWeight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer_id: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

/// Per-layer parameter tensors in the topological layer order of the owning
/// plan. Every layer owns exactly two entries: weight then bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
}

/// Gradients share the keyed layout of the parameters they belong to.
pub type GradientSet = ParameterSet;

impl ParameterSet {
    pub fn new(entries: Vec<ParamEntry>) -> Result<Self> {
        if !entries.len().is_multiple_of(2) {
            return Err(Error::Shape(
                "parameter set must hold a weight and bias per layer".into(),
            ));
        }
        for pair in entries.chunks(2) {
            if pair[0].layer_id != pair[1].layer_id
                || !pair[0].role.is_weight()
                || pair[1].role.is_weight()
            {
                return Err(Error::Shape(format!(
                    "layer {} is not a (weight, bias) pair",
                    pair[0].layer_id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for pair in entries.chunks(2) {
            if !seen.insert(pair[0].layer_id.as_str()) {
                return Err(Error::Shape(format!(
                    "duplicate layer id {}",
                    pair[0].layer_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len() / 2
    }

    pub fn layer_id(&self, m: usize) -> &str {
        &self.entries[2 * m].layer_id
    }

    pub fn weight(&self, m: usize) -> &Tensor {
        &self.entries[2 * m].tensor
    }

    pub fn bias(&self, m: usize) -> &Tensor {
        &self.entries[2 * m + 1].tensor
    }

    /// Weight and bias of layer `m` flattened into one vector.
    pub fn layer_vector(&self, m: usize) -> Vec<f64> {
        let mut v = self.weight(m).data().to_vec();
        v.extend_from_slice(self.bias(m).data());
        v
    }

    /// Replace layer `m` from a flat weight‖bias vector.
    pub fn set_layer_vector(&mut self, m: usize, v: &[f64]) -> Result<()> {
        let wlen = self.weight(m).len();
        let blen = self.bias(m).len();
        if v.len() != wlen + blen {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: wlen + blen,
            });
        }
        self.entries[2 * m].tensor.data_mut().copy_from_slice(&v[..wlen]);
        self.entries[2 * m + 1]
            .tensor
            .data_mut()
            .copy_from_slice(&v[wlen..]);
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    layer_id: e.layer_id.clone(),
                    role: e.role,
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same keys and shapes.
    pub fn check_same_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "{} vs {} parameter tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.layer_id != b.layer_id || a.role != b.role || a.tensor.shape() != b.tensor.shape()
            {
                return Err(Error::Shape(format!(
                    "entry {}/{:?} {:?} vs {}/{:?} {:?}",
                    a.layer_id,
                    a.role,
                    a.tensor.shape(),
                    b.layer_id,
                    b.role,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self + scale * other`, entry by entry.
    pub fn add_scaled(&self, other: &ParameterSet, scale: f64) -> Result<Self> {
        self.check_same_layout(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| {
                Ok(ParamEntry {
                    layer_id: a.layer_id.clone(),
                    role: a.role,
                    tensor: a.tensor.add_scaled(&b.tensor, scale)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    layer_id: e.layer_id.clone(),
                    role: e.role,
                    tensor: e.tensor.map(&f),
                })
                .collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Flat view over every scalar, in entry order.
    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.tensor.data().iter().copied())
    }

    /// Mutable access to the scalar at a flat index across all entries.
    pub fn value_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for e in &mut self.entries {
            let len = e.tensor.len();
            if index < len {
                return Some(&mut e.tensor.data_mut()[index]);
            }
            index -= len;
        }
        None
    }

    pub fn value(&self, mut index: usize) -> Option<f64> {
        for e in &self.entries {
            let len = e.tensor.len();
            if index < len {
                return Some(e.tensor.data()[index]);
            }
            index -= len;
        }
        None
    }
}

/// A labelled image batch of shape (N, C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    images: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "batch images must be (N, C, H, W), got {:?}",
                images.shape()
            )));
        }
        if labels.len() != images.shape()[0] {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: images.shape()[0],
            });
        }
        Ok(Self { images, labels })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same labels, different images.
    pub fn with_images(&self, images: Tensor) -> Result<Batch> {
        if images.shape() != self.images.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                images.shape(),
                self.images.shape()
            )));
        }
        Ok(Batch {
            images,
            labels: self.labels.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn layer_vector_concatenates_weight_and_bias() {
        let set = ParameterSet::new(vec![
            ParamEntry {
                layer_id: "a".into(),
                role: ParamRole::LinearWeight,
                tensor: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            },
            ParamEntry {
                layer_id: "a".into(),
                role: ParamRole::LinearBias,
                tensor: Tensor::new(vec![1], vec![3.0]).unwrap(),
            },
        ])
        .unwrap();
        assert_eq!(set.layer_vector(0), vec![1.0, 2.0, 3.0]);
        assert_eq!(set.value(2), Some(3.0));
        assert_eq!(set.value(3), None);
    }

    #[test]
    fn duplicate_layer_ids_rejected() {
        let e = |role| ParamEntry {
            layer_id: "x".into(),
            role,
            tensor: Tensor::zeros(&[1]),
        };
        let r = ParameterSet::new(vec![
            e(ParamRole::ConvWeight),
            e(ParamRole::ConvBias),
            e(ParamRole::ConvWeight),
            e(ParamRole::ConvBias),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn batch_label_count_must_match() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Batch::new(images.clone(), vec![0]).is_err());
        assert!(Batch::new(images, vec![0, 1]).is_ok());
    }
}

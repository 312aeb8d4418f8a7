//! Flat parameter storage with a named tensor layout.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDesc {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorDesc {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable layout shared by every vector (values, gradients, moments)
/// over the same parameter set. Offsets are contiguous by construction.
#[derive(Debug)]
pub struct Layout {
    tensors: Vec<TensorDesc>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorDesc] {
        &self.tensors
    }

    pub fn desc(&self, name: &str) -> Option<&TensorDesc> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.desc(name).map(|d| d.offset..d.offset + d.len())
    }

    /// Name of the tensor containing flat index `idx`, for diagnostics.
    pub fn name_at(&self, idx: usize) -> &str {
        for d in &self.tensors {
            if idx >= d.offset && idx < d.offset + d.len() {
                return &d.name;
            }
        }
        "<out of range>"
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    tensors: Vec<TensorDesc>,
    total: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> &mut Self {
        let name = name.into();
        let len: usize = shape.iter().product();
        self.tensors.push(TensorDesc {
            name,
            offset: self.total,
            shape,
        });
        self.total += len;
        self
    }

    pub fn build(self) -> Arc<Layout> {
        let by_name = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        Arc::new(Layout {
            tensors: self.tensors,
            by_name,
            total: self.total,
        })
    }
}

/// Flat f64 storage plus its layout. Used for parameters, gradients and
/// optimizer moments alike.
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Usage(format!(
                "value length {} does not match layout length {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("unknown tensor {name:?}"));
        &self.values[r]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .range(name)
            .unwrap_or_else(|| panic!("unknown tensor {name:?}"));
        &mut self.values[r]
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`. Layouts must match.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) {
        assert_eq!(self.values.len(), other.values.len(), "layout mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Hard error when any entry is non-finite; the name and flat index of
    /// the first offender go into the message.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "{what}: non-finite value {v} at {} [{i}]",
                    self.layout.name_at(i)
                )));
            }
        }
        Ok(())
    }
}

/// Order-sensitive FNV-1a checksum over names and value bits. Used to
/// assert that frozen parameter sets never change.
pub fn checksum(p: &ParamVector) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for d in p.layout().tensors() {
        for &b in d.name.as_bytes() {
            eat(b);
        }
    }
    for v in p.values() {
        for b in v.to_le_bytes() {
            eat(b);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_layout() -> Arc<Layout> {
        let mut b = LayoutBuilder::new();
        b.push("w", vec![2, 3]).push("b", vec![2]);
        b.build()
    }

    #[test]
    fn offsets_are_contiguous_and_total_matches() {
        let l = small_layout();
        assert_eq!(l.total_len(), 8);
        assert_eq!(l.range("w"), Some(0..6));
        assert_eq!(l.range("b"), Some(6..8));
        assert_eq!(l.name_at(7), "b");
    }

    #[test]
    fn tensor_views_alias_flat_storage() {
        let mut p = ParamVector::zeros(small_layout());
        p.tensor_mut("b")[1] = 4.5;
        assert_eq!(p.values()[7], 4.5);
    }

    #[test]
    fn finite_check_reports_location() {
        let mut p = ParamVector::zeros(small_layout());
        p.tensor_mut("w")[2] = f64::NAN;
        let err = p.ensure_finite("test").unwrap_err().to_string();
        assert!(err.contains("w"), "{err}");
    }

    #[test]
    fn checksum_tracks_value_changes() {
        let mut p = ParamVector::zeros(small_layout());
        let c0 = checksum(&p);
        p.tensor_mut("w")[0] = 1.0;
        assert_ne!(c0, checksum(&p));
    }
}

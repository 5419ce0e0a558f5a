//! The labeled logit matrix every other module consumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};

/// Serializes zero-based class indices as one-based.
pub(crate) mod one_based {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &usize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*k as u64 + 1)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
        usize::deserialize(d)?
            .checked_sub(1)
            .ok_or_else(|| D::Error::custom("class indices are one-based"))
    }

    pub mod vec {
        use serde::{de::Error, Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|k| k + 1))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
            Vec::<usize>::deserialize(d)?
                .into_iter()
                .map(|k| k.checked_sub(1).ok_or_else(|| D::Error::custom("class indices are one-based")))
                .collect()
        }
    }
}

/// Free-form provenance carried alongside a record set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// `N` examples, each with a true label and `K` raw classifier outputs.
///
/// Labels are zero-based in memory. The on-disk formats use one-based
/// labels and convert at the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecordSet {
    num_classes: usize,
    labels: Vec<usize>,
    logits: Vec<f32>,
    pub metadata: RecordMetadata,
}

impl LogitRecordSet {
    pub fn new(num_classes: usize, labels: Vec<usize>, logits: Vec<f32>) -> Result<Self> {
        Self::with_metadata(num_classes, labels, logits, RecordMetadata::default())
    }

    pub fn with_metadata(
        num_classes: usize,
        labels: Vec<usize>,
        logits: Vec<f32>,
        metadata: RecordMetadata,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(CpError::Data(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if logits.len() != labels.len() * num_classes {
            return Err(CpError::Shape {
                expected: format!("{} logits ({} x {})", labels.len() * num_classes, labels.len(), num_classes),
                actual: format!("{} logits", logits.len()),
            });
        }
        for (row, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(CpError::ClassOutOfRange {
                    index: y,
                    num_classes,
                }
                .at_row(row));
            }
        }
        for (i, v) in logits.iter().enumerate() {
            if !v.is_finite() {
                return Err(CpError::NonFinite {
                    index: i % num_classes,
                    value: f64::from(*v),
                }
                .at_row(i / num_classes));
            }
        }
        Ok(Self {
            num_classes,
            labels,
            logits,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row-major `N x K` logits.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.logits.chunks_exact(self.num_classes)
    }

    /// Records at `indices`, in the order given.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut labels = Vec::with_capacity(indices.len());
        let mut logits = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            labels.push(self.labels[i]);
            logits.extend_from_slice(self.row(i));
        }
        Self {
            num_classes: self.num_classes,
            labels,
            logits,
            metadata: self.metadata.clone(),
        }
    }

    /// Bitwise equality, including metadata. `PartialEq` treats `-0.0 == 0.0`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.metadata == other.metadata
            && self.logits.len() == other.logits.len()
            && self
                .logits
                .iter()
                .zip(&other.logits)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_label_out_of_range_with_row() {
        let err = LogitRecordSet::new(2, vec![0, 2], vec![0.0; 4]).unwrap_err();
        assert!(matches!(err, CpError::Row { row: 1, .. }), "{err}");
    }

    #[test]
    fn rejects_nan_logit() {
        let err = LogitRecordSet::new(2, vec![0, 1], vec![0.0, 1.0, f32::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, CpError::Row { row: 1, .. }));
    }

    #[test]
    fn select_keeps_rows() {
        let rs = LogitRecordSet::new(2, vec![0, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sub = rs.select(&[2, 0]);
        assert_eq!(sub.labels(), &[1, 0]);
        assert_eq!(sub.logits(), &[5.0, 6.0, 1.0, 2.0]);
    }
}

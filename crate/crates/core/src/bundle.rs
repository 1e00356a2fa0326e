use ndarray::Array2;

use crate::error::{Error, Result};
use crate::text_anchor::{check_unit_rows, DescriptionBank, ViewBatch};

/// One test image: its augmented view embeddings (`B x D`) and optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: Option<usize>,
    pub views: Array2<f64>,
}

/// Everything a run needs for one dataset.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub descriptions: DescriptionBank,
    /// `C x D` embeddings of the plain class prompt.
    pub base_class_embeddings: Array2<f64>,
    pub samples: Vec<Sample>,
    /// Row of each sample's view matrix holding the unaugmented image.
    pub original_view_index: usize,
    /// Per-sample, per-view ground truth (synthetic bundles only).
    pub informative_mask: Option<Vec<Vec<bool>>>,
}

impl FeatureBundle {
    pub fn num_classes(&self) -> usize {
        self.descriptions.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.descriptions.dim()
    }

    pub fn batch(&self, index: usize) -> Result<ViewBatch<'_>> {
        let s = self.samples.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.samples.len(),
        })?;
        ViewBatch::new(s.views.view(), self.original_view_index)
    }

    pub fn mask(&self, index: usize) -> Option<&[bool]> {
        self.informative_mask
            .as_ref()
            .and_then(|m| m.get(index))
            .map(Vec::as_slice)
    }

    /// Structural checks shared by the generator, the reader and the engine.
    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.num_classes(), self.dim());
        if self.base_class_embeddings.dim() != (c, d) {
            return Err(Error::DimensionMismatch {
                what: "base class embeddings",
                expected: c,
                found: self.base_class_embeddings.nrows(),
            });
        }
        check_unit_rows(self.base_class_embeddings.view(), "base class embedding")?;
        for s in &self.samples {
            if s.views.ncols() != d {
                return Err(Error::DimensionMismatch {
                    what: "sample view dimension",
                    expected: d,
                    found: s.views.ncols(),
                });
            }
            if let Some(l) = s.label {
                if l >= c {
                    return Err(Error::IndexOutOfRange { index: l, len: c });
                }
            }
            ViewBatch::new(s.views.view(), self.original_view_index)?;
        }
        if let Some(mask) = &self.informative_mask {
            if mask.len() != self.samples.len()
                || mask
                    .iter()
                    .zip(&self.samples)
                    .any(|(m, s)| m.len() != s.views.nrows())
            {
                return Err(Error::DimensionMismatch {
                    what: "informative mask",
                    expected: self.samples.len(),
                    found: mask.len(),
                });
            }
        }
        Ok(())
    }
}

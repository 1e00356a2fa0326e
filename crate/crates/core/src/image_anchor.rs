//! Online class-prototype bank and the image-guided view filter.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::embedding::{top_fraction_indices, top_k_indices, ProbVec};
use crate::error::{Error, Result};
use crate::scoring::{joint_scores, totals, JointScore, JointWeights};
use crate::text_anchor::{TextAnchorSet, ViewBatch};

/// Per-class running means of committed view embeddings.
///
/// An unpopulated class keeps a zero prototype and a zero count.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Array2<f64>,
    counts: Vec<u64>,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize) -> Self {
        PrototypeBank {
            prototypes: Array2::zeros((classes, dim)),
            counts: vec![0; classes],
        }
    }

    /// Rebuild a bank from a stored snapshot.
    pub fn from_parts(prototypes: Array2<f64>, counts: Vec<u64>) -> Result<Self> {
        if prototypes.nrows() != counts.len() {
            return Err(Error::DimensionMismatch {
                what: "prototype rows vs counts",
                expected: prototypes.nrows(),
                found: counts.len(),
            });
        }
        if prototypes.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prototype bank"));
        }
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 && prototypes.row(c).iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "class {c} has zero count but a non-zero prototype"
                )));
            }
        }
        Ok(PrototypeBank { prototypes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototypes(&self) -> ArrayView2<'_, f64> {
        self.prototypes.view()
    }

    pub fn prototype(&self, class: usize) -> ArrayView1<'_, f64> {
        self.prototypes.row(class)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_populated(&self, class: usize) -> bool {
        self.counts.get(class).is_some_and(|&n| n > 0)
    }

    pub fn populated(&self) -> usize {
        self.counts.iter().filter(|&&n| n > 0).count()
    }

    /// `p_c <- (n_c p_c + e) / (n_c + 1)`, `n_c <- n_c + 1`.
    pub fn update(&mut self, embedding: ArrayView1<'_, f64>, class: usize) -> Result<()> {
        if class >= self.counts.len() {
            return Err(Error::IndexOutOfRange {
                index: class,
                len: self.counts.len(),
            });
        }
        if embedding.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "prototype update",
                expected: self.dim(),
                found: embedding.len(),
            });
        }
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prototype update"));
        }
        let n = self.counts[class] as f64;
        let mut p = self.prototypes.row_mut(class);
        p.zip_mut_with(&embedding, |pc, &e| *pc = (n * *pc + e) / (n + 1.0));
        self.counts[class] += 1;
        Ok(())
    }

    /// Per-class representation for confidence scoring: the prototype where
    /// populated, otherwise the text anchor.
    pub fn confidence_reps(&self, text: &TextAnchorSet) -> Result<Array2<f64>> {
        if text.anchors.dim() != self.prototypes.dim() {
            return Err(Error::DimensionMismatch {
                what: "text anchors vs prototype bank",
                expected: self.prototypes.nrows(),
                found: text.anchors.nrows(),
            });
        }
        let mut reps = text.anchors.clone();
        for c in 0..self.num_classes() {
            if self.is_populated(c) {
                reps.row_mut(c).assign(&self.prototypes.row(c));
            }
        }
        Ok(reps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAnchorSet {
    pub class_indices: Vec<usize>,
    /// `|class_indices| x D` prototypes, in the order of `class_indices`.
    pub anchors: Array2<f64>,
}

impl ImageAnchorSet {
    /// Gather prototypes for the ranked classes, skipping unpopulated ones.
    pub fn from_ranked(ranked: &[usize], bank: &PrototypeBank) -> Self {
        let class_indices: Vec<usize> = ranked
            .iter()
            .copied()
            .filter(|&c| bank.is_populated(c))
            .collect();
        let mut anchors = Array2::zeros((class_indices.len(), bank.dim()));
        for (row, &c) in class_indices.iter().enumerate() {
            anchors.row_mut(row).assign(&bank.prototype(c));
        }
        ImageAnchorSet {
            class_indices,
            anchors,
        }
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }
}

/// Mean of the given predictions.
pub fn mean_prediction(predictions: &[ProbVec]) -> Result<Array1<f64>> {
    let first = predictions
        .first()
        .ok_or(Error::EmptyInput("predictions"))?;
    let mut acc = Array1::<f64>::zeros(first.len());
    for p in predictions {
        if p.len() != acc.len() {
            return Err(Error::DimensionMismatch {
                what: "prediction length",
                expected: acc.len(),
                found: p.len(),
            });
        }
        acc += p.as_array();
    }
    acc /= predictions.len() as f64;
    Ok(acc)
}

/// The `k` classes with the highest mean predicted probability, best first.
pub fn select_topk_classes(predictions: &[ProbVec], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidConfig("top-K must be at least 1".into()));
    }
    let mean = mean_prediction(predictions)?;
    Ok(top_k_indices(mean.as_slice().expect("contiguous"), k))
}

pub fn image_view_scores(
    batch: &ViewBatch<'_>,
    anchor_set: &ImageAnchorSet,
    bank: &PrototypeBank,
    text: &TextAnchorSet,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<JointScore>> {
    if anchor_set.is_empty() {
        return Err(Error::NoAnchorsAvailable);
    }
    let reps = bank.confidence_reps(text)?;
    joint_scores(
        batch.views(),
        anchor_set.anchors.view(),
        reps.view(),
        weights,
        tau,
    )
}

/// `beta1 * max_{c in C_K} cos(e, p_c) + beta2 * (1 - H(p_img) / ln C)`.
pub fn score_views_image(
    batch: &ViewBatch<'_>,
    anchor_set: &ImageAnchorSet,
    bank: &PrototypeBank,
    text: &TextAnchorSet,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<f64>> {
    Ok(totals(&image_view_scores(
        batch, anchor_set, bank, text, weights, tau,
    )?))
}

/// Top-`p` views by image score. With no usable image anchors the filter
/// selects nothing and the final selection is the text selection alone.
pub fn filter_image(
    batch: &ViewBatch<'_>,
    anchor_set: &ImageAnchorSet,
    bank: &PrototypeBank,
    text: &TextAnchorSet,
    p: f64,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<usize>> {
    crate::embedding::check_fraction(p)?;
    if anchor_set.is_empty() {
        return Ok(Vec::new());
    }
    top_fraction_indices(
        &score_views_image(batch, anchor_set, bank, text, weights, tau)?,
        p,
    )
}

/// Sorted, deduplicated union.
pub fn union_selection(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter()
        .chain(b)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

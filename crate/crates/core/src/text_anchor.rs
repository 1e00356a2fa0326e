//! Per-image text anchors built from class description embeddings, and the
//! text-guided view filter.
//!
//! For every view `b`, class `c` and description `i` the marginal benefit
//! `s = cos(e_b, w_c^i) - cos(e_b, mean_c)` measures how much a specific
//! description says about the view beyond the generic class text. A softmax
//! over descriptions turns it into per-view weights, which are averaged over
//! the batch and used to aggregate the descriptions into one anchor per class.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::embedding::{cosine_sim, norm, softmax, top_fraction_indices, ProbVec};
use crate::error::{Error, Result};
use crate::par;
use crate::scoring::{class_distribution, joint_scores, totals, JointScore, JointWeights};

pub const UNIT_TOL: f64 = 1e-5;

pub(crate) fn check_unit_rows(rows: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    for r in rows.rows() {
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        let dev = (norm(r) - 1.0).abs();
        if dev > UNIT_TOL {
            return Err(Error::NotUnitNorm(what, dev));
        }
    }
    Ok(())
}

/// Class description embeddings, `C x N x D`, with their per-class means.
#[derive(Debug, Clone)]
pub struct DescriptionBank {
    descriptions: Array3<f64>,
    class_means: Array2<f64>,
    class_names: Vec<String>,
}

impl DescriptionBank {
    pub fn new(descriptions: Array3<f64>, class_names: Vec<String>) -> Result<Self> {
        let (c, n, d) = descriptions.dim();
        if c == 0 || n == 0 || d == 0 {
            return Err(Error::EmptyInput("description bank"));
        }
        if class_names.len() != c {
            return Err(Error::DimensionMismatch {
                what: "class names",
                expected: c,
                found: class_names.len(),
            });
        }
        for cls in descriptions.outer_iter() {
            check_unit_rows(cls, "description embedding")?;
        }
        let class_means = descriptions
            .mean_axis(Axis(1))
            .ok_or(Error::EmptyInput("description bank"))?;
        Ok(DescriptionBank {
            descriptions,
            class_means,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.descriptions.dim().0
    }

    pub fn per_class(&self) -> usize {
        self.descriptions.dim().1
    }

    pub fn dim(&self) -> usize {
        self.descriptions.dim().2
    }

    pub fn descriptions(&self) -> ArrayView3<'_, f64> {
        self.descriptions.view()
    }

    pub fn class_means(&self) -> ArrayView2<'_, f64> {
        self.class_means.view()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// The augmented views of one test image, `B x D`, unit rows.
#[derive(Debug, Clone, Copy)]
pub struct ViewBatch<'a> {
    views: ArrayView2<'a, f64>,
    original_index: usize,
}

impl<'a> ViewBatch<'a> {
    pub fn new(views: ArrayView2<'a, f64>, original_index: usize) -> Result<Self> {
        if views.nrows() == 0 {
            return Err(Error::EmptyInput("view batch"));
        }
        if original_index >= views.nrows() {
            return Err(Error::IndexOutOfRange {
                index: original_index,
                len: views.nrows(),
            });
        }
        check_unit_rows(views, "view embedding")?;
        Ok(ViewBatch {
            views,
            original_index,
        })
    }

    pub fn len(&self) -> usize {
        self.views.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.views.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.views.ncols()
    }

    pub fn views(&self) -> ArrayView2<'a, f64> {
        self.views
    }

    pub fn view(&self, b: usize) -> ArrayView1<'a, f64> {
        self.views.index_axis_move(ndarray::Axis(0), b)
    }

    pub fn original_index(&self) -> usize {
        self.original_index
    }

    pub fn original(&self) -> ArrayView1<'a, f64> {
        self.views
            .index_axis_move(ndarray::Axis(0), self.original_index)
    }
}

#[derive(Debug, Clone)]
pub struct TextAnchorSet {
    /// `C x D` class anchors.
    pub anchors: Array2<f64>,
    /// `C x N` averaged description weights; each row sums to one.
    pub weights: Array2<f64>,
    pub renormalized: bool,
}

impl TextAnchorSet {
    pub fn num_classes(&self) -> usize {
        self.anchors.nrows()
    }
}

fn check_dims(batch: &ViewBatch<'_>, bank: &DescriptionBank) -> Result<()> {
    if batch.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            what: "view vs description dimension",
            expected: bank.dim(),
            found: batch.dim(),
        });
    }
    Ok(())
}

/// `B x C x N` marginal-benefit scores.
pub fn marginal_benefit_scores(
    batch: &ViewBatch<'_>,
    bank: &DescriptionBank,
) -> Result<Array3<f64>> {
    check_dims(batch, bank)?;
    let (c, n, _) = bank.descriptions.dim();
    let rows = par::map_range(batch.len(), |b| -> Result<Vec<f64>> {
        let e = batch.view(b);
        let mut out = Vec::with_capacity(c * n);
        for cls in 0..c {
            let base = cosine_sim(e, bank.class_means.row(cls))?;
            for i in 0..n {
                let w = bank.descriptions.slice(ndarray::s![cls, i, ..]);
                out.push(cosine_sim(e, w)? - base);
            }
        }
        Ok(out)
    });
    let mut scores = Array3::zeros((batch.len(), c, n));
    for (b, row) in rows.into_iter().enumerate() {
        let row = row?;
        scores
            .index_axis_mut(Axis(0), b)
            .iter_mut()
            .zip(row)
            .for_each(|(dst, v)| *dst = v);
    }
    Ok(scores)
}

/// Per-view description weights `a[b, c, i] = softmax_i(s[b, c, i])`.
pub fn description_weights(scores: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (nb, nc, _) = scores.dim();
    let mut out = Array3::zeros(scores.dim());
    for b in 0..nb {
        for c in 0..nc {
            let p = softmax(scores.slice(ndarray::s![b, c, ..]), 1.0)?;
            out.slice_mut(ndarray::s![b, c, ..]).assign(p.as_array());
        }
    }
    Ok(out)
}

/// Aggregate the descriptions into per-class anchors for this batch.
pub fn build_text_anchors(
    batch: &ViewBatch<'_>,
    bank: &DescriptionBank,
    renormalize: bool,
) -> Result<TextAnchorSet> {
    let scores = marginal_benefit_scores(batch, bank)?;
    let per_view = description_weights(scores.view())?;
    let (c, n, d) = bank.descriptions.dim();
    let mut weights = Array2::<f64>::zeros((c, n));
    for b in 0..batch.len() {
        weights += &per_view.index_axis(Axis(0), b);
    }
    weights /= batch.len() as f64;

    let mut anchors = Array2::<f64>::zeros((c, d));
    for cls in 0..c {
        let mut t = anchors.row_mut(cls);
        for i in 0..n {
            t.scaled_add(
                weights[[cls, i]],
                &bank.descriptions.slice(ndarray::s![cls, i, ..]),
            );
        }
        if renormalize {
            let nt = norm(t.view());
            if nt <= crate::embedding::ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            t.mapv_inplace(|x| x / nt);
        }
    }
    Ok(TextAnchorSet {
        anchors,
        weights,
        renormalized: renormalize,
    })
}

/// `softmax_c(tau * cos(view, t_c))`.
pub fn text_confidence_distribution(
    view: ArrayView1<'_, f64>,
    anchors: &TextAnchorSet,
    tau: f64,
) -> Result<ProbVec> {
    class_distribution(view, anchors.anchors.view(), tau)
}

/// Full per-view text scores (alignment, confidence, distribution, total).
pub fn text_view_scores(
    batch: &ViewBatch<'_>,
    anchors: &TextAnchorSet,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<JointScore>> {
    joint_scores(
        batch.views(),
        anchors.anchors.view(),
        anchors.anchors.view(),
        weights,
        tau,
    )
}

/// `alpha1 * max_c cos(e, t_c) + alpha2 * (1 - H(p) / ln C)` for every view.
pub fn score_views_text(
    batch: &ViewBatch<'_>,
    anchors: &TextAnchorSet,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<f64>> {
    Ok(totals(&text_view_scores(batch, anchors, weights, tau)?))
}

/// Top-`q` views by text score, ascending index order.
pub fn filter_text(
    batch: &ViewBatch<'_>,
    anchors: &TextAnchorSet,
    q: f64,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<usize>> {
    top_fraction_indices(&score_views_text(batch, anchors, weights, tau)?, q)
}

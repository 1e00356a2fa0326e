//! Vector primitives shared by every stage: normalization, cosine similarity,
//! scaled softmax, normalized entropy, and deterministic top-k selection.

use std::cmp::Ordering;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn l2_normalize(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("l2_normalize input"));
    }
    let n = norm(v);
    if n <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(v.mapv(|x| x / n))
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "cosine_sim",
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let c = a.dot(&b) / (na * nb);
    if !c.is_finite() {
        return Err(Error::NonFinite("cosine_sim"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// A probability vector: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Array1<f64>);

impl ProbVec {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn try_new(p: Array1<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(Error::NonFinite("probability vector entries"));
        }
        if (p.sum() - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidConfig(format!(
                "probability vector sums to {}",
                p.sum()
            )));
        }
        Ok(ProbVec(p))
    }

    /// Uniform distribution over `classes` outcomes.
    pub fn uniform(classes: usize) -> Self {
        ProbVec(Array1::from_elem(classes, 1.0 / classes as f64))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(self.0.view())
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `softmax(scale * z)` with max subtraction.
pub fn softmax(z: ArrayView1<'_, f64>, scale: f64) -> Result<ProbVec> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "softmax scale must be > 0, got {scale}"
        )));
    }
    if z.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = z.mapv(|x| (scale * (x - m)).exp());
    let s = e.sum();
    e.mapv_inplace(|x| x / s);
    Ok(ProbVec(e))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: ArrayView1<'_, f64>) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `H(p) / ln C`, in `[0, 1]`. A single-outcome distribution has zero entropy.
pub fn normalized_entropy(p: &ProbVec) -> f64 {
    let c = p.len();
    if c < 2 {
        return 0.0;
    }
    (entropy(p.view()) / (c as f64).ln()).clamp(0.0, 1.0)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Number of items kept when retaining `fraction` of `len`:
/// `floor(fraction * len + 0.5)`, at least one, at most `len`.
pub fn selection_count(len: usize, fraction: f64) -> Result<usize> {
    check_fraction(fraction)?;
    let raw = (fraction * len as f64 + 0.5).floor() as usize;
    Ok(raw.clamp(1, len.max(1)).min(len))
}

pub(crate) fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )))
    }
}

/// Descending by score, ascending by index on ties.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// The `k` highest-scoring indices in rank order (best first).
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| rank_order(scores, a, b));
    idx.truncate(k);
    idx
}

/// Indices of the top `fraction` of scores, returned in ascending index order.
pub fn top_fraction_indices(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("selection scores"));
    }
    let k = selection_count(scores.len(), fraction)?;
    let mut picked = top_k_indices(scores, k);
    picked.sort_unstable();
    Ok(picked)
}

//! Joint alignment/confidence scoring of views against a set of class
//! representations. Used by both the text and image filters.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, normalized_entropy, softmax, ProbVec};
use crate::error::{Error, Result};
use crate::par;

/// Weights on the alignment and confidence terms of a joint view score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointWeights {
    pub align: f64,
    pub conf: f64,
}

impl JointWeights {
    pub fn new(align: f64, conf: f64) -> Result<Self> {
        let w = JointWeights { align, conf };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.align.is_finite() && self.conf.is_finite();
        if !finite || self.align < 0.0 || self.conf < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "score weights must be finite and non-negative, got ({}, {})",
                self.align, self.conf
            )));
        }
        if self.align == 0.0 && self.conf == 0.0 {
            return Err(Error::InvalidConfig(
                "alignment and confidence weights are both zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JointScore {
    /// Max cosine similarity to any alignment representation.
    pub align: f64,
    /// `1 - H(p) / ln C`.
    pub conf: f64,
    /// Class distribution over the confidence representations.
    pub probs: ProbVec,
    pub total: f64,
}

/// Class distribution `softmax(tau * cos(view, rep_c))`.
pub fn class_distribution(
    view: ArrayView1<'_, f64>,
    reps: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<ProbVec> {
    let sims = reps
        .rows()
        .into_iter()
        .map(|r| cosine_sim(view, r))
        .collect::<Result<Vec<_>>>()?;
    softmax(ArrayView1::from(&sims), tau)
}

/// Score a single view. `align_reps` may differ from `conf_reps` (the image
/// filter aligns against a subset of prototypes but measures confidence over
/// every class).
pub fn joint_score(
    view: ArrayView1<'_, f64>,
    align_reps: ArrayView2<'_, f64>,
    conf_reps: ArrayView2<'_, f64>,
    weights: JointWeights,
    tau: f64,
) -> Result<JointScore> {
    if align_reps.nrows() == 0 {
        return Err(Error::EmptyInput("alignment representations"));
    }
    let mut align = f64::NEG_INFINITY;
    for r in align_reps.rows() {
        align = align.max(cosine_sim(view, r)?);
    }
    let probs = class_distribution(view, conf_reps, tau)?;
    let conf = 1.0 - normalized_entropy(&probs);
    Ok(JointScore {
        align,
        conf,
        total: weights.align * align + weights.conf * conf,
        probs,
    })
}

/// Score every row of `views`; evaluated view-parallel.
pub fn joint_scores(
    views: ArrayView2<'_, f64>,
    align_reps: ArrayView2<'_, f64>,
    conf_reps: ArrayView2<'_, f64>,
    weights: JointWeights,
    tau: f64,
) -> Result<Vec<JointScore>> {
    weights.validate()?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    par::map_range(views.nrows(), |b| {
        joint_score(views.row(b), align_reps, conf_reps, weights, tau)
    })
    .into_iter()
    .collect()
}

pub fn totals(scores: &[JointScore]) -> Vec<f64> {
    scores.iter().map(|s| s.total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_weights_rejected() {
        assert!(matches!(
            JointWeights::new(0.0, 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(JointWeights::new(-1.0, 1.0).is_err());
        assert!(JointWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn joint_score_composes_terms() {
        let reps = array![[1.0, 0.0], [0.0, 1.0]];
        let v = array![0.6, 0.8];
        let w = JointWeights::new(1.0, 2.0).unwrap();
        let s = joint_score(v.view(), reps.view(), reps.view(), w, 10.0).unwrap();
        assert!((s.align - 0.8).abs() < 1e-15);
        let p1 = 1.0 / (1.0 + (-2.0f64).exp());
        let h = -(p1 * p1.ln() + (1.0 - p1) * (1.0 - p1).ln()) / 2f64.ln();
        assert!((s.conf - (1.0 - h)).abs() < 1e-12);
        assert!((s.total - (s.align + 2.0 * s.conf)).abs() < 1e-15);
    }
}

//! Confidence-weighted fusion of the prompt, text-anchor and image-anchor
//! heads, the sharpened ensemble target, and the prompt-update losses with
//! their analytic gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, l2_normalize, norm, softmax, ProbVec, ZERO_NORM};
use crate::error::{Error, Result};

/// How the prompt parameter reaches the class embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// `normalize(u_c + W theta)` with one `W` for every class.
    SharedOffset,
    /// `normalize(u_c + W_c theta)` with a projection per class.
    Linear,
}

/// Fixed differentiable map from the prompt parameter to unit class
/// embeddings. A zero prompt reproduces the base (zero-shot) embeddings.
#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    base: Array2<f64>,
    projections: Vec<Array2<f64>>,
    mode: EncoderMode,
    prompt_dim: usize,
}

impl SurrogateEncoder {
    /// Gaussian projections with entries `N(0, scale^2 / prompt_dim)`, so
    /// `|W theta|` is about `scale * |theta|`.
    pub fn new(
        base: Array2<f64>,
        mode: EncoderMode,
        prompt_dim: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if base.nrows() == 0 || base.ncols() == 0 {
            return Err(Error::EmptyInput("base class embeddings"));
        }
        if prompt_dim == 0 {
            return Err(Error::InvalidConfig(
                "prompt dimension must be positive".into(),
            ));
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidConfig(format!("projection scale {scale}")));
        }
        let mut base = base;
        for mut r in base.rows_mut() {
            let u = l2_normalize(r.view())?;
            r.assign(&u);
        }
        let (c, d) = base.dim();
        let count = match mode {
            EncoderMode::SharedOffset => 1,
            EncoderMode::Linear => c,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = scale / (prompt_dim as f64).sqrt();
        let projections = (0..count)
            .map(|_| {
                Array2::from_shape_fn((d, prompt_dim), |_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * std
                })
            })
            .collect();
        Ok(SurrogateEncoder {
            base,
            projections,
            mode,
            prompt_dim,
        })
    }

    /// Build from explicit projections (one for shared-offset, `C` for linear).
    pub fn with_projections(
        base: Array2<f64>,
        mode: EncoderMode,
        projections: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let (c, d) = base.dim();
        let expected = match mode {
            EncoderMode::SharedOffset => 1,
            EncoderMode::Linear => c,
        };
        if projections.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "projection count",
                expected,
                found: projections.len(),
            });
        }
        let prompt_dim = projections[0].ncols();
        if projections.iter().any(|w| w.dim() != (d, prompt_dim)) {
            return Err(Error::DimensionMismatch {
                what: "projection shape",
                expected: d,
                found: projections[0].nrows(),
            });
        }
        let mut enc = SurrogateEncoder::new(base, mode, prompt_dim, 0.0, 0)?;
        enc.projections = projections;
        Ok(enc)
    }

    pub fn num_classes(&self) -> usize {
        self.base.nrows()
    }

    pub fn dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    fn projection(&self, class: usize) -> &Array2<f64> {
        match self.mode {
            EncoderMode::SharedOffset => &self.projections[0],
            EncoderMode::Linear => &self.projections[class],
        }
    }

    fn check_prompt(&self, theta: ArrayView1<'_, f64>) -> Result<()> {
        if theta.len() != self.prompt_dim {
            return Err(Error::DimensionMismatch {
                what: "prompt parameter",
                expected: self.prompt_dim,
                found: theta.len(),
            });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prompt parameter"));
        }
        Ok(())
    }

    /// Unnormalized class vectors `v_c = u_c + W_c theta`.
    fn raw(&self, theta: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        self.check_prompt(theta)?;
        let mut v = self.base.clone();
        match self.mode {
            EncoderMode::SharedOffset => {
                let off = self.projections[0].dot(&theta);
                for mut r in v.rows_mut() {
                    r += &off;
                }
            }
            EncoderMode::Linear => {
                for (c, mut r) in v.rows_mut().into_iter().enumerate() {
                    r += &self.projections[c].dot(&theta);
                }
            }
        }
        Ok(v)
    }

    /// `C x D` unit class embeddings for the given prompt.
    pub fn encode(&self, theta: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        let mut v = self.raw(theta)?;
        for mut r in v.rows_mut() {
            let n = norm(r.view());
            if n <= ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            r.mapv_inplace(|x| x / n);
        }
        Ok(v)
    }

    /// Directional derivative of `encode` at `theta` along `dir`.
    pub fn jvp(&self, theta: ArrayView1<'_, f64>, dir: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        self.check_prompt(dir)?;
        let v = self.raw(theta)?;
        let mut out = Array2::zeros(v.dim());
        for c in 0..v.nrows() {
            let n = norm(v.row(c));
            if n <= ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            let e = v.row(c).mapv(|x| x / n);
            let dv = self.projection(c).dot(&dir);
            let radial = e.dot(&dv);
            out.row_mut(c).assign(&((&dv - &(&e * radial)) / n));
        }
        Ok(out)
    }

    /// Pull a loss gradient w.r.t. the class embeddings back to the prompt.
    pub fn vjp(
        &self,
        theta: ArrayView1<'_, f64>,
        grad_emb: ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        let v = self.raw(theta)?;
        if grad_emb.dim() != v.dim() {
            return Err(Error::DimensionMismatch {
                what: "embedding gradient",
                expected: v.nrows(),
                found: grad_emb.nrows(),
            });
        }
        let mut grad = Array1::zeros(self.prompt_dim);
        for c in 0..v.nrows() {
            let n = norm(v.row(c));
            if n <= ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            let e = v.row(c).mapv(|x| x / n);
            let g = grad_emb.row(c);
            let gv = (&g - &(&e * e.dot(&g))) / n;
            grad += &self.projection(c).t().dot(&gv);
        }
        Ok(grad)
    }
}

/// Index of each predictive head in per-view weight triples.
pub const PROMPT: usize = 0;
pub const TEXT: usize = 1;
pub const IMAGE: usize = 2;

/// Per-view logits from the three heads, each `B_sel x C` and already
/// scaled by `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLogits {
    pub prompt: Array2<f64>,
    pub text: Array2<f64>,
    pub image: Array2<f64>,
}

fn scaled_cosines(
    views: ArrayView2<'_, f64>,
    selection: &[usize],
    reps: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<Array2<f64>> {
    let mut z = Array2::zeros((selection.len(), reps.nrows()));
    for (row, &b) in selection.iter().enumerate() {
        if b >= views.nrows() {
            return Err(Error::IndexOutOfRange {
                index: b,
                len: views.nrows(),
            });
        }
        for c in 0..reps.nrows() {
            z[[row, c]] = tau * cosine_sim(views.row(b), reps.row(c))?;
        }
    }
    Ok(z)
}

impl SourceLogits {
    /// `tau * cos(e_b, rep_c)` for each selected view and each head.
    pub fn compute(
        views: ArrayView2<'_, f64>,
        selection: &[usize],
        prompt_emb: ArrayView2<'_, f64>,
        text_anchors: ArrayView2<'_, f64>,
        image_reps: ArrayView2<'_, f64>,
        tau: f64,
    ) -> Result<Self> {
        if selection.is_empty() {
            return Err(Error::EmptyInput("selected views"));
        }
        Ok(SourceLogits {
            prompt: scaled_cosines(views, selection, prompt_emb, tau)?,
            text: scaled_cosines(views, selection, text_anchors, tau)?,
            image: scaled_cosines(views, selection, image_reps, tau)?,
        })
    }

    pub fn views(&self) -> usize {
        self.prompt.nrows()
    }

    pub fn classes(&self) -> usize {
        self.prompt.ncols()
    }

    pub fn source(&self, k: usize) -> ArrayView2<'_, f64> {
        match k {
            PROMPT => self.prompt.view(),
            TEXT => self.text.view(),
            _ => self.image.view(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.text.dim() != self.prompt.dim() || self.image.dim() != self.prompt.dim() {
            return Err(Error::DimensionMismatch {
                what: "source logits",
                expected: self.prompt.ncols(),
                found: self.text.ncols().max(self.image.ncols()),
            });
        }
        if [&self.prompt, &self.text, &self.image]
            .iter()
            .any(|z| z.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFinite("source logits"));
        }
        Ok(())
    }
}

/// How per-view head weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMode {
    /// `w_k = gamma_k / (sum_j gamma_j + eps)`, `gamma_k = max softmax(z_k)`.
    Confidence,
    /// Equal weight on every active head.
    SimpleAverage,
}

/// Which heads take part in the ensemble. The prompt head always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSources {
    pub text: bool,
    pub image: bool,
}

impl ActiveSources {
    pub const ALL: ActiveSources = ActiveSources {
        text: true,
        image: true,
    };
    pub const PROMPT_ONLY: ActiveSources = ActiveSources {
        text: false,
        image: false,
    };

    fn mask(&self) -> [bool; 3] {
        [true, self.text, self.image]
    }
}

/// Confidence weights over all three heads, `B_sel x 3`.
pub fn confidence_weights(logits: &SourceLogits, epsilon: f64) -> Result<Array2<f64>> {
    ensemble_weights(
        logits,
        ActiveSources::ALL,
        EnsembleMode::Confidence,
        epsilon,
    )
}

pub fn ensemble_weights(
    logits: &SourceLogits,
    active: ActiveSources,
    mode: EnsembleMode,
    epsilon: f64,
) -> Result<Array2<f64>> {
    logits.validate()?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let mask = active.mask();
    let n_active = mask.iter().filter(|&&m| m).count() as f64;
    let mut w = Array2::zeros((logits.views(), 3));
    for b in 0..logits.views() {
        match mode {
            EnsembleMode::SimpleAverage => {
                for k in 0..3 {
                    if mask[k] {
                        w[[b, k]] = 1.0 / n_active;
                    }
                }
            }
            EnsembleMode::Confidence => {
                let mut gamma = [0.0; 3];
                for k in 0..3 {
                    if mask[k] {
                        gamma[k] = softmax(logits.source(k).row(b), 1.0)?.max();
                    }
                }
                let denom: f64 = gamma.iter().sum::<f64>() + epsilon;
                for k in 0..3 {
                    w[[b, k]] = gamma[k] / denom;
                }
            }
        }
    }
    Ok(w)
}

/// `z_ens[b] = sum_k w[b, k] z_k[b]`.
pub fn ensemble_logits(logits: &SourceLogits, weights: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    logits.validate()?;
    if weights.dim() != (logits.views(), 3) {
        return Err(Error::DimensionMismatch {
            what: "ensemble weights",
            expected: logits.views(),
            found: weights.nrows(),
        });
    }
    let mut z = Array2::zeros(logits.prompt.dim());
    for b in 0..logits.views() {
        let mut row = z.row_mut(b);
        for k in 0..3 {
            row.scaled_add(weights[[b, k]], &logits.source(k).row(b));
        }
    }
    Ok(z)
}

/// Mean of the per-row softmax distributions.
pub fn average_distribution(z: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if z.nrows() == 0 {
        return Err(Error::EmptyInput("logit rows"));
    }
    let mut acc = Array1::zeros(z.ncols());
    for row in z.rows() {
        acc += softmax(row, 1.0)?.as_array();
    }
    acc /= z.nrows() as f64;
    Ok(acc)
}

/// `p^(1/T) / sum p^(1/T)`, evaluated in the log domain.
pub fn sharpen(p: ArrayView1<'_, f64>, temperature: f64) -> Result<ProbVec> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sharpening temperature must be > 0, got {temperature}"
        )));
    }
    let logs = p.mapv(|x| {
        if x > 0.0 {
            x.ln() / temperature
        } else {
            f64::NEG_INFINITY
        }
    });
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite("sharpening input"));
    }
    let e = logs.mapv(|l| (l - m).exp());
    let s = e.sum();
    ProbVec::try_new(e / s)
}

/// Sharpened, view-averaged ensemble distribution. The result is a constant
/// target: nothing downstream differentiates through it.
pub fn build_target(z_ens: ArrayView2<'_, f64>, temperature: f64) -> Result<ProbVec> {
    sharpen(average_distribution(z_ens)?.view(), temperature)
}

/// `KL(q || p)` with `0 ln 0 = 0`.
pub fn kl_loss(q: &ProbVec, p: &ProbVec) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch {
            what: "KL operands",
            expected: q.len(),
            found: p.len(),
        });
    }
    let mut kl = 0.0;
    for (&qc, &pc) in q.view().iter().zip(p.view().iter()) {
        if qc > 0.0 {
            if pc <= 0.0 {
                return Err(Error::NonFinite(
                    "KL divergence (p has a zero where q does not)",
                ));
            }
            kl += qc * (qc.ln() - pc.ln());
        }
    }
    Ok(kl.max(0.0))
}

/// Mean of the unit-normalized selected views.
fn mean_direction(views: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if views.nrows() == 0 {
        return Err(Error::EmptyInput("selected views"));
    }
    let mut acc = Array1::zeros(views.ncols());
    for r in views.rows() {
        acc += &l2_normalize(r)?;
    }
    acc /= views.nrows() as f64;
    Ok(acc)
}

/// Prompt prediction `p_v = softmax(mean_b tau cos(e_b, E_c(theta)))`.
pub fn prompt_prediction(
    enc: &SurrogateEncoder,
    theta: ArrayView1<'_, f64>,
    views: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<ProbVec> {
    let emb = enc.encode(theta)?;
    let ebar = mean_direction(views)?;
    softmax(emb.dot(&ebar).view(), tau)
}

/// KL adaptation loss against a fixed target and its gradient w.r.t. the
/// prompt parameter.
pub fn loss_and_grad(
    enc: &SurrogateEncoder,
    theta: ArrayView1<'_, f64>,
    views: ArrayView2<'_, f64>,
    target: &ProbVec,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    if target.len() != enc.num_classes() {
        return Err(Error::DimensionMismatch {
            what: "target distribution",
            expected: enc.num_classes(),
            found: target.len(),
        });
    }
    let emb = enc.encode(theta)?;
    let ebar = mean_direction(views)?;
    let p = softmax(emb.dot(&ebar).view(), tau)?;
    let loss = kl_loss(target, &p)?;
    // dL/dz = p - q; z_c = tau * ebar . E_c
    let dz = p.as_array() - target.as_array();
    let mut g_emb = Array2::zeros(emb.dim());
    for c in 0..emb.nrows() {
        g_emb.row_mut(c).assign(&(&ebar * (tau * dz[c])));
    }
    Ok((loss, enc.vjp(theta, g_emb.view())?))
}

/// Loss value alone, for finite-difference checks.
pub fn kl_objective(
    enc: &SurrogateEncoder,
    theta: ArrayView1<'_, f64>,
    views: ArrayView2<'_, f64>,
    target: &ProbVec,
    tau: f64,
) -> Result<f64> {
    kl_loss(target, &prompt_prediction(enc, theta, views, tau)?)
}

/// Constant part of the ensemble that does not depend on the prompt.
#[derive(Debug, Clone)]
pub struct FrozenEnsemble {
    /// Per-view weight on the prompt head.
    pub prompt_weight: Array1<f64>,
    /// `sum_{k != prompt} w_k z_k`, `B_sel x C`.
    pub offset: Array2<f64>,
}

impl FrozenEnsemble {
    pub fn prompt_only(views: usize, classes: usize) -> Self {
        FrozenEnsemble {
            prompt_weight: Array1::ones(views),
            offset: Array2::zeros((views, classes)),
        }
    }

    pub fn from_weights(logits: &SourceLogits, weights: ArrayView2<'_, f64>) -> Self {
        let mut offset = Array2::zeros(logits.prompt.dim());
        for b in 0..logits.views() {
            let mut row = offset.row_mut(b);
            row.scaled_add(weights[[b, TEXT]], &logits.text.row(b));
            row.scaled_add(weights[[b, IMAGE]], &logits.image.row(b));
        }
        FrozenEnsemble {
            prompt_weight: weights.column(PROMPT).to_owned(),
            offset,
        }
    }
}

/// Class embeddings, unit views, per-view softmax and their mean.
type EntropyForward = (Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>);

fn entropy_forward(
    enc: &SurrogateEncoder,
    theta: ArrayView1<'_, f64>,
    views: ArrayView2<'_, f64>,
    frozen: &FrozenEnsemble,
    tau: f64,
) -> Result<EntropyForward> {
    let bsel = views.nrows();
    if bsel == 0 {
        return Err(Error::EmptyInput("selected views"));
    }
    if frozen.prompt_weight.len() != bsel || frozen.offset.nrows() != bsel {
        return Err(Error::DimensionMismatch {
            what: "frozen ensemble rows",
            expected: bsel,
            found: frozen.prompt_weight.len(),
        });
    }
    let emb = enc.encode(theta)?;
    let mut units = Array2::zeros(views.dim());
    for (b, r) in views.rows().into_iter().enumerate() {
        units.row_mut(b).assign(&l2_normalize(r)?);
    }
    let z_prompt = units.dot(&emb.t()) * tau;
    let mut probs = Array2::zeros(z_prompt.dim());
    for b in 0..bsel {
        let z = &z_prompt.row(b) * frozen.prompt_weight[b] + frozen.offset.row(b);
        probs.row_mut(b).assign(softmax(z.view(), 1.0)?.as_array());
    }
    let pbar = probs
        .mean_axis(Axis(0))
        .ok_or(Error::EmptyInput("selected views"))?;
    Ok((emb, units, probs, pbar))
}

fn entropy_of(pbar: &Array1<f64>) -> f64 {
    -pbar
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Entropy of the view-averaged ensemble distribution, where only the prompt
/// head depends on `theta`.
pub fn entropy_objective(
    enc: &SurrogateEncoder,
    theta: ArrayView1<'_, f64>,
    views: ArrayView2<'_, f64>,
    frozen: &FrozenEnsemble,
    tau: f64,
) -> Result<f64> {
    let (_, _, _, pbar) = entropy_forward(enc, theta, views, frozen, tau)?;
    Ok(entropy_of(&pbar))
}

/// Entropy-minimization loss and its gradient w.r.t. the prompt parameter.
pub fn entropy_loss_and_grad(
    enc: &SurrogateEncoder,
    theta: ArrayView1<'_, f64>,
    views: ArrayView2<'_, f64>,
    frozen: &FrozenEnsemble,
    tau: f64,
) -> Result<(f64, Array1<f64>)> {
    let (emb, units, probs, pbar) = entropy_forward(enc, theta, views, frozen, tau)?;
    let loss = entropy_of(&pbar);
    let bsel = views.nrows() as f64;
    // dH/dpbar_c = -(ln pbar_c + 1); the constant drops out through softmax.
    let g = pbar.mapv(|x| -(x.max(f64::MIN_POSITIVE)).ln());
    let mut dz = Array2::zeros(probs.dim());
    for b in 0..probs.nrows() {
        let pb = probs.row(b);
        let mean_g = pb.dot(&g);
        let scale = frozen.prompt_weight[b] / bsel;
        for c in 0..probs.ncols() {
            dz[[b, c]] = scale * pb[c] * (g[c] - mean_g);
        }
    }
    // z_prompt[b, c] = tau * u_b . E_c
    let g_emb = dz.t().dot(&units) * tau;
    debug_assert_eq!(g_emb.dim(), emb.dim());
    Ok((loss, enc.vjp(theta, g_emb.view())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::zeros((rows, d));
        for mut r in m.rows_mut() {
            let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            r.assign(&l2_normalize(v.view()).unwrap());
        }
        m
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Array1<f64> {
        (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                s * x
            })
            .collect()
    }

    fn fd_grad(f: impl Fn(ArrayView1<'_, f64>) -> f64, theta: &Array1<f64>, h: f64) -> Array1<f64> {
        let mut g = Array1::zeros(theta.len());
        let mut t = theta.clone();
        for i in 0..theta.len() {
            t[i] = theta[i] + h;
            let fp = f(t.view());
            t[i] = theta[i] - h;
            let fm = f(t.view());
            t[i] = theta[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(b.iter())
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        diff / scale.max(1e-12)
    }

    #[test]
    fn zero_prompt_is_base_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = unit_rows(&mut rng, 4, 6);
        for mode in [EncoderMode::Linear, EncoderMode::SharedOffset] {
            let enc = SurrogateEncoder::new(base.clone(), mode, 5, 1.0, 9).unwrap();
            let e = enc.encode(Array1::zeros(5).view()).unwrap();
            for (x, y) in e.iter().zip(base.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn colinear_offset_keeps_direction() {
        let base = Array2::<f64>::eye(3);
        // W theta = u_1 for theta = e_0.
        let mut w = Array2::zeros((3, 2));
        w[[1, 0]] = 1.0;
        let enc =
            SurrogateEncoder::with_projections(base, EncoderMode::SharedOffset, vec![w]).unwrap();
        let e = enc.encode(arr1(&[1.0, 0.0]).view()).unwrap();
        assert!((e[[1, 1]] - 1.0).abs() < 1e-15);
        assert!(e[[1, 0]].abs() < 1e-15 && e[[1, 2]].abs() < 1e-15);
    }

    #[test]
    fn encoder_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base = unit_rows(&mut rng, 5, 8);
        for mode in [EncoderMode::Linear, EncoderMode::SharedOffset] {
            let enc = SurrogateEncoder::new(base.clone(), mode, 6, 1.0, 41).unwrap();
            let theta = gaussian(&mut rng, 6, 0.3);
            let dir = gaussian(&mut rng, 6, 1.0);
            let h = 1e-5;
            let jv = enc.jvp(theta.view(), dir.view()).unwrap();
            let plus = enc.encode((&theta + &(&dir * h)).view()).unwrap();
            let minus = enc.encode((&theta - &(&dir * h)).view()).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let scale = jv.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for (a, b) in jv.iter().zip(fd.iter()) {
                assert!((a - b).abs() / scale < 1e-6, "{a} vs {b}");
            }
            // Adjoint identity: <vjp(G), dir> = <G, jvp(dir)>.
            let g = unit_rows(&mut rng, 5, 8);
            let lhs = enc.vjp(theta.view(), g.view()).unwrap().dot(&dir);
            let rhs = (&g * &jv).sum();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    fn logits_from(rows: [[f64; 3]; 3]) -> SourceLogits {
        SourceLogits {
            prompt: arr2(&[rows[0]]),
            text: arr2(&[rows[1]]),
            image: arr2(&[rows[2]]),
        }
    }

    #[test]
    fn identical_sources_get_equal_weights() {
        let z = [0.3, -1.0, 2.0];
        let l = logits_from([z, z, z]);
        let w = confidence_weights(&l, 1e-8).unwrap();
        for k in 0..3 {
            assert!((w[[0, k]] - 1.0 / 3.0).abs() < 1e-8);
        }
        let ens = ensemble_logits(&l, w.view()).unwrap();
        for c in 0..3 {
            assert!((ens[[0, c]] - z[c]).abs() < 1e-7);
        }
    }

    #[test]
    fn dominant_confident_source() {
        let c = 10;
        let mut hot = Array2::zeros((1, c));
        hot[[0, 0]] = 1e3;
        let flat = Array2::zeros((1, c));
        let l = SourceLogits {
            prompt: hot,
            text: flat.clone(),
            image: flat,
        };
        let w = confidence_weights(&l, 1e-8).unwrap();
        let want = 1.0 / (1.0 + 2.0 / c as f64);
        assert!((w[[0, PROMPT]] - want).abs() < 1e-7);
        assert!((want - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn weights_sum_close_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mk =
            |rng: &mut ChaCha8Rng| Array2::from_shape_fn((7, 5), |_| rng.random_range(-20.0..20.0));
        let l = SourceLogits {
            prompt: mk(&mut rng),
            text: mk(&mut rng),
            image: mk(&mut rng),
        };
        let w = confidence_weights(&l, 1e-8).unwrap();
        for b in 0..7 {
            let mut gam = 0.0;
            for k in 0..3 {
                gam += softmax(l.source(k).row(b), 1.0).unwrap().max();
            }
            assert!((w.row(b).sum() - gam / (gam + 1e-8)).abs() < 1e-12);
            assert!((w.row(b).sum() - 1.0).abs() < 1e-6);
            assert!(w.row(b).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn ensemble_logits_cases() {
        let l = logits_from([[1.0, 2.0, 3.0], [0.0, 0.0, 6.0], [2.0, 1.0, 0.0]]);
        let eq = Array2::from_elem((1, 3), 1.0 / 3.0);
        let z = ensemble_logits(&l, eq.view()).unwrap();
        assert!((z[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((z[[0, 2]] - 3.0).abs() < 1e-15);
        let one = arr2(&[[0.0, 1.0, 0.0]]);
        assert_eq!(ensemble_logits(&l, one.view()).unwrap(), l.text);

        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mk =
            |rng: &mut ChaCha8Rng| Array2::from_shape_fn((4, 6), |_| rng.random_range(-5.0..5.0));
        let l = SourceLogits {
            prompt: mk(&mut rng),
            text: mk(&mut rng),
            image: mk(&mut rng),
        };
        let w = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.0..1.0));
        let z = ensemble_logits(&l, w.view()).unwrap();
        for b in 0..4 {
            for c in 0..6 {
                let want = w[[b, 0]] * l.prompt[[b, c]]
                    + w[[b, 1]] * l.text[[b, c]]
                    + w[[b, 2]] * l.image[[b, c]];
                assert!((z[[b, c]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simple_average_and_prompt_only_weights() {
        let l = logits_from([[1.0, 2.0, 3.0], [0.0, 0.0, 6.0], [2.0, 1.0, 0.0]]);
        let w =
            ensemble_weights(&l, ActiveSources::ALL, EnsembleMode::SimpleAverage, 1e-8).unwrap();
        assert_eq!(w.row(0).to_vec(), vec![1.0 / 3.0; 3]);
        let w = ensemble_weights(
            &l,
            ActiveSources::PROMPT_ONLY,
            EnsembleMode::SimpleAverage,
            1e-8,
        )
        .unwrap();
        assert_eq!(w.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        let w = ensemble_weights(
            &l,
            ActiveSources {
                text: true,
                image: false,
            },
            EnsembleMode::Confidence,
            1e-8,
        )
        .unwrap();
        assert_eq!(w[[0, IMAGE]], 0.0);
        assert!((w.row(0).sum() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn target_examples() {
        let z = arr2(&[[0.5, -1.0, 2.0]]);
        let q = build_target(z.view(), 1.0).unwrap();
        let p = softmax(z.row(0), 1.0).unwrap();
        for (a, b) in q.view().iter().zip(p.view().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let flat = Array2::from_elem((3, 4), 0.7);
        let q = build_target(flat.view(), 0.3).unwrap();
        assert!(q.view().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let q = sharpen(arr1(&[0.7, 0.3]).view(), 0.3).unwrap();
        let a = 0.7f64.powf(1.0 / 0.3);
        let b = 0.3f64.powf(1.0 / 0.3);
        assert!((q.view()[0] - a / (a + b)).abs() < 1e-12);
        assert!((q.view()[0] - 0.94398).abs() < 1e-5);
        assert!(build_target(Array2::<f64>::zeros((0, 3)).view(), 0.3).is_err());
    }

    #[test]
    fn sharpening_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..200 {
            let z = Array2::from_shape_fn((5, 6), |_| rng.random_range(-4.0..4.0));
            let avg = average_distribution(z.view()).unwrap();
            let q = build_target(z.view(), 0.3).unwrap();
            let amax = avg.iter().copied().fold(f64::MIN, f64::max);
            assert!(q.max() >= amax - 1e-15);
            assert_eq!(q.argmax(), crate::embedding::argmax(avg.view()));
        }
    }

    #[test]
    fn kl_examples() {
        let p = ProbVec::try_new(arr1(&[0.2, 0.3, 0.5])).unwrap();
        assert_eq!(kl_loss(&p, &p).unwrap(), 0.0);
        let q = ProbVec::try_new(arr1(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let kl = kl_loss(&q, &ProbVec::uniform(4)).unwrap();
        assert!((kl - 4f64.ln()).abs() < 1e-15);
        assert!((kl - 1.3863).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let draw = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let want: f64 = a.iter().zip(&b).map(|(x, y)| x * (x / y).ln()).sum();
        let got = kl_loss(
            &ProbVec::try_new(Array1::from(a)).unwrap(),
            &ProbVec::try_new(Array1::from(b)).unwrap(),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    struct Instance {
        enc: SurrogateEncoder,
        theta: Array1<f64>,
        views: Array2<f64>,
        target: ProbVec,
    }

    fn instance(seed: u64, mode: EncoderMode) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, dp, b) = (6, 12, 8, 5);
        let enc = SurrogateEncoder::new(unit_rows(&mut rng, c, d), mode, dp, 1.0, seed).unwrap();
        let theta = gaussian(&mut rng, dp, 0.1);
        let views = unit_rows(&mut rng, b, d);
        let z = Array2::from_shape_fn((3, c), |_| rng.random_range(-3.0..3.0));
        let target = build_target(z.view(), 0.3).unwrap();
        Instance {
            enc,
            theta,
            views,
            target,
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        for seed in [59, 61, 67] {
            for mode in [EncoderMode::Linear, EncoderMode::SharedOffset] {
                let it = instance(seed, mode);
                for tau in [1.0, 100.0] {
                    let (loss, grad) =
                        loss_and_grad(&it.enc, it.theta.view(), it.views.view(), &it.target, tau)
                            .unwrap();
                    assert!(loss >= 0.0);
                    let fd = fd_grad(
                        |t| kl_objective(&it.enc, t, it.views.view(), &it.target, tau).unwrap(),
                        &it.theta,
                        1e-5,
                    );
                    let err = rel_err(&grad, &fd);
                    assert!(err < 1e-5, "seed {seed} tau {tau}: rel err {err}");
                }
            }
        }
    }

    #[test]
    fn stationary_when_target_equals_prediction() {
        let it = instance(3, EncoderMode::Linear);
        let theta = Array1::zeros(it.enc.prompt_dim());
        let p = prompt_prediction(&it.enc, theta.view(), it.views.view(), 100.0).unwrap();
        let (loss, grad) =
            loss_and_grad(&it.enc, theta.view(), it.views.view(), &p, 100.0).unwrap();
        assert!(loss.abs() < 1e-9);
        assert!(grad.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn gradient_step_descends() {
        for seed in 0..100u64 {
            let it = instance(1000 + seed, EncoderMode::Linear);
            let tau = 100.0;
            let (loss, grad) =
                loss_and_grad(&it.enc, it.theta.view(), it.views.view(), &it.target, tau).unwrap();
            if grad.dot(&grad).sqrt() < 1e-9 {
                continue;
            }
            let step = &it.theta - &(&grad * 1e-4);
            let after =
                kl_objective(&it.enc, step.view(), it.views.view(), &it.target, tau).unwrap();
            assert!(after < loss, "seed {seed}: {after} >= {loss}");
        }
    }

    #[test]
    fn target_is_constant_under_prompt_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let it = instance(71, EncoderMode::Linear);
        let z = Array2::from_shape_fn((3, 6), |_| rng.random_range(-3.0..3.0));
        let q1 = build_target(z.view(), 0.3).unwrap();
        let (_, grad) =
            loss_and_grad(&it.enc, it.theta.view(), it.views.view(), &q1, 100.0).unwrap();
        let moved = &it.theta - &(&grad * 0.1);
        let _ = loss_and_grad(&it.enc, moved.view(), it.views.view(), &q1, 100.0).unwrap();
        let q2 = build_target(z.view(), 0.3).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        for seed in [5u64, 6, 7] {
            let it = instance(seed, EncoderMode::Linear);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = it.views.nrows();
            let frozen = FrozenEnsemble {
                prompt_weight: Array1::from_shape_fn(b, |_| rng.random_range(0.2..0.6)),
                offset: Array2::from_shape_fn((b, 6), |_| rng.random_range(-10.0..10.0)),
            };
            for fr in [frozen, FrozenEnsemble::prompt_only(b, 6)] {
                let (loss, grad) =
                    entropy_loss_and_grad(&it.enc, it.theta.view(), it.views.view(), &fr, 30.0)
                        .unwrap();
                assert!(loss >= 0.0);
                let fd = fd_grad(
                    |t| entropy_objective(&it.enc, t, it.views.view(), &fr, 30.0).unwrap(),
                    &it.theta,
                    1e-5,
                );
                let err = rel_err(&grad, &fd);
                assert!(err < 1e-5, "seed {seed}: rel err {err}");
            }
        }
    }
}

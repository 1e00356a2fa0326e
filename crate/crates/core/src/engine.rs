//! Per-sample adaptation pipeline, stream runner, baselines and the
//! ablation grid.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::embedding::{argmax, cosine_sim, top_fraction_indices, ProbVec};
use crate::ensemble::{
    build_target, ensemble_logits, ensemble_weights, entropy_loss_and_grad, entropy_objective,
    kl_objective, loss_and_grad, ActiveSources, EncoderMode, EnsembleMode, FrozenEnsemble,
    SourceLogits, SurrogateEncoder,
};
use crate::error::{Error, Result};
use crate::image_anchor::{
    filter_image, select_topk_classes, union_selection, ImageAnchorSet, PrototypeBank,
};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::par;
use crate::scoring::{joint_scores, totals, JointWeights};
use crate::text_anchor::{
    build_text_anchors, filter_text, text_confidence_distribution, DescriptionBank, TextAnchorSet,
    ViewBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    TptEntropy,
    CosineSel,
    ZeroShot,
    EmSimple,
    EmConf,
    KldSimple,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ours,
        Method::TptEntropy,
        Method::CosineSel,
        Method::ZeroShot,
        Method::EmSimple,
        Method::EmConf,
        Method::KldSimple,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::TptEntropy => "tpt-entropy",
            Method::CosineSel => "cosine-sel",
            Method::ZeroShot => "zero-shot",
            Method::EmSimple => "em-simple",
            Method::EmConf => "em-conf",
            Method::KldSimple => "kld-simple",
        }
    }

    pub fn variant(&self) -> Variant {
        let anchors = Selection::Anchors {
            text: true,
            image: true,
        };
        let (selection, sources, loss, ensemble) = match self {
            Method::Ours => (
                anchors,
                ActiveSources::ALL,
                LossKind::Kld,
                EnsembleMode::Confidence,
            ),
            Method::KldSimple => (
                anchors,
                ActiveSources::ALL,
                LossKind::Kld,
                EnsembleMode::SimpleAverage,
            ),
            Method::EmConf => (
                anchors,
                ActiveSources::ALL,
                LossKind::Em,
                EnsembleMode::Confidence,
            ),
            Method::EmSimple => (
                anchors,
                ActiveSources::ALL,
                LossKind::Em,
                EnsembleMode::SimpleAverage,
            ),
            Method::TptEntropy => (
                Selection::Entropy,
                ActiveSources::PROMPT_ONLY,
                LossKind::Em,
                EnsembleMode::Confidence,
            ),
            Method::CosineSel => (
                Selection::CosineRank,
                ActiveSources::PROMPT_ONLY,
                LossKind::Em,
                EnsembleMode::Confidence,
            ),
            Method::ZeroShot => (
                Selection::None,
                ActiveSources::PROMPT_ONLY,
                LossKind::Em,
                EnsembleMode::Confidence,
            ),
        };
        Variant {
            name: self.as_str().to_string(),
            selection,
            sources,
            loss,
            ensemble,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(Method::as_str).collect();
                Error::InvalidConfig(format!(
                    "unknown method {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Sharpened-target KL divergence.
    Kld,
    /// Entropy of the view-averaged prediction.
    Em,
}

/// How the views used for the update are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Selection {
    /// Text and/or image anchor filters. With both off this is `Entropy`.
    Anchors { text: bool, image: bool },
    /// Lowest base-prompt entropy.
    Entropy,
    /// Rank-normalized confidence plus rank-normalized similarity to the
    /// original view.
    CosineRank,
    /// No adaptation.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub selection: Selection,
    pub sources: ActiveSources,
    pub loss: LossKind,
    pub ensemble: EnsembleMode,
}

impl Variant {
    fn effective_selection(&self) -> Selection {
        match self.selection {
            Selection::Anchors {
                text: false,
                image: false,
            } => Selection::Entropy,
            s => s,
        }
    }

    /// Whether the variant reads or writes the prototype bank.
    pub fn uses_bank(&self) -> bool {
        matches!(self.selection, Selection::Anchors { image: true, .. }) || self.sources.image
    }

    pub fn adapts(&self) -> bool {
        self.selection != Selection::None
    }
}

/// The seven component-toggle rows followed by the four loss/ensemble rows.
pub fn ablation_variants() -> Vec<Variant> {
    let toggles = [
        (false, false, false, false),
        (true, false, false, false),
        (false, true, false, false),
        (true, true, false, false),
        (true, true, true, false),
        (true, true, false, true),
        (true, true, true, true),
    ];
    let mut rows = Vec::with_capacity(11);
    for (i, &(st, si, zt, zi)) in toggles.iter().enumerate() {
        let v = if i == 0 {
            Variant {
                name: "components/none".into(),
                ..Method::TptEntropy.variant()
            }
        } else {
            let on = |b: bool| if b { "+" } else { "-" };
            Variant {
                name: format!(
                    "components/{}s_text{}s_image{}z_text{}z_image",
                    on(st),
                    on(si),
                    on(zt),
                    on(zi)
                ),
                selection: Selection::Anchors {
                    text: st,
                    image: si,
                },
                sources: ActiveSources {
                    text: zt,
                    image: zi,
                },
                loss: LossKind::Kld,
                ensemble: EnsembleMode::Confidence,
            }
        };
        rows.push(v);
    }
    for m in [
        Method::EmSimple,
        Method::EmConf,
        Method::KldSimple,
        Method::Ours,
    ] {
        rows.push(Variant {
            name: format!("loss/{}", m.as_str()),
            ..m.variant()
        });
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankCommit {
    /// Every view picked by the seeding filter.
    Selected,
    /// Only the unaugmented view.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub method: Method,
    pub q: f64,
    pub p: f64,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub tau: f64,
    pub lr: f64,
    pub steps: u32,
    pub epsilon: f64,
    pub renormalize_anchors: bool,
    pub seed: u64,
    pub bank_commit: BankCommit,
    pub pin_original: bool,
    pub encoder_mode: EncoderMode,
    pub prompt_dim: usize,
    pub projection_scale: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            method: Method::Ours,
            q: 0.10,
            p: 0.05,
            alpha: [1.0, 2.0],
            beta: [2.0, 1.0],
            k: 3,
            temperature: 0.3,
            tau: 100.0,
            lr: 0.003,
            steps: 1,
            epsilon: 1e-8,
            renormalize_anchors: true,
            seed: 0,
            bank_commit: BankCommit::Selected,
            pin_original: false,
            encoder_mode: EncoderMode::Linear,
            prompt_dim: 32,
            projection_scale: 3.0,
            betas: [0.9, 0.999],
            weight_decay: 0.0,
        }
    }
}

impl AdaptationConfig {
    pub fn text_weights(&self) -> Result<JointWeights> {
        JointWeights::new(self.alpha[0], self.alpha[1])
    }

    pub fn image_weights(&self) -> Result<JointWeights> {
        JointWeights::new(self.beta[0], self.beta[1])
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidConfig(format!("{what} = {v}")));
        for (name, f) in [("q", self.q), ("p", self.p)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(name, f);
            }
        }
        for (name, v) in [
            ("T", self.temperature),
            ("tau", self.tau),
            ("lr", self.lr),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if self.prompt_dim == 0 {
            return Err(Error::InvalidConfig("prompt_dim must be at least 1".into()));
        }
        if !(self.projection_scale >= 0.0 && self.projection_scale.is_finite()) {
            return bad("projection_scale", self.projection_scale);
        }
        self.text_weights()?;
        self.image_weights()?;
        self.adamw().validate()
    }

    /// The surrogate encoder for a bundle, seeded from the config.
    pub fn encoder(&self, bundle: &FeatureBundle) -> Result<SurrogateEncoder> {
        SurrogateEncoder::new(
            bundle.base_class_embeddings.clone(),
            self.encoder_mode,
            self.prompt_dim,
            self.projection_scale,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: u64,
    pub label: Option<usize>,
    pub zero_shot_pred: usize,
    pub adapted_pred: usize,
    /// Views from the first-stage filter (text anchors, or the baseline rule).
    pub selected_text: Vec<usize>,
    pub selected_image: Vec<usize>,
    pub selected_union: Vec<usize>,
    /// Objective at the initial prompt.
    pub loss: Option<f64>,
    /// Mean per-view weight on the prompt, text and image heads.
    pub source_weight_means: [f64; 3],
    pub error: Option<String>,
}

impl SampleResult {
    /// One line of `results.jsonl`. Contains no timing, so identical runs
    /// produce identical bytes.
    pub fn log_line(&self) -> String {
        serde_json::to_string(self).expect("sample result serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub num_samples: usize,
    pub labeled: usize,
    pub accuracy: f64,
    pub zero_shot_accuracy: f64,
    /// Micro-averaged against the informative-view mask, when present.
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    pub mean_loss: Option<f64>,
    pub mean_selected: f64,
    pub failures: usize,
    pub wall_clock_ms_per_sample: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Vec<SampleResult>,
    pub summary: RunSummary,
    pub bank: Option<PrototypeBank>,
}

/// Everything computed before the prompt update.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub zero_shot_pred: usize,
    pub text_anchors: TextAnchorSet,
    pub image_anchors: Option<ImageAnchorSet>,
    pub selected_text: Vec<usize>,
    pub selected_image: Vec<usize>,
    pub selected_union: Vec<usize>,
    pub logits: SourceLogits,
    pub weights: Array2<f64>,
    pub z_ens: Array2<f64>,
    pub target: ProbVec,
    pub frozen: FrozenEnsemble,
    /// Rows of the batch listed in `selected_union`.
    pub selected_views: Array2<f64>,
}

/// Arg-max class of `tau * cos(view, E_c)`.
pub fn predict(emb: ArrayView2<'_, f64>, view: ArrayView1<'_, f64>, tau: f64) -> Result<usize> {
    let mut z = Array1::zeros(emb.nrows());
    for c in 0..emb.nrows() {
        z[c] = tau * cosine_sim(view, emb.row(c))?;
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("prediction logits"));
    }
    Ok(argmax(z.view()))
}

/// Top-`q` views by `1 - H / ln C` of the base-prompt prediction.
pub fn entropy_selection(
    batch: &ViewBatch<'_>,
    base_emb: ArrayView2<'_, f64>,
    q: f64,
    tau: f64,
) -> Result<Vec<usize>> {
    let w = JointWeights {
        align: 0.0,
        conf: 1.0,
    };
    let s = joint_scores(batch.views(), base_emb, base_emb, w, tau)?;
    top_fraction_indices(&totals(&s), q)
}

/// Ranks in `[0, 1]`, lowest score 0, ties sharing their average rank.
pub fn normalized_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let denom = n.saturating_sub(1).max(1) as f64;
    ranks.iter().map(|r| r / denom).collect()
}

/// Top-`q` views by rank-normalized confidence plus rank-normalized cosine
/// similarity to the original view.
pub fn cosine_rank_selection(
    batch: &ViewBatch<'_>,
    base_emb: ArrayView2<'_, f64>,
    q: f64,
    tau: f64,
) -> Result<Vec<usize>> {
    let w = JointWeights {
        align: 0.0,
        conf: 1.0,
    };
    let conf = totals(&joint_scores(batch.views(), base_emb, base_emb, w, tau)?);
    let orig = batch.original();
    let sims = (0..batch.len())
        .map(|b| cosine_sim(batch.view(b), orig))
        .collect::<Result<Vec<_>>>()?;
    let (rc, rs) = (normalized_ranks(&conf), normalized_ranks(&sims));
    let score: Vec<f64> = rc.iter().zip(&rs).map(|(a, b)| a + b).collect();
    top_fraction_indices(&score, q)
}

fn gather_rows(views: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), views.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&views.row(r));
    }
    out
}

/// Selection, bank update and ensemble target for one sample.
///
/// `base_emb` is the encoder output at the initial prompt. The bank is
/// updated in place when the variant uses it.
pub fn prepare_sample(
    cfg: &AdaptationConfig,
    variant: &Variant,
    mut bank: Option<&mut PrototypeBank>,
    descriptions: &DescriptionBank,
    base_emb: ArrayView2<'_, f64>,
    batch: &ViewBatch<'_>,
) -> Result<Prepared> {
    let tau = cfg.tau;
    let zero_shot_pred = predict(base_emb, batch.original(), tau)?;
    let text_anchors = build_text_anchors(batch, descriptions, cfg.renormalize_anchors)?;

    let mut image_anchors = None;
    let (mut selected_text, mut selected_image) = (Vec::new(), Vec::new());
    match variant.effective_selection() {
        Selection::None => return Err(Error::InvalidConfig("variant does not adapt".into())),
        Selection::Entropy => selected_text = entropy_selection(batch, base_emb, cfg.q, tau)?,
        Selection::CosineRank => {
            selected_text = cosine_rank_selection(batch, base_emb, cfg.q, tau)?
        }
        Selection::Anchors { text, image } => {
            let seed = if text {
                filter_text(batch, &text_anchors, cfg.q, cfg.text_weights()?, tau)?
            } else {
                entropy_selection(batch, base_emb, cfg.q, tau)?
            };
            if let Some(bank) = bank.as_deref_mut() {
                commit(cfg, bank, batch, &seed, zero_shot_pred)?;
            }
            if image {
                let bank = bank
                    .as_deref()
                    .ok_or_else(|| Error::InvalidConfig("image filter needs a bank".into()))?;
                let preds = seed
                    .iter()
                    .map(|&b| text_confidence_distribution(batch.view(b), &text_anchors, tau))
                    .collect::<Result<Vec<_>>>()?;
                let ranked = select_topk_classes(&preds, cfg.k.min(bank.num_classes()))?;
                let set = ImageAnchorSet::from_ranked(&ranked, bank);
                selected_image = filter_image(
                    batch,
                    &set,
                    bank,
                    &text_anchors,
                    cfg.p,
                    cfg.image_weights()?,
                    tau,
                )?;
                image_anchors = Some(set);
            }
            if text || selected_image.is_empty() {
                // Without a text filter the seeding views stand in until the
                // image filter has anchors.
                selected_text = seed;
            }
        }
    }
    let mut selected_union = union_selection(&selected_text, &selected_image);
    if cfg.pin_original {
        selected_union = union_selection(&selected_union, &[batch.original_index()]);
    }

    let image_reps = match bank.as_deref() {
        Some(b) => b.confidence_reps(&text_anchors)?,
        None => text_anchors.anchors.clone(),
    };
    finish_prepare(
        cfg,
        variant,
        batch,
        base_emb,
        zero_shot_pred,
        text_anchors,
        image_anchors,
        selected_text,
        selected_image,
        selected_union,
        image_reps,
    )
}

fn commit(
    cfg: &AdaptationConfig,
    bank: &mut PrototypeBank,
    batch: &ViewBatch<'_>,
    seed: &[usize],
    class: usize,
) -> Result<()> {
    match cfg.bank_commit {
        BankCommit::Selected => {
            for &b in seed {
                bank.update(batch.view(b), class)?;
            }
        }
        BankCommit::Original => bank.update(batch.original(), class)?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish_prepare(
    cfg: &AdaptationConfig,
    variant: &Variant,
    batch: &ViewBatch<'_>,
    base_emb: ArrayView2<'_, f64>,
    zero_shot_pred: usize,
    text_anchors: TextAnchorSet,
    image_anchors: Option<ImageAnchorSet>,
    selected_text: Vec<usize>,
    selected_image: Vec<usize>,
    selected_union: Vec<usize>,
    image_reps: Array2<f64>,
) -> Result<Prepared> {
    let logits = SourceLogits::compute(
        batch.views(),
        &selected_union,
        base_emb,
        text_anchors.anchors.view(),
        image_reps.view(),
        cfg.tau,
    )?;
    let weights = ensemble_weights(&logits, variant.sources, variant.ensemble, cfg.epsilon)?;
    let z_ens = ensemble_logits(&logits, weights.view())?;
    let target = build_target(z_ens.view(), cfg.temperature)?;
    let frozen = if variant.sources == ActiveSources::PROMPT_ONLY {
        FrozenEnsemble::prompt_only(logits.views(), logits.classes())
    } else {
        FrozenEnsemble::from_weights(&logits, weights.view())
    };
    let selected_views = gather_rows(batch.views(), &selected_union);
    Ok(Prepared {
        zero_shot_pred,
        text_anchors,
        image_anchors,
        selected_text,
        selected_image,
        selected_union,
        logits,
        weights,
        z_ens,
        target,
        frozen,
        selected_views,
    })
}

/// A configured method bound to one bundle.
pub struct Runner<'a> {
    cfg: AdaptationConfig,
    variant: Variant,
    bundle: &'a FeatureBundle,
    enc: SurrogateEncoder,
    base_emb: Array2<f64>,
}

impl<'a> Runner<'a> {
    pub fn new(
        cfg: &AdaptationConfig,
        variant: Variant,
        bundle: &'a FeatureBundle,
    ) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder(bundle)?;
        let base_emb = enc.encode(Array1::zeros(enc.prompt_dim()).view())?;
        Ok(Runner {
            cfg: cfg.clone(),
            variant,
            bundle,
            enc,
            base_emb,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn encoder(&self) -> &SurrogateEncoder {
        &self.enc
    }

    /// Class embeddings at the initial prompt.
    pub fn base_embeddings(&self) -> ArrayView2<'_, f64> {
        self.base_emb.view()
    }

    pub fn new_bank(&self) -> Option<PrototypeBank> {
        self.variant
            .uses_bank()
            .then(|| PrototypeBank::new(self.bundle.num_classes(), self.bundle.dim()))
    }

    pub fn prepare(&self, bank: Option<&mut PrototypeBank>, index: usize) -> Result<Prepared> {
        let batch = self.bundle.batch(index)?;
        prepare_sample(
            &self.cfg,
            &self.variant,
            bank,
            &self.bundle.descriptions,
            self.base_emb.view(),
            &batch,
        )
    }

    /// Runs `steps` optimizer updates from a zero prompt. Returns the
    /// objective at the initial prompt and the final prompt.
    pub fn optimize(&self, prep: &Prepared) -> Result<(f64, Array1<f64>)> {
        let (enc, tau) = (&self.enc, self.cfg.tau);
        let views = prep.selected_views.view();
        let objective = |theta: ArrayView1<'_, f64>| -> Result<(f64, Array1<f64>)> {
            match self.variant.loss {
                LossKind::Kld => loss_and_grad(enc, theta, views, &prep.target, tau),
                LossKind::Em => entropy_loss_and_grad(enc, theta, views, &prep.frozen, tau),
            }
        };
        let adamw = self.cfg.adamw();
        let mut theta = Array1::zeros(enc.prompt_dim());
        let mut state = AdamWState::new(enc.prompt_dim());
        let mut initial = None;
        for _ in 0..self.cfg.steps {
            let (loss, grad) = objective(theta.view())?;
            initial.get_or_insert(loss);
            adamw_step(&mut state, &mut theta, grad.view(), &adamw)?;
        }
        let loss = match initial {
            Some(l) => l,
            None => match self.variant.loss {
                LossKind::Kld => kl_objective(enc, theta.view(), views, &prep.target, tau)?,
                LossKind::Em => entropy_objective(enc, theta.view(), views, &prep.frozen, tau)?,
            },
        };
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("prompt parameter"));
        }
        Ok((loss, theta))
    }

    /// Full pipeline for one sample. Numerical failures fall back to the
    /// zero-shot prediction and are recorded in the result.
    pub fn adapt(&self, bank: Option<&mut PrototypeBank>, index: usize) -> SampleResult {
        let sample = &self.bundle.samples[index];
        let mut result = SampleResult {
            sample_id: sample.id,
            label: sample.label,
            zero_shot_pred: 0,
            adapted_pred: 0,
            selected_text: Vec::new(),
            selected_image: Vec::new(),
            selected_union: Vec::new(),
            loss: None,
            source_weight_means: [0.0; 3],
            error: None,
        };
        let orig = sample.views.row(self.bundle.original_view_index);
        match predict(self.base_emb.view(), orig, self.cfg.tau) {
            Ok(p) => {
                result.zero_shot_pred = p;
                result.adapted_pred = p;
            }
            Err(e) => {
                result.error = Some(e.to_string());
                return result;
            }
        }
        if !self.variant.adapts() {
            return result;
        }
        let outcome = self.prepare(bank, index).and_then(|prep| {
            result.selected_text = prep.selected_text.clone();
            result.selected_image = prep.selected_image.clone();
            result.selected_union = prep.selected_union.clone();
            for (k, m) in result.source_weight_means.iter_mut().enumerate() {
                *m = prep.weights.column(k).mean().unwrap_or(0.0);
            }
            let (loss, theta) = self.optimize(&prep)?;
            let emb = self.enc.encode(theta.view())?;
            Ok((loss, predict(emb.view(), orig, self.cfg.tau)?))
        });
        match outcome {
            Ok((loss, pred)) => {
                result.loss = Some(loss);
                result.adapted_pred = pred;
            }
            Err(e) => result.error = Some(e.to_string()),
        }
        result
    }

    /// Processes the stream in order. Variants without a bank are
    /// independent per sample and run in parallel.
    pub fn run(&self) -> RunOutput {
        let start = Instant::now();
        let n = self.bundle.samples.len();
        let mut bank = self.new_bank();
        let results = match bank.as_mut() {
            Some(bank) => (0..n).map(|i| self.adapt(Some(bank), i)).collect(),
            None => par::map_range(n, |i| self.adapt(None, i)),
        };
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let summary = summarize(&self.variant.name, &results, self.bundle, elapsed);
        RunOutput {
            results,
            summary,
            bank,
        }
    }
}

pub fn run_stream(cfg: &AdaptationConfig, bundle: &FeatureBundle) -> Result<RunOutput> {
    Ok(Runner::new(cfg, cfg.method.variant(), bundle)?.run())
}

pub fn run_variant(
    cfg: &AdaptationConfig,
    variant: &Variant,
    bundle: &FeatureBundle,
) -> Result<RunOutput> {
    Ok(Runner::new(cfg, variant.clone(), bundle)?.run())
}

pub fn summarize(
    method: &str,
    results: &[SampleResult],
    bundle: &FeatureBundle,
    elapsed_ms: f64,
) -> RunSummary {
    let n = results.len();
    let labeled = results.iter().filter(|r| r.label.is_some()).count();
    let hits = |f: fn(&SampleResult) -> usize| {
        results.iter().filter(|r| r.label == Some(f(r))).count() as f64
    };
    let frac = |x: f64, d: usize| if d == 0 { 0.0 } else { x / d as f64 };

    let (mut tp, mut picked, mut relevant) = (0usize, 0usize, 0usize);
    let mut have_mask = false;
    for (i, r) in results.iter().enumerate() {
        if let Some(mask) = bundle.mask(i) {
            have_mask = true;
            if r.selected_union.is_empty() {
                continue;
            }
            tp += r.selected_union.iter().filter(|&&b| mask[b]).count();
            picked += r.selected_union.len();
            relevant += mask.iter().filter(|&&m| m).count();
        }
    }
    let losses: Vec<f64> = results.iter().filter_map(|r| r.loss).collect();
    RunSummary {
        method: method.to_string(),
        num_samples: n,
        labeled,
        accuracy: frac(hits(|r| r.adapted_pred), labeled),
        zero_shot_accuracy: frac(hits(|r| r.zero_shot_pred), labeled),
        selection_precision: (have_mask && picked > 0).then(|| tp as f64 / picked as f64),
        selection_recall: (have_mask && relevant > 0).then(|| tp as f64 / relevant as f64),
        mean_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        mean_selected: frac(
            results
                .iter()
                .map(|r| r.selected_union.len())
                .sum::<usize>() as f64,
            n,
        ),
        failures: results.iter().filter(|r| r.error.is_some()).count(),
        wall_clock_ms_per_sample: frac(elapsed_ms, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Sample;
    use crate::embedding::l2_normalize;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::zeros((rows, d));
        for mut r in m.rows_mut() {
            let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            r.assign(&l2_normalize(v.view()).unwrap());
        }
        m
    }

    fn random_bundle(seed: u64, c: usize, b: usize, d: usize, samples: usize) -> FeatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let desc = unit_rows(&mut rng, c * n, d)
            .into_shape_with_order((c, n, d))
            .unwrap();
        let samples = (0..samples)
            .map(|i| Sample {
                id: i as u64,
                label: Some(i % c),
                views: unit_rows(&mut rng, b, d),
            })
            .collect();
        FeatureBundle {
            descriptions: DescriptionBank::new(desc, (0..c).map(|i| format!("c{i}")).collect())
                .unwrap(),
            base_class_embeddings: unit_rows(&mut rng, c, d),
            samples,
            original_view_index: 0,
            informative_mask: None,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("tpt".parse::<Method>().is_err());
    }

    #[test]
    fn ablation_grid_has_eleven_distinct_rows() {
        let rows = ablation_variants();
        assert_eq!(rows.len(), 11);
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                assert_ne!(a.name, b.name);
            }
        }
        let base = Method::TptEntropy.variant();
        assert_eq!(rows[0].selection, base.selection);
        assert_eq!(rows[0].sources, base.sources);
        assert_eq!(rows[0].loss, base.loss);
        let full = Method::Ours.variant();
        for r in [&rows[6], &rows[10]] {
            assert_eq!(
                (r.selection, r.sources, r.loss, r.ensemble),
                (full.selection, full.sources, full.loss, full.ensemble)
            );
        }
        assert_eq!(rows[9].ensemble, EnsembleMode::SimpleAverage);
    }

    #[test]
    fn config_validation() {
        let ok = AdaptationConfig::default();
        ok.validate().unwrap();
        for bad in [
            AdaptationConfig {
                q: 0.0,
                ..ok.clone()
            },
            AdaptationConfig {
                p: 1.5,
                ..ok.clone()
            },
            AdaptationConfig {
                temperature: 0.0,
                ..ok.clone()
            },
            AdaptationConfig {
                tau: -1.0,
                ..ok.clone()
            },
            AdaptationConfig {
                lr: 0.0,
                ..ok.clone()
            },
            AdaptationConfig { k: 0, ..ok.clone() },
            AdaptationConfig {
                alpha: [0.0, 0.0],
                ..ok.clone()
            },
            AdaptationConfig {
                beta: [f64::NAN, 1.0],
                ..ok.clone()
            },
        ] {
            assert!(
                matches!(bad.validate(), Err(Error::InvalidConfig(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn normalized_ranks_average_ties() {
        assert_eq!(normalized_ranks(&[3.0, 1.0, 2.0]), vec![1.0, 0.0, 0.5]);
        assert_eq!(normalized_ranks(&[1.0, 1.0, 5.0]), vec![0.25, 0.25, 1.0]);
        assert_eq!(normalized_ranks(&[7.0]), vec![0.0]);
    }

    #[test]
    fn zero_steps_is_zero_shot() {
        let bundle = random_bundle(5, 5, 16, 12, 12);
        for m in Method::ALL {
            let cfg = AdaptationConfig {
                method: m,
                steps: 0,
                ..Default::default()
            };
            let out = run_stream(&cfg, &bundle).unwrap();
            for r in &out.results {
                assert_eq!(r.adapted_pred, r.zero_shot_pred, "{m}");
                assert!(r.error.is_none(), "{m}: {:?}", r.error);
            }
        }
    }

    #[test]
    fn union_is_text_or_image() {
        let bundle = random_bundle(9, 6, 16, 10, 10);
        let cfg = AdaptationConfig {
            p: 0.2,
            ..Default::default()
        };
        let out = run_stream(&cfg, &bundle).unwrap();
        for r in &out.results {
            assert_eq!(
                r.selected_union,
                union_selection(&r.selected_text, &r.selected_image)
            );
            assert_eq!(r.selected_text.len(), 2);
            let w: f64 = r.source_weight_means.iter().sum();
            assert!((w - 1.0).abs() < 1e-6);
        }
        let bank = out.bank.unwrap();
        assert_eq!(bank.counts().iter().sum::<u64>(), 20);
    }

    #[test]
    fn zero_shot_accuracy_is_definitional() {
        let bundle = random_bundle(3, 4, 8, 8, 20);
        let cfg = AdaptationConfig {
            method: Method::ZeroShot,
            ..Default::default()
        };
        let out = run_stream(&cfg, &bundle).unwrap();
        let runner = Runner::new(&cfg, cfg.method.variant(), &bundle).unwrap();
        let want = bundle
            .samples
            .iter()
            .filter(|s| {
                predict(runner.base_embeddings(), s.views.row(0), 100.0).unwrap()
                    == s.label.unwrap()
            })
            .count() as f64
            / 20.0;
        assert_eq!(out.summary.accuracy, want);
        assert_eq!(out.summary.selection_precision, None);
        assert!(out.results.iter().all(|r| r.loss.is_none()));
    }

    #[test]
    fn empty_stream_summary() {
        let mut bundle = random_bundle(1, 3, 4, 4, 0);
        bundle.samples.clear();
        let out = run_stream(&AdaptationConfig::default(), &bundle).unwrap();
        assert_eq!(out.summary.num_samples, 0);
        assert_eq!(out.summary.accuracy, 0.0);
        assert_eq!(out.summary.mean_loss, None);
        assert_eq!(out.summary.wall_clock_ms_per_sample, 0.0);
    }

    #[test]
    fn reruns_are_identical() {
        let bundle = random_bundle(73, 5, 16, 8, 10);
        let cfg = AdaptationConfig {
            seed: 73,
            steps: 2,
            ..Default::default()
        };
        let a = run_stream(&cfg, &bundle).unwrap().results;
        let b = run_stream(&cfg, &bundle).unwrap().results;
        assert_eq!(a, b);
    }

    #[test]
    fn simple_average_weights_are_a_third() {
        let bundle = random_bundle(2, 4, 16, 8, 4);
        let cfg = AdaptationConfig::default();
        let runner = Runner::new(&cfg, Method::KldSimple.variant(), &bundle).unwrap();
        let mut bank = runner.new_bank();
        for i in 0..4 {
            let prep = runner.prepare(bank.as_mut(), i).unwrap();
            assert!(prep.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn confidence_noise_view_is_picked_by_entropy_selection() {
        // Two classes; view 5 sits exactly on class 1 while the rest are
        // vague mixtures near class 0.
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let d = 6;
        let mut base = Array2::zeros((2, d));
        base[[0, 0]] = 1.0;
        base[[1, 1]] = 1.0;
        let mut views = Array2::zeros((10, d));
        for b in 0..10 {
            let mut v = Array1::zeros(d);
            v[0] = 0.3;
            v[1] = 0.25;
            for j in 2..d {
                let x: f64 = StandardNormal.sample(&mut rng);
                v[j] = x;
            }
            views.row_mut(b).assign(&l2_normalize(v.view()).unwrap());
        }
        views.row_mut(5).assign(&base.row(1));
        let batch = ViewBatch::new(views.view(), 0).unwrap();
        let sel = entropy_selection(&batch, base.view(), 0.1, 100.0).unwrap();
        assert_eq!(sel, vec![5]);
    }

    #[test]
    fn cosine_rank_prefers_duplicates_of_the_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut views = unit_rows(&mut rng, 8, 5);
        let orig = views.row(0).to_owned();
        views.row_mut(4).assign(&orig);
        let base = unit_rows(&mut rng, 3, 5);
        let batch = ViewBatch::new(views.view(), 0).unwrap();
        let sel = cosine_rank_selection(&batch, base.view(), 0.25, 100.0).unwrap();
        assert_eq!(sel.len(), 2);
        // Equal confidence ranks too, so both copies top the combined score
        // unless another view beats them on confidence by a full rank margin.
        let w = JointWeights {
            align: 0.0,
            conf: 1.0,
        };
        let conf = totals(&joint_scores(views.view(), base.view(), base.view(), w, 100.0).unwrap());
        let rc = normalized_ranks(&conf);
        let sims: Vec<f64> = (0..8)
            .map(|b| cosine_sim(views.row(b), orig.view()).unwrap())
            .collect();
        let rs = normalized_ranks(&sims);
        let mut want: Vec<usize> = {
            let score: Vec<f64> = (0..8).map(|b| rc[b] + rs[b]).collect();
            let mut idx: Vec<usize> = (0..8).collect();
            idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            idx.truncate(2);
            idx
        };
        want.sort();
        assert_eq!(sel, want);
        assert_eq!(rs[0], rs[4]);
        assert!(rs[0] >= 6.5 / 7.0);
    }

    #[test]
    fn prompt_resets_between_samples() {
        let bundle = random_bundle(11, 4, 16, 8, 3);
        let cfg = AdaptationConfig::default();
        let runner = Runner::new(&cfg, Method::TptEntropy.variant(), &bundle).unwrap();
        // Sample 2 alone and sample 2 after 0 and 1 adapt identically.
        let alone = runner.adapt(None, 2);
        let _ = runner.adapt(None, 0);
        let _ = runner.adapt(None, 1);
        assert_eq!(runner.adapt(None, 2), alone);
    }

    #[test]
    fn bank_commit_modes() {
        let bundle = random_bundle(12, 4, 20, 8, 5);
        for (mode, per_sample) in [(BankCommit::Selected, 2u64), (BankCommit::Original, 1)] {
            let cfg = AdaptationConfig {
                bank_commit: mode,
                ..Default::default()
            };
            let out = run_stream(&cfg, &bundle).unwrap();
            let bank = out.bank.unwrap();
            assert_eq!(bank.counts().iter().sum::<u64>(), 5 * per_sample);
            for r in &out.results {
                assert!(bank.is_populated(r.zero_shot_pred));
            }
        }
    }

    #[test]
    fn pin_original_adds_view_zero() {
        let bundle = random_bundle(13, 4, 16, 8, 4);
        let cfg = AdaptationConfig {
            pin_original: true,
            ..Default::default()
        };
        for r in run_stream(&cfg, &bundle).unwrap().results {
            assert_eq!(r.selected_union.first(), Some(&0));
        }
    }

    #[test]
    fn sample_failure_falls_back_to_zero_shot() {
        let mut bundle = random_bundle(14, 3, 8, 6, 2);
        for s in &mut bundle.samples {
            s.views[[3, 0]] = f64::NAN;
        }
        let cfg = AdaptationConfig::default();
        let out = run_stream(&cfg, &bundle).unwrap();
        for r in &out.results {
            assert!(r.error.is_some());
            assert_eq!(r.adapted_pred, r.zero_shot_pred);
        }
        assert_eq!(out.summary.failures, 2);
    }

    #[test]
    fn descriptions_shape_is_checked() {
        let bundle = random_bundle(15, 3, 8, 6, 1);
        let other = DescriptionBank::new(
            Array3::from_elem((3, 1, 5), 1.0 / 5f64.sqrt()),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let runner = Runner::new(
            &AdaptationConfig::default(),
            Method::Ours.variant(),
            &bundle,
        )
        .unwrap();
        let batch = bundle.batch(0).unwrap();
        let err = prepare_sample(
            runner.config(),
            runner.variant(),
            None,
            &other,
            runner.base_embeddings(),
            &batch,
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}

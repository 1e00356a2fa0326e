//! Seeded synthetic feature bundles.
//!
//! Every embedding is a unit vector built from a few named directions:
//! a shared component `m` common to all text and image embeddings, one
//! direction `a_c` per class, a background direction `g`, and per-class
//! attribute directions `d_{c,i}` that the descriptions mention. Views of a
//! sample are either informative (class plus attributes), plain background,
//! or boosted background pulled toward one wrong class. Boosted views are
//! confidently misclassified by the base prompt but carry no attribute
//! content, so they align less with description anchors.

pub mod oracle;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, Sample};
use crate::embedding::{l2_normalize, norm, ZERO_NORM};
use crate::error::{Error, Result};
use crate::par;
use crate::text_anchor::DescriptionBank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "N")]
    pub descriptions_per_class: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "B")]
    pub views_per_sample: usize,
    pub num_samples: usize,
    /// Share of views (original included) that show the object.
    pub informative_fraction: f64,
    /// Pull of boosted background views toward a wrong class.
    pub background_confidence_boost: f64,
    /// Share of background views that are boosted.
    pub boosted_fraction: f64,
    /// Rotation (radians) applied to every view in the class planes
    /// `(a_{2j}, a_{2j+1})`.
    pub shift_angle: f64,
    /// Isotropic noise norm on views; description and prompt noise scale
    /// with it.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Class component of image views, relative to the shared component.
    pub view_class_strength: f64,
    /// Class component of text embeddings.
    pub text_class_strength: f64,
    /// Attribute component of informative views.
    pub view_attribute_strength: f64,
    /// Attribute component of each description.
    pub text_attribute_strength: f64,
    /// Background component of non-informative views.
    pub background_strength: f64,
    /// Prompt noise relative to `noise_sigma`.
    pub prompt_noise_ratio: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            descriptions_per_class: 8,
            dim: 64,
            views_per_sample: 64,
            num_samples: 500,
            informative_fraction: 0.3,
            background_confidence_boost: 0.2,
            boosted_fraction: 0.3,
            shift_angle: 0.72,
            noise_sigma: 0.17,
            seed: 42,
            view_class_strength: 0.15,
            text_class_strength: 0.5,
            view_attribute_strength: 0.2,
            text_attribute_strength: 0.35,
            background_strength: 0.6,
            prompt_noise_ratio: 1.2,
        }
    }
}

impl SyntheticSpec {
    /// Named presets: `default` (the benchmark), `tiny`, `noiseless`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(SyntheticSpec::default()),
            "tiny" => Ok(SyntheticSpec {
                classes: 4,
                descriptions_per_class: 3,
                dim: 16,
                views_per_sample: 16,
                num_samples: 12,
                ..SyntheticSpec::default()
            }),
            "noiseless" => Ok(SyntheticSpec {
                informative_fraction: 1.0,
                noise_sigma: 0.0,
                shift_angle: 0.0,
                background_confidence_boost: 0.0,
                num_samples: 20,
                ..SyntheticSpec::default()
            }),
            other => Err(Error::InvalidSpec(format!(
                "unknown preset {other:?}; expected default, tiny or noiseless"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes == 0
            || self.descriptions_per_class == 0
            || self.dim == 0
            || self.views_per_sample == 0
        {
            return bad("C, N, D and B must all be at least 1".into());
        }
        if self.dim < 3 {
            return bad(format!(
                "D = {} leaves no room for shared and background directions",
                self.dim
            ));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return bad(format!(
                "informative_fraction = {}",
                self.informative_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.boosted_fraction) {
            return bad(format!("boosted_fraction = {}", self.boosted_fraction));
        }
        for (name, v) in [
            (
                "background_confidence_boost",
                self.background_confidence_boost,
            ),
            ("noise_sigma", self.noise_sigma),
            ("view_class_strength", self.view_class_strength),
            ("text_class_strength", self.text_class_strength),
            ("view_attribute_strength", self.view_attribute_strength),
            ("text_attribute_strength", self.text_attribute_strength),
            ("background_strength", self.background_strength),
            ("prompt_noise_ratio", self.prompt_noise_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}"));
            }
        }
        if !self.shift_angle.is_finite() {
            return bad(format!("shift_angle = {}", self.shift_angle));
        }
        if self.views_per_sample as u64 > u32::MAX as u64 || self.classes as u64 > i32::MAX as u64 {
            return bad("B or C too large for the sample record".into());
        }
        Ok(())
    }

    /// Informative views per sample, the original included.
    pub fn informative_count(&self) -> usize {
        let b = self.views_per_sample;
        ((self.informative_fraction * b as f64).round() as usize).clamp(1, b)
    }
}

/// The fixed directions of one synthetic world.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub shared: Array1<f64>,
    pub background: Array1<f64>,
    /// `C x D`.
    pub classes: Array2<f64>,
    /// `C x N x D`, orthogonal to the shared, background and class
    /// directions when the dimension allows.
    pub attributes: Array3<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    (0..d)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x
        })
        .collect()
}

/// Random unit vector.
fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = gaussian(rng, d);
        if norm(v.view()) > ZERO_NORM {
            return l2_normalize(v.view()).expect("nonzero");
        }
    }
}

/// Remove the components along each (unit) basis vector, then normalize.
/// Returns `None` when nothing is left.
fn orthogonalize(v: &Array1<f64>, basis: &[Array1<f64>]) -> Option<Array1<f64>> {
    let mut r = v.clone();
    for b in basis {
        let c = r.dot(b);
        r.scaled_add(-c, b);
    }
    (norm(r.view()) > 1e-8).then(|| l2_normalize(r.view()).expect("nonzero"))
}

impl Geometry {
    pub fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let (c, n, d) = (spec.classes, spec.descriptions_per_class, spec.dim);
        let mut basis: Vec<Array1<f64>> = Vec::new();
        let orth = d >= c + 2;
        let mut draw = |basis: &mut Vec<Array1<f64>>| {
            let v = random_unit(rng, d);
            let u = if orth {
                orthogonalize(&v, basis).unwrap_or(v)
            } else {
                v
            };
            basis.push(u.clone());
            u
        };
        let shared = draw(&mut basis);
        let background = draw(&mut basis);
        let mut classes = Array2::zeros((c, d));
        for k in 0..c {
            let a = draw(&mut basis);
            classes.row_mut(k).assign(&a);
        }
        let mut attributes = Array3::zeros((c, n, d));
        let room = d > c + 2;
        for k in 0..c {
            for i in 0..n {
                let v = random_unit(rng, d);
                let u = if room {
                    orthogonalize(&v, &basis).unwrap_or(v)
                } else {
                    v
                };
                attributes.slice_mut(ndarray::s![k, i, ..]).assign(&u);
            }
        }
        Geometry {
            shared,
            background,
            classes,
            attributes,
        }
    }
}

/// Rotate `v` by `angle` inside every class plane `(a_{2j}, a_{2j+1})`.
/// The class directions are orthonormal, so this is an isometry.
pub fn rotate_class_planes(v: &mut Array1<f64>, classes: &Array2<f64>, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for j in 0..classes.nrows() / 2 {
        let (a, b) = (classes.row(2 * j), classes.row(2 * j + 1));
        let (x, y) = (v.dot(&a), v.dot(&b));
        let (nx, ny) = (c * x - s * y, s * x + c * y);
        v.scaled_add(nx - x, &a);
        v.scaled_add(ny - y, &b);
    }
}

/// Round to the nearest `f32` and renormalize, so the stored bundle holds
/// exactly the in-memory values.
fn finish(v: Array1<f64>) -> Array1<f64> {
    let u = l2_normalize(v.view()).expect("synthetic embeddings are nonzero");
    u.mapv(|x| x as f32 as f64)
}

fn noise(rng: &mut ChaCha8Rng, d: usize, sigma: f64) -> Array1<f64> {
    if sigma == 0.0 {
        return Array1::zeros(d);
    }
    gaussian(rng, d) * (sigma / (d as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Original,
    Informative,
    Background,
    Boosted,
}

/// Generated sample plus the role of each view.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub kinds: Vec<ViewKind>,
    pub wrong_class: Option<usize>,
}

fn generate_sample(spec: &SyntheticSpec, geo: &Geometry, index: usize) -> GeneratedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let (c, n, d, b) = (
        spec.classes,
        spec.descriptions_per_class,
        spec.dim,
        spec.views_per_sample,
    );
    let label = rng.random_range(0..c);
    let wrong = (c > 1).then(|| (label + rng.random_range(1..c)) % c);

    // Which attributes this image shows, and how strongly.
    let mut attr = Array1::<f64>::zeros(d);
    for i in 0..n {
        let w: f64 = StandardNormal.sample(&mut rng);
        attr.scaled_add(w.abs(), &geo.attributes.slice(ndarray::s![label, i, ..]));
    }
    let an = norm(attr.view());
    if an > ZERO_NORM {
        attr /= an;
    }

    let informative = spec.informative_count();
    let mut others: Vec<usize> = (1..b).collect();
    others.shuffle(&mut rng);
    let mut kinds = vec![ViewKind::Background; b];
    kinds[0] = ViewKind::Original;
    for &v in &others[..informative - 1] {
        kinds[v] = ViewKind::Informative;
    }
    let background = &others[informative - 1..];
    let boosted = if spec.background_confidence_boost > 0.0 && wrong.is_some() {
        (spec.boosted_fraction * background.len() as f64).round() as usize
    } else {
        0
    };
    for &v in &background[..boosted] {
        kinds[v] = ViewKind::Boosted;
    }

    let sigma = spec.noise_sigma;
    let mut views = Array2::zeros((b, d));
    for (v, kind) in kinds.iter().enumerate() {
        let mut e = geo.shared.clone();
        match kind {
            ViewKind::Original | ViewKind::Informative => {
                e.scaled_add(spec.view_class_strength, &geo.classes.row(label));
                e.scaled_add(spec.view_attribute_strength, &attr);
            }
            ViewKind::Background => e.scaled_add(spec.background_strength, &geo.background),
            ViewKind::Boosted => {
                e.scaled_add(spec.background_strength, &geo.background);
                let w = wrong.expect("boosted views need a wrong class");
                e.scaled_add(spec.background_confidence_boost, &geo.classes.row(w));
            }
        }
        e += &noise(&mut rng, d, sigma);
        let mut e = l2_normalize(e.view()).expect("nonzero view");
        rotate_class_planes(&mut e, &geo.classes, spec.shift_angle);
        views.row_mut(v).assign(&finish(e));
    }
    GeneratedSample {
        sample: Sample {
            id: index as u64,
            label: Some(label),
            views,
        },
        kinds,
        wrong_class: if boosted > 0 { wrong } else { None },
    }
}

/// Generate the world and every sample. Identical specs give identical
/// output regardless of thread count.
pub fn generate(spec: &SyntheticSpec) -> Result<(FeatureBundle, Vec<GeneratedSample>, Geometry)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geo = Geometry::sample(spec, &mut rng);
    let (c, n, d) = (spec.classes, spec.descriptions_per_class, spec.dim);
    let text_sigma = 0.4 * spec.noise_sigma;
    let prompt_sigma = spec.prompt_noise_ratio * spec.noise_sigma;

    let mut desc = Array3::zeros((c, n, d));
    let mut base = Array2::zeros((c, d));
    for k in 0..c {
        for i in 0..n {
            let mut w = geo.shared.clone();
            w.scaled_add(spec.text_class_strength, &geo.classes.row(k));
            w.scaled_add(
                spec.text_attribute_strength,
                &geo.attributes.slice(ndarray::s![k, i, ..]),
            );
            w += &noise(&mut rng, d, text_sigma);
            desc.slice_mut(ndarray::s![k, i, ..]).assign(&finish(w));
        }
        let mut u = geo.shared.clone();
        u.scaled_add(spec.text_class_strength, &geo.classes.row(k));
        u += &noise(&mut rng, d, prompt_sigma);
        base.row_mut(k).assign(&finish(u));
    }

    let generated = par::map_range(spec.num_samples, |i| generate_sample(spec, &geo, i));
    let mask = generated
        .iter()
        .map(|g| {
            g.kinds
                .iter()
                .map(|k| matches!(k, ViewKind::Original | ViewKind::Informative))
                .collect()
        })
        .collect();
    let bundle = FeatureBundle {
        descriptions: DescriptionBank::new(
            desc,
            (0..c).map(|k| format!("class_{k:03}")).collect(),
        )?,
        base_class_embeddings: base,
        samples: generated.iter().map(|g| g.sample.clone()).collect(),
        original_view_index: 0,
        informative_mask: Some(mask),
    };
    bundle.validate()?;
    Ok((bundle, generated, geo))
}

pub fn generate_bundle(spec: &SyntheticSpec) -> Result<FeatureBundle> {
    Ok(generate(spec)?.0)
}

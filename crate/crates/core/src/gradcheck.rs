//! Finite-difference checks of the analytic prompt gradients.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, softmax, ProbVec};
use crate::ensemble::{
    kl_objective, loss_and_grad, prompt_prediction, EncoderMode, SurrogateEncoder,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub prompt_dim: usize,
    pub views: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Scale one gradient coordinate before comparing. Negative control.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 50,
            seed: 0,
            classes: 10,
            dim: 16,
            prompt_dim: 8,
            views: 6,
            step: 1e-5,
            tolerance: 1e-5,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub instance: usize,
    pub mode: EncoderMode,
    pub tau: f64,
    pub loss: f64,
    pub rel_error: f64,
    pub encoder_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
    pub max_encoder_rel_error: f64,
    /// Gradient norm at a target equal to the current prediction.
    pub stationary_grad_norm: f64,
    pub passed: bool,
}

/// `max|a - b| / max(max|a|, max|b|, 1e-12)`.
pub fn relative_error<'a>(
    a: impl IntoIterator<Item = &'a f64> + Clone,
    b: impl IntoIterator<Item = &'a f64> + Clone,
) -> f64 {
    let diff = a
        .clone()
        .into_iter()
        .zip(b.clone())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.into_iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

/// Central differences of a scalar function.
pub fn central_difference(
    f: impl Fn(ArrayView1<'_, f64>) -> Result<f64>,
    theta: ArrayView1<'_, f64>,
    h: f64,
) -> Result<Array1<f64>> {
    let mut g = Array1::zeros(theta.len());
    let mut t = theta.to_owned();
    for i in 0..theta.len() {
        t[i] = theta[i] + h;
        let fp = f(t.view())?;
        t[i] = theta[i] - h;
        let fm = f(t.view())?;
        t[i] = theta[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

fn normal(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Array1<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            s * x
        })
        .collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((rows, d));
    for mut r in m.rows_mut() {
        r.assign(&l2_normalize(normal(rng, d, 1.0).view())?);
    }
    Ok(m)
}

/// A random encoder, view set, target and prompt.
pub struct Instance {
    pub enc: SurrogateEncoder,
    pub views: Array2<f64>,
    pub target: ProbVec,
    pub theta: Array1<f64>,
    pub tau: f64,
}

pub fn random_instance(cfg: &GradcheckConfig, index: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mode = if index.is_multiple_of(2) {
        EncoderMode::Linear
    } else {
        EncoderMode::SharedOffset
    };
    let tau: f64 = [1.0, 10.0, 100.0][index % 3];
    let base = unit_rows(&mut rng, cfg.classes, cfg.dim)?;
    let enc = SurrogateEncoder::new(base, mode, cfg.prompt_dim, 1.0, rng.random())?;
    let views = unit_rows(&mut rng, cfg.views, cfg.dim)?;
    let target = softmax(normal(&mut rng, cfg.classes, 2.0).view(), 1.0)?;
    // Small prompts keep tau = 100 instances away from saturation.
    let theta = normal(&mut rng, cfg.prompt_dim, 0.3 / tau.sqrt());
    Ok(Instance {
        enc,
        views,
        target,
        theta,
        tau,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut cases = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let inst = random_instance(cfg, i)?;
        let (enc, views, tau) = (&inst.enc, inst.views.view(), inst.tau);
        let (loss, mut grad) = loss_and_grad(enc, inst.theta.view(), views, &inst.target, tau)?;
        if cfg.corrupt && !grad.is_empty() {
            grad[0] = 1.5 * grad[0] + 1e-3;
        }
        let fd = central_difference(
            |t| kl_objective(enc, t, views, &inst.target, tau),
            inst.theta.view(),
            cfg.step,
        )?;

        // Encoder Jacobian along a random direction.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        rng.set_stream(i as u64);
        let dir = normal(&mut rng, cfg.prompt_dim, 1.0);
        let jv = enc.jvp(inst.theta.view(), dir.view())?;
        let plus = enc.encode((&inst.theta + &(&dir * cfg.step)).view())?;
        let minus = enc.encode((&inst.theta - &(&dir * cfg.step)).view())?;
        let fd_jv = (plus - minus) / (2.0 * cfg.step);

        cases.push(GradcheckCase {
            instance: i,
            mode: enc.mode(),
            tau,
            loss,
            rel_error: relative_error(grad.iter(), fd.iter()),
            encoder_rel_error: relative_error(jv.iter(), fd_jv.iter()),
        });
    }

    // Target equal to the prediction at theta = 0: zero loss, zero gradient.
    let stationary_grad_norm = if cfg.instances > 0 {
        let inst = random_instance(cfg, 0)?;
        let zero = Array1::zeros(cfg.prompt_dim);
        let target = prompt_prediction(&inst.enc, zero.view(), inst.views.view(), inst.tau)?;
        let (_, g) = loss_and_grad(&inst.enc, zero.view(), inst.views.view(), &target, inst.tau)?;
        g.dot(&g).sqrt()
    } else {
        0.0
    };

    let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let max_encoder_rel_error = cases
        .iter()
        .map(|c| c.encoder_rel_error)
        .fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < cfg.tolerance
            && max_encoder_rel_error < cfg.tolerance
            && stationary_grad_norm < 1e-9,
        cases,
        max_rel_error,
        max_encoder_rel_error,
        stationary_grad_norm,
    })
}

//! Brute-force reference for one sample of the anchor pipeline.
//!
//! Plain nested loops over `Vec<f64>` with no calls into the main modules.
//! Used only to certify the main path on small instances.

// Index loops are the point here: they mirror the formulas term by term.
#![allow(clippy::needless_range_loop)]

#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    pub q: f64,
    pub p: f64,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub k: usize,
    pub tau: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub renormalize: bool,
    /// Commit every text-selected view (true) or only the original view.
    pub commit_selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleBank {
    pub prototypes: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub zero_shot_pred: usize,
    pub text: Vec<usize>,
    pub image: Vec<usize>,
    pub union: Vec<usize>,
    /// Prompt, text and image logits, each `|union| x C`.
    pub logits: [Vec<Vec<f64>>; 3],
    pub weights: Vec<[f64; 3]>,
    pub z_ens: Vec<Vec<f64>>,
    pub q_tilde: Vec<f64>,
    pub bank: OracleBank,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    c.clamp(-1.0, 1.0)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mut m = z[0];
    for &x in z {
        if x > m {
            m = x;
        }
    }
    let mut out = Vec::with_capacity(z.len());
    let mut s = 0.0;
    for &x in z {
        let e = (x - m).exp();
        out.push(e);
        s += e;
    }
    for x in out.iter_mut() {
        *x /= s;
    }
    out
}

fn confidence(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 1.0;
    }
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    1.0 - (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Best `count` indices by score (ties to the lower index), sorted.
fn pick(scores: &[f64], fraction: f64) -> Vec<usize> {
    let n = scores.len();
    let count = ((fraction * n as f64 + 0.5).floor() as usize).clamp(1, n);
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    for _ in 0..count {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(j) if scores[i] > scores[j] => best = Some(i),
                _ => {}
            }
        }
        let j = best.expect("count <= n");
        taken[j] = true;
        out.push(j);
    }
    out.sort();
    out
}

fn scaled_cos_row(view: &[f64], reps: &[Vec<f64>], tau: f64) -> Vec<f64> {
    reps.iter().map(|r| tau * cos(view, r)).collect()
}

pub fn oracle_pipeline(
    views: &[Vec<f64>],
    original: usize,
    descriptions: &[Vec<Vec<f64>>],
    base: &[Vec<f64>],
    bank: &OracleBank,
    prm: &OracleParams,
) -> OracleOutput {
    let b_len = views.len();
    let c_len = descriptions.len();
    let n_len = descriptions[0].len();
    let d_len = views[0].len();

    let mut prompt = Vec::new();
    for u in base {
        let n = dot(u, u).sqrt();
        prompt.push(u.iter().map(|x| x / n).collect::<Vec<f64>>());
    }
    let zs = scaled_cos_row(&views[original], &prompt, prm.tau);
    let mut zero_shot_pred = 0;
    for c in 1..c_len {
        if zs[c] > zs[zero_shot_pred] {
            zero_shot_pred = c;
        }
    }

    // Class means of the descriptions.
    let mut means = vec![vec![0.0; d_len]; c_len];
    for c in 0..c_len {
        for i in 0..n_len {
            for j in 0..d_len {
                means[c][j] += descriptions[c][i][j];
            }
        }
        for j in 0..d_len {
            means[c][j] /= n_len as f64;
        }
    }
    // Averaged description weights.
    let mut abar = vec![vec![0.0; n_len]; c_len];
    for v in views {
        for c in 0..c_len {
            let base_sim = cos(v, &means[c]);
            let s: Vec<f64> = (0..n_len)
                .map(|i| cos(v, &descriptions[c][i]) - base_sim)
                .collect();
            let a = softmax(&s);
            for i in 0..n_len {
                abar[c][i] += a[i];
            }
        }
    }
    let mut anchors = vec![vec![0.0; d_len]; c_len];
    for c in 0..c_len {
        for i in 0..n_len {
            abar[c][i] /= b_len as f64;
            for j in 0..d_len {
                anchors[c][j] += abar[c][i] * descriptions[c][i][j];
            }
        }
        if prm.renormalize {
            let n = dot(&anchors[c], &anchors[c]).sqrt();
            for j in 0..d_len {
                anchors[c][j] /= n;
            }
        }
    }

    // Text filter.
    let mut text_scores = Vec::new();
    for v in views {
        let z = scaled_cos_row(v, &anchors, prm.tau);
        let mut align = f64::NEG_INFINITY;
        for a in &anchors {
            align = align.max(cos(v, a));
        }
        text_scores.push(prm.alpha[0] * align + prm.alpha[1] * confidence(&softmax(&z)));
    }
    let text = pick(&text_scores, prm.q);

    // Bank update under the zero-shot class.
    let mut out_bank = bank.clone();
    let commits: Vec<usize> = if prm.commit_selected {
        text.clone()
    } else {
        vec![original]
    };
    for &v in &commits {
        let n = out_bank.counts[zero_shot_pred] as f64;
        for j in 0..d_len {
            let p = out_bank.prototypes[zero_shot_pred][j];
            out_bank.prototypes[zero_shot_pred][j] = (n * p + views[v][j]) / (n + 1.0);
        }
        out_bank.counts[zero_shot_pred] += 1;
    }

    // Top-K classes by mean text-anchor prediction over the text views.
    let mut pibar = vec![0.0; c_len];
    for &v in &text {
        let p = softmax(&scaled_cos_row(&views[v], &anchors, prm.tau));
        for c in 0..c_len {
            pibar[c] += p[c] / text.len() as f64;
        }
    }
    let mut ranked: Vec<usize> = Vec::new();
    for _ in 0..prm.k.min(c_len) {
        let mut best: Option<usize> = None;
        for c in 0..c_len {
            if ranked.contains(&c) {
                continue;
            }
            match best {
                None => best = Some(c),
                Some(j) if pibar[c] > pibar[j] => best = Some(c),
                _ => {}
            }
        }
        ranked.push(best.expect("k <= C"));
    }
    let image_classes: Vec<usize> = ranked
        .into_iter()
        .filter(|&c| out_bank.counts[c] > 0)
        .collect();

    let mut reps = anchors.clone();
    for c in 0..c_len {
        if out_bank.counts[c] > 0 {
            reps[c] = out_bank.prototypes[c].clone();
        }
    }
    let image = if image_classes.is_empty() {
        Vec::new()
    } else {
        let mut scores = Vec::new();
        for v in views {
            let mut align = f64::NEG_INFINITY;
            for &c in &image_classes {
                align = align.max(cos(v, &out_bank.prototypes[c]));
            }
            let pc = softmax(&scaled_cos_row(v, &reps, prm.tau));
            scores.push(prm.beta[0] * align + prm.beta[1] * confidence(&pc));
        }
        pick(&scores, prm.p)
    };

    let mut union = text.clone();
    for &i in &image {
        if !union.contains(&i) {
            union.push(i);
        }
    }
    union.sort();

    let mut logits: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut weights = Vec::new();
    let mut z_ens = Vec::new();
    let mut avg = vec![0.0; c_len];
    for &v in &union {
        let rows = [
            scaled_cos_row(&views[v], &prompt, prm.tau),
            scaled_cos_row(&views[v], &anchors, prm.tau),
            scaled_cos_row(&views[v], &reps, prm.tau),
        ];
        let mut gamma = [0.0; 3];
        for k in 0..3 {
            for x in softmax(&rows[k]) {
                gamma[k] = f64::max(gamma[k], x);
            }
        }
        let denom = gamma[0] + gamma[1] + gamma[2] + prm.epsilon;
        let w = [gamma[0] / denom, gamma[1] / denom, gamma[2] / denom];
        let mut z = vec![0.0; c_len];
        for c in 0..c_len {
            z[c] = w[0] * rows[0][c] + w[1] * rows[1][c] + w[2] * rows[2][c];
        }
        let pz = softmax(&z);
        for c in 0..c_len {
            avg[c] += pz[c] / union.len() as f64;
        }
        for k in 0..3 {
            logits[k].push(rows[k].clone());
        }
        weights.push(w);
        z_ens.push(z);
    }
    let mut q_tilde: Vec<f64> = avg.iter().map(|p| p.powf(1.0 / prm.temperature)).collect();
    let s: f64 = q_tilde.iter().sum();
    for x in q_tilde.iter_mut() {
        *x /= s;
    }

    OracleOutput {
        zero_shot_pred,
        text,
        image,
        union,
        logits,
        weights,
        z_ens,
        q_tilde,
        bank: out_bank,
    }
}

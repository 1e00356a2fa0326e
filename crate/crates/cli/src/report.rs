//! Aligned text tables for the terminal and the ablation row record.

use std::fmt::Write;

use anchorsel::engine::{LossKind, RunSummary, Selection, Variant};
use anchorsel::ensemble::EnsembleMode;
use anchorsel::gradcheck::GradcheckReport;
use serde::Serialize;

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// Left-aligns the first column, right-aligns the rest.
fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                write!(s, "{c:<w$}").unwrap();
            } else {
                write!(s, "  {c:>w$}").unwrap();
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(&rule));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

const SUMMARY_HEADER: [&str; 9] = [
    "method",
    "samples",
    "accuracy",
    "zero-shot",
    "precision",
    "recall",
    "loss",
    "failures",
    "ms/sample",
];

fn summary_cells(s: &RunSummary) -> Vec<String> {
    vec![
        s.method.clone(),
        s.num_samples.to_string(),
        format!("{:.4}", s.accuracy),
        format!("{:.4}", s.zero_shot_accuracy),
        opt(s.selection_precision, 4),
        opt(s.selection_recall, 4),
        opt(s.mean_loss, 4),
        s.failures.to_string(),
        format!("{:.3}", s.wall_clock_ms_per_sample),
    ]
}

pub fn summary_table(rows: &[RunSummary]) -> String {
    render(
        &SUMMARY_HEADER,
        &rows.iter().map(summary_cells).collect::<Vec<_>>(),
    )
}

/// One ablation row: the variant's switches and its summary.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub s_text: bool,
    pub s_image: bool,
    pub z_text: bool,
    pub z_image: bool,
    pub loss: LossKind,
    pub ensemble: EnsembleMode,
    pub summary: RunSummary,
}

impl AblationRow {
    pub fn new(v: &Variant, summary: RunSummary) -> Self {
        let (s_text, s_image) = match v.selection {
            Selection::Anchors { text, image } => (text, image),
            _ => (false, false),
        };
        AblationRow {
            variant: v.name.clone(),
            s_text,
            s_image,
            z_text: v.sources.text,
            z_image: v.sources.image,
            loss: v.loss,
            ensemble: v.ensemble,
            summary,
        }
    }
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "." }.to_string();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                mark(r.s_text),
                mark(r.s_image),
                mark(r.z_text),
                mark(r.z_image),
                format!("{:?}", r.loss).to_lowercase(),
                match r.ensemble {
                    EnsembleMode::Confidence => "conf".into(),
                    EnsembleMode::SimpleAverage => "simple".into(),
                },
                format!("{:.4}", r.summary.accuracy),
                opt(r.summary.selection_precision, 4),
            ]
        })
        .collect();
    render(
        &[
            "variant",
            "s_text",
            "s_image",
            "z_text",
            "z_image",
            "loss",
            "ensemble",
            "accuracy",
            "precision",
        ],
        &cells,
    )
}

pub fn gradcheck_table(r: &GradcheckReport, tolerance: f64) -> String {
    let cells: Vec<Vec<String>> = r
        .cases
        .iter()
        .map(|c| {
            vec![
                c.instance.to_string(),
                format!("{:?}", c.mode),
                format!("{}", c.tau),
                format!("{:.6}", c.loss),
                format!("{:.3e}", c.rel_error),
                format!("{:.3e}", c.encoder_rel_error),
            ]
        })
        .collect();
    let mut out = render(
        &[
            "instance",
            "encoder",
            "tau",
            "loss",
            "grad rel err",
            "jvp rel err",
        ],
        &cells,
    );
    writeln!(
        out,
        "max relative error (loss gradient): {:.3e}",
        r.max_rel_error
    )
    .unwrap();
    writeln!(
        out,
        "max relative error (encoder jvp):   {:.3e}",
        r.max_encoder_rel_error
    )
    .unwrap();
    writeln!(
        out,
        "gradient norm at a stationary target: {:.3e}",
        r.stationary_grad_norm
    )
    .unwrap();
    writeln!(
        out,
        "{} (tolerance {tolerance:e})",
        if r.passed { "PASS" } else { "FAIL" }
    )
    .unwrap();
    out
}

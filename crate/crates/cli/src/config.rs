//! Config layering: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use anchorsel::datagen::SyntheticSpec;
use anchorsel::engine::{AdaptationConfig, Method};
use clap::Args;

use crate::CliError;

/// Adaptation flags shared by `run` and `ablate`. Unset flags leave the
/// file or default value in place.
#[derive(Debug, Clone, Default, Args)]
pub struct AdaptFlags {
    /// TOML file with adaptation settings (and optionally `bundle`, `out`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of views kept by the text-anchor filter.
    #[arg(long)]
    pub q: Option<f64>,
    /// Fraction of views kept by the image-anchor filter.
    #[arg(long)]
    pub p: Option<f64>,
    /// Text score weights as `align,conf`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub alpha: Option<Vec<f64>>,
    /// Image score weights as `align,conf`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub beta: Option<Vec<f64>>,
    /// Classes that receive image anchors.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Sharpening temperature of the ensemble target.
    #[arg(long = "T")]
    pub temperature: Option<f64>,
    /// Logit scale.
    #[arg(long)]
    pub tau: Option<f64>,
    /// AdamW learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer steps per sample; 0 reproduces zero-shot.
    #[arg(long)]
    pub steps: Option<u32>,
    /// Seed of the prompt encoder projections.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Resolved settings plus the run-level paths a config file may carry.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub adaptation: AdaptationConfig,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn take_path(table: &mut toml::Table, key: &str, base: &Path) -> Result<Option<PathBuf>, CliError> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(base.join(s))),
        Some(other) => Err(CliError::Config(format!(
            "`{key}` must be a string, found {other}"
        ))),
    }
}

fn pair(name: &str, v: &[f64]) -> Result<[f64; 2], CliError> {
    match v {
        [a, b] => Ok([*a, *b]),
        _ => Err(CliError::Config(format!(
            "--{name} takes two comma-separated values"
        ))),
    }
}

impl AdaptFlags {
    /// Defaults, overlaid by the config file, overlaid by flags.
    pub fn resolve(&self, method: Option<Method>) -> Result<Resolved, CliError> {
        let (mut cfg, bundle, out) = match &self.config {
            Some(path) => {
                let mut table = read_table(path)?;
                // Relative paths in the file are relative to the file.
                let base = path.parent().unwrap_or(Path::new(""));
                let bundle = take_path(&mut table, "bundle", base)?;
                let out = take_path(&mut table, "out", base)?;
                let cfg: AdaptationConfig = toml::Value::Table(table)
                    .try_into()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                (cfg, bundle, out)
            }
            None => (AdaptationConfig::default(), None, None),
        };
        if let Some(m) = method {
            cfg.method = m;
        }
        macro_rules! overlay {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        overlay!(q => q, p => p, k => k, temperature => temperature, tau => tau,
                 lr => lr, steps => steps, seed => seed);
        if let Some(a) = &self.alpha {
            cfg.alpha = pair("alpha", a)?;
        }
        if let Some(b) = &self.beta {
            cfg.beta = pair("beta", b)?;
        }
        cfg.validate()?;
        Ok(Resolved {
            adaptation: cfg,
            bundle,
            out,
        })
    }
}

/// Generator flags. A preset or spec file provides the base; flags override.
#[derive(Debug, Clone, Default, Args)]
pub struct SpecFlags {
    /// Named preset: default, tiny or noiseless.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML file with synthetic-spec fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long = "C")]
    pub classes: Option<usize>,
    #[arg(long = "N")]
    pub descriptions: Option<usize>,
    #[arg(long = "D")]
    pub dim: Option<usize>,
    #[arg(long = "B")]
    pub views: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub informative_fraction: Option<f64>,
    #[arg(long)]
    pub boost: Option<f64>,
    #[arg(long)]
    pub shift_angle: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SpecFlags {
    pub fn resolve(&self) -> Result<SyntheticSpec, CliError> {
        let mut spec = match (&self.preset, &self.spec) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("--preset and --spec are exclusive".into()))
            }
            (Some(name), None) => SyntheticSpec::preset(name)?,
            (None, Some(path)) => toml::Value::Table(read_table(path)?)
                .try_into()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
            (None, None) => SyntheticSpec::default(),
        };
        macro_rules! overlay {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { spec.$field = v; })*
            };
        }
        overlay!(classes => classes, descriptions => descriptions_per_class, dim => dim,
                 views => views_per_sample, samples => num_samples,
                 informative_fraction => informative_fraction,
                 boost => background_confidence_boost, shift_angle => shift_angle,
                 noise_sigma => noise_sigma, seed => seed);
        spec.validate()?;
        Ok(spec)
    }
}

//! `anchorsel`: generate synthetic bundles, run adaptation methods, sweep the
//! ablation grid and check gradients.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anchorsel::datagen::generate_bundle;
use anchorsel::engine::{ablation_variants, run_variant, AdaptationConfig, Method, RunOutput};
use anchorsel::gradcheck::{run_gradcheck, GradcheckConfig};
use anchorsel::io::{bundle_checksum, read_bundle, write_bundle, write_run, RunArtifacts};
use anchorsel::{ErrorClass, FeatureBundle};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::{AdaptFlags, SpecFlags};

const THREADS_ENV: &str = "ANCHORSEL_THREADS";

#[derive(Debug)]
pub enum CliError {
    Core(anchorsel::Error),
    Config(String),
    Io(String),
    /// A check ran to completion and failed.
    Check(String),
}

impl CliError {
    /// 2 config, 3 IO, 4 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Check(_) => 4,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Io => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Check(m) => write!(f, "{m}"),
        }
    }
}

impl From<anchorsel::Error> for CliError {
    fn from(e: anchorsel::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "anchorsel",
    version,
    about = "Anchor-guided view selection and prompt adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic feature bundle with its informative-view mask.
    Gen {
        #[command(flatten)]
        spec: SpecFlags,
        /// Bundle directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one or more methods over a bundle.
    Run {
        /// Bundle directory; overrides `bundle` in the config file.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Method, or a comma-separated list.
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        #[command(flatten)]
        flags: AdaptFlags,
        /// Output directory; overrides `out` in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 11-row component and loss ablation grid.
    Ablate {
        /// Bundle directory; overrides `bundle` in the config file.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[command(flatten)]
        flags: AdaptFlags,
        /// Output directory; overrides `out` in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic prompt gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long = "C", default_value_t = 10)]
        classes: usize,
        #[arg(long = "D", default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        prompt_dim: usize,
        #[arg(long = "B", default_value_t = 6)]
        views: usize,
        /// Directory for gradcheck.json; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturb the analytic gradient. Negative control for the check.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Configures the global pool from `ANCHORSEL_THREADS`.
fn init_threads() -> Result<Option<usize>, CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("{THREADS_ENV}: {e}")))?;
    Ok(Some(n))
}

fn require(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Config(format!("--{flag} is required (flag or config file)")))
}

fn load(bundle: &Path) -> Result<(FeatureBundle, String), CliError> {
    let b = read_bundle(bundle)?;
    Ok((b, bundle_checksum(bundle)?))
}

fn manifest(
    command: &str,
    variant: &str,
    cfg: &AdaptationConfig,
    bundle: &Path,
    checksum: &str,
    threads: Option<usize>,
    started: u128,
) -> serde_json::Value {
    json!({
        "tool": "anchorsel",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "variant": variant,
        "config": cfg,
        "bundle": bundle.display().to_string(),
        "bundle_checksum": checksum,
        "seeds": { "encoder": cfg.seed },
        "threads": threads,
        "started_unix_ms": started,
        "finished_unix_ms": unix_ms(),
    })
}

fn write_config_toml(dir: &Path, cfg: &AdaptationConfig) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), text)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.join("config.toml").display())))
}

fn save(dir: &Path, manifest: &serde_json::Value, out: &RunOutput) -> Result<(), CliError> {
    let lines: Vec<String> = out.results.iter().map(|r| r.log_line()).collect();
    let summary = serde_json::to_value(&out.summary).expect("summary serializes");
    write_run(
        dir,
        &RunArtifacts {
            manifest,
            log_lines: &lines,
            summary: &summary,
        },
    )?;
    Ok(())
}

fn cmd_gen(spec: &SpecFlags, out: &Path) -> Result<(), CliError> {
    let spec = spec.resolve()?;
    let bundle = generate_bundle(&spec)?;
    write_bundle(out, &bundle)?;
    let spec_path = out.join("synthetic_spec.json");
    let text = serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n";
    std::fs::write(&spec_path, text)
        .map_err(|e| CliError::Io(format!("{}: {e}", spec_path.display())))?;
    println!(
        "wrote {} (C={} N={} D={} B={}, {} samples)",
        out.display(),
        spec.classes,
        spec.descriptions_per_class,
        spec.dim,
        spec.views_per_sample,
        spec.num_samples
    );
    println!("checksum {}", bundle_checksum(out)?);
    Ok(())
}

fn cmd_run(
    bundle: Option<PathBuf>,
    methods: &[Method],
    flags: &AdaptFlags,
    out: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let started = unix_ms();
    let resolved = flags.resolve(methods.first().copied())?;
    let bundle_path = require(bundle.or(resolved.bundle), "bundle")?;
    let out = require(out.or(resolved.out), "out")?;
    let (bundle, checksum) = load(&bundle_path)?;
    let methods = if methods.is_empty() {
        vec![resolved.adaptation.method]
    } else {
        methods.to_vec()
    };

    let mut rows = Vec::new();
    for &m in &methods {
        let cfg = AdaptationConfig {
            method: m,
            ..resolved.adaptation.clone()
        };
        let output = run_variant(&cfg, &m.variant(), &bundle)?;
        // One method writes into `out`; several get a directory each.
        let dir = if methods.len() == 1 {
            out.clone()
        } else {
            out.join(m.as_str())
        };
        save(
            &dir,
            &manifest(
                "run",
                m.as_str(),
                &cfg,
                &bundle_path,
                &checksum,
                threads,
                started,
            ),
            &output,
        )?;
        write_config_toml(&dir, &cfg)?;
        rows.push(output.summary);
    }
    if methods.len() > 1 {
        let all = serde_json::to_string_pretty(&rows).expect("summaries serialize") + "\n";
        let p = out.join("summary.json");
        std::fs::write(&p, all).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    print!("{}", report::summary_table(&rows));
    Ok(())
}

fn cmd_ablate(
    bundle: Option<PathBuf>,
    flags: &AdaptFlags,
    out: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let started = unix_ms();
    let resolved = flags.resolve(None)?;
    let bundle_path = require(bundle.or(resolved.bundle), "bundle")?;
    let out = require(out.or(resolved.out), "out")?;
    let (bundle, checksum) = load(&bundle_path)?;
    let cfg = resolved.adaptation;

    let mut rows = Vec::new();
    for v in ablation_variants() {
        let output = run_variant(&cfg, &v, &bundle)?;
        let dir = out.join(v.name.replace('/', "_"));
        save(
            &dir,
            &manifest(
                "ablate",
                &v.name,
                &cfg,
                &bundle_path,
                &checksum,
                threads,
                started,
            ),
            &output,
        )?;
        rows.push(report::AblationRow::new(&v, output.summary));
    }
    let table = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    let p = out.join("ablation.json");
    std::fs::write(&p, table).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    write_config_toml(&out, &cfg)?;
    print!("{}", report::ablation_table(&rows));
    Ok(())
}

fn cmd_gradcheck(cfg: GradcheckConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let report = run_gradcheck(&cfg)?;
    print!("{}", report::gradcheck_table(&report, cfg.tolerance));
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let p = dir.join("gradcheck.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check FAILED: max relative error {:e} (tolerance {:e})",
            report.max_rel_error, cfg.tolerance
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|threads| match cli.command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Run {
            bundle,
            method,
            flags,
            out,
        } => cmd_run(bundle, &method, &flags, out, threads),
        Command::Ablate { bundle, flags, out } => cmd_ablate(bundle, &flags, out, threads),
        Command::Gradcheck {
            seed,
            instances,
            classes,
            dim,
            prompt_dim,
            views,
            out,
            corrupt,
        } => {
            let cfg = GradcheckConfig {
                instances,
                seed,
                classes,
                dim,
                prompt_dim,
                views,
                corrupt,
                ..GradcheckConfig::default()
            };
            cmd_gradcheck(cfg, out)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("anchorsel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

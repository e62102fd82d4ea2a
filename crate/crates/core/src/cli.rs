//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::load_config;
use crate::dataio::{make_synthetic, scan_folder, SyntheticSpec};
use crate::error::{CmidError, Result};
use crate::evalharness::{extract_features, knn_eval, linear_probe, FeatureTable, ProbeResult, ProbeSettings};
use crate::selftest::run_selftest;
use crate::trainer::{fit, FitOptions};

#[derive(Debug, Parser)]
#[command(name = "cmid", version, about = "Self-supervised pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain an encoder on an image folder.
    Pretrain(PretrainArgs),
    /// Export GAP features of a checkpoint's student encoder as CSV.
    Extract(ExtractArgs),
    /// Linear probe on exported features.
    Probe(ProbeArgs),
    /// k-nearest-neighbor classification on exported features.
    Knn(KnnArgs),
    /// Write a labeled synthetic image corpus.
    SynthData(SynthArgs),
    /// Run the fast invariant suite.
    Selftest,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// TOML config; defaults to $CMID_CONFIG, else built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config override `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Serialize data loading so runs are bit-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a resume checkpoint written under a different config.
    #[arg(long)]
    force: bool,
    /// Stop after this many steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Progress line interval in steps; 0 is quiet.
    #[arg(long, default_value_t = 10)]
    progress_every: u64,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeatureArgs {
    #[arg(long)]
    features_train: PathBuf,
    #[arg(long)]
    features_test: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long, default_value_t = ProbeSettings::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ProbeSettings::default().lr)]
    lr: f64,
}

#[derive(Debug, Args)]
struct KnnArgs {
    #[command(flatten)]
    features: FeatureArgs,
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CmidError::validation(s, "override must look like key=value"))
        })
        .collect()
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut overrides = parse_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    if args.deterministic {
        overrides.push(("train.deterministic".into(), "true".into()));
    }
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    let manifest = scan_folder(&args.data)?;
    if manifest.skipped > 0 {
        log::warn!("{} unreadable files skipped", manifest.skipped);
    }
    let outcome = fit(
        &cfg,
        &manifest,
        &FitOptions {
            out_dir: args.out,
            resume: args.resume,
            force: args.force,
            max_steps: args.max_steps,
            progress_every: args.progress_every,
        },
    )?;
    println!(
        "wrote {} and {} after {} steps",
        outcome.checkpoint.display(),
        outcome.metrics.display(),
        outcome.state.step
    );
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<()> {
    let manifest = scan_folder(&args.data)?;
    let table = extract_features(&args.ckpt, &manifest)?;
    table.write_csv(&args.out)?;
    println!("wrote {} features of width {} to {}", table.len(), table.dim(), args.out.display());
    Ok(())
}

fn report(result: &ProbeResult, path: Option<&Path>) -> Result<()> {
    println!("{}", result.summary());
    if let Some(path) = path {
        result.write_report(path)?;
    }
    Ok(())
}

fn load_pair(f: &FeatureArgs) -> Result<(FeatureTable, FeatureTable)> {
    Ok((FeatureTable::read_csv(&f.features_train)?, FeatureTable::read_csv(&f.features_test)?))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CmidError::io(path, e))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| CmidError::ConfigParse {
                line: 0,
                message: e.to_string(),
            })?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(v) = args.num_images {
        spec.num_images = v;
    }
    if let Some(v) = args.image_size {
        spec.image_size = v;
    }
    if let Some(v) = args.num_classes {
        spec.num_classes = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let manifest = make_synthetic(&spec, &args.out)?;
    println!("wrote {} images to {}", manifest.len(), args.out.display());
    Ok(())
}

fn selftest() -> Result<bool> {
    let checks = run_selftest();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a).map(|_| true),
        Command::Extract(a) => extract(a).map(|_| true),
        Command::Probe(a) => {
            let (train, test) = load_pair(&a.features)?;
            let settings = ProbeSettings {
                epochs: a.epochs,
                lr: a.lr,
                ..ProbeSettings::default()
            };
            report(&linear_probe(&train, &test, settings)?, a.features.report.as_deref())?;
            Ok(true)
        }
        Command::Knn(a) => {
            let (train, test) = load_pair(&a.features)?;
            report(&knn_eval(&train, &test, a.k)?, a.features.report.as_deref())?;
            Ok(true)
        }
        Command::SynthData(a) => synth(a).map(|_| true),
        Command::Selftest => selftest(),
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(dispatch(["cmid", "pretrain", "--out", "x"]), 2);
        assert_eq!(dispatch(["cmid", "frobnicate"]), 2);
        assert_eq!(dispatch(["cmid"]), 2);
    }

    #[test]
    fn runtime_errors_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let code = dispatch([
            "cmid".into(),
            "extract".into(),
            "--ckpt".into(),
            missing.clone().into_os_string(),
            "--data".into(),
            dir.path().as_os_str().to_owned(),
            "--out".into(),
            missing.into_os_string(),
        ] as [std::ffi::OsString; 8]);
        assert_eq!(code, 1);
    }

    #[test]
    fn overrides_need_equals() {
        assert!(parse_overrides(&["train.seed=3".into()]).is_ok());
        assert!(parse_overrides(&["train.seed".into()]).is_err());
    }
}

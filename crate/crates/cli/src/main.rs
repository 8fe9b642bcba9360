mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use geomil::gradsuite;
use geomil::model::predict;
use geomil::synth::{gen_cohort, read_cohort_bytes, write_cohort, Cohort};
use geomil::train::{
    heatmap_export, load_compatible, monte_carlo_cv, predict_slides, prepare_cohort, prepare_slide, score_predictions, write_checkpoint,
};
use geomil::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{RunConfig, Signal};

const GIT_DESCRIBE: &str = env!("GEOMIL_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "geomil", version, about = "Synthetic multi-scale slide cohorts, training and attention heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort file and its JSON manifest.
    Synth(SynthArgs),
    /// Monte-Carlo cross-validation with per-fold checkpoints and a JSON report.
    Train(TrainArgs),
    /// Score a checkpoint on every slide of a cohort.
    Eval(EvalArgs),
    /// Export one slide's attention heatmap as PGM plus CSV.
    Heatmap(HeatmapArgs),
    /// Finite-difference check of every differentiable operation and model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Cohort file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    slides_per_class: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Generate without any class-dependent signal.
    #[arg(long)]
    null: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Model letter A-F or a comma list of hfa, geometry, gpgf.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    cohort: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the JSON metrics; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    slide: u32,
    /// Gaussian width in grid units.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Spec(_) | Error::Optimizer(_) => 2,
        Error::Io(_) => 3,
        Error::Format { .. } => 4,
        Error::Incompatible(_) => 5,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, args: &ModelArgs) -> Result<()> {
    if let Some(a) = &args.ablation {
        cfg.ablation = a.parse()?;
    }
    if let Some(c) = &args.cohort {
        cfg.cohort = c.clone();
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    git_describe: &'a str,
    seed: u64,
    cohort_sha256: &'a str,
    spec_hash: Option<String>,
    model_hash: Option<String>,
    config: &'a RunConfig,
}

/// Spec hash from the cohort's manifest sidecar, when present.
fn sidecar_spec_hash(cohort: &Path) -> Option<String> {
    let text = fs::read_to_string(manifest_path(cohort)).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    value.get("spec_hash")?.as_str().map(str::to_string)
}

fn manifest_path(cohort: &Path) -> PathBuf {
    let mut name = cohort.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn load_cohort(path: &Path) -> Result<(Cohort, String)> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let cohort = read_cohort_bytes(&bytes)?;
    Ok((cohort, sha256_hex(&bytes)))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.classes {
        cfg.classes = v;
        if cfg.compositions.len() != v {
            cfg.compositions = geomil::synth::CohortSpec::planted(v, 1, 0).compositions;
        }
    }
    if let Some(v) = args.slides_per_class {
        cfg.slides_per_class = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if args.null {
        cfg.signal = Signal::Null;
    }
    let out = args.out.unwrap_or_else(|| cfg.cohort.clone());
    cfg.validate()?;
    let spec = cfg.cohort_spec();

    let (cohort, manifest) = gen_cohort(&spec)?;
    write_cohort(&out, &cohort)?;
    let bytes = fs::read(&out)?;

    #[derive(Serialize)]
    struct SynthManifest<'a> {
        #[serde(flatten)]
        cohort: &'a geomil::synth::CohortManifest,
        tool_version: &'a str,
        git_describe: &'a str,
        cohort_sha256: String,
    }
    write_json(
        &manifest_path(&out),
        &SynthManifest {
            cohort: &manifest,
            tool_version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            cohort_sha256: sha256_hex(&bytes),
        },
    )?;
    let counts: Vec<String> = manifest.class_counts.iter().map(|c| c.to_string()).collect();
    println!(
        "wrote {} slides ({}) d={} to {} ({} bytes, sha256 {})",
        cohort.slides.len(),
        counts.join("/"),
        cohort.d,
        out.display(),
        bytes.len(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_model(&mut cfg, &args.model)?;
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;

    let (cohort, cohort_sha) = load_cohort(&cfg.cohort)?;
    let model = cfg.model_config(cohort.d, cohort.classes);
    model.validate()?;
    let started = Instant::now();
    let slides = prepare_cohort(&cohort, &cfg.prep_config())?;
    let outcome = monte_carlo_cv(&slides, cohort.classes, &model, &cfg.train_config())?;

    fs::create_dir_all(&cfg.out_dir)?;
    let hash = cfg.model_hash(cohort.d, cohort.classes);
    for (i, params) in outcome.params.iter().enumerate() {
        write_checkpoint(&cfg.out_dir.join(format!("fold{i}.argw")), params, hash)?;
    }
    write_json(&cfg.out_dir.join("report.json"), &outcome.report)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    write_json(
        &cfg.out_dir.join("manifest.json"),
        &RunManifest {
            command: "train",
            tool_version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            seed: cfg.seed,
            cohort_sha256: &cohort_sha,
            spec_hash: sidecar_spec_hash(&cfg.cohort),
            model_hash: Some(format!("{hash:016x}")),
            config: &cfg,
        },
    )?;
    println!("model {} on {} slides, {} folds", model.flags, cohort.slides.len(), outcome.report.folds.len());
    print!("{}", outcome.report.table());
    println!("wrote {} in {:.1?}", cfg.out_dir.display(), started.elapsed());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_model(&mut cfg, &args.model)?;
    cfg.validate()?;
    let (cohort, _) = load_cohort(&cfg.cohort)?;
    let model = cfg.model_config(cohort.d, cohort.classes);
    let params = load_compatible(&args.checkpoint, cfg.model_hash(cohort.d, cohort.classes))?;
    let slides = prepare_cohort(&cohort, &cfg.prep_config())?;
    let idx: Vec<usize> = (0..slides.len()).collect();
    let predictions = predict_slides(&model, &params, &slides, &idx)?;
    let metrics = score_predictions(&predictions, cohort.classes)?;

    #[derive(Serialize)]
    struct EvalOutput<'a> {
        model: String,
        metrics: geomil::train::Metrics,
        predictions: &'a [geomil::train::SlidePrediction],
    }
    let out = EvalOutput {
        model: model.flags.to_string(),
        metrics,
        predictions: &predictions,
    };
    if let Some(path) = &args.out {
        write_json(path, &out)?;
    }
    println!(
        "model {} on {} slides: AUC {:.4} ACC {:.4} F1 {:.4} Pre {:.4}",
        model.flags,
        slides.len(),
        metrics.auc,
        metrics.acc,
        metrics.f1,
        metrics.precision
    );
    Ok(())
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_model(&mut cfg, &args.model)?;
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    cfg.validate()?;
    let (cohort, _) = load_cohort(&cfg.cohort)?;
    let slide = cohort
        .slides
        .iter()
        .find(|s| s.slide_id == args.slide)
        .ok_or_else(|| Error::Usage(format!("slide {} is not in {}", args.slide, cfg.cohort.display())))?;
    let model = cfg.model_config(cohort.d, cohort.classes);
    let params = load_compatible(&args.checkpoint, cfg.model_hash(cohort.d, cohort.classes))?;
    let prepared = prepare_slide(slide, cohort.d, &cfg.prep_config())?;
    let pred = predict(&model, &params, &prepared.input)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let stem = format!("slide{}", args.slide);
    let top = heatmap_export(&cfg.out_dir, &stem, &prepared.patch_ids, &prepared.positions, &pred.patch_scores, cfg.sigma)?;
    let ids: Vec<String> = top.iter().map(|i| i.to_string()).collect();
    println!("wrote {}/{stem}.pgm and {stem}.csv", cfg.out_dir.display());
    println!("top decile ({} of {} patches): {}", top.len(), prepared.patch_ids.len(), ids.join(" "));
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let started = Instant::now();
    let cases = gradsuite::run(args.seed)?;
    print!("{}", gradsuite::table(&cases));
    let failed = cases.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} cases pass (tolerance {:e}) in {:.1?}",
        cases.len() - failed,
        cases.len(),
        gradsuite::TOLERANCE,
        started.elapsed()
    );
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GEOMIL_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Heatmap(a) => cmd_heatmap(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Command-line driver for the domain-adaptation pipeline.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numerical
//! divergence. Every training command writes its artifacts into a run
//! directory named by the hash of the effective config, so identical configs
//! land in identical places and reproduce identical bytes.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::EffectiveConfig;
use dds_uda::maskgen::{binarize_topk, decay_noise, DynamicMask, MaskMeta};
use dds_uda::metrics::{evaluate, MetricsReport};
use dds_uda::mixing::{mix_images, MixDirection};
use dds_uda::model::{load_checkpoint, save_checkpoint};
use dds_uda::spectral::{batch_mean_amplitude, ifft2, stylize_target, LowFreqMask, Spectrum};
use dds_uda::synthdata::{
    gen_dataset, read_ppm, write_pgm_mask, write_ppm, GenConfig, Manifest, Split,
};
use dds_uda::trainer::{self, RunLog, Variant};
use dds_uda::Rng;

#[derive(Parser)]
#[command(
    name = "dds",
    version,
    about = "Deterministic domain-adaptation experiments for joint disc/cup segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset and its manifest.
    Gen(GenArgs),
    /// Write one dynamic mask as a PGM image.
    Mask(MaskArgs),
    /// Spectrum-stylize a target image with source amplitudes.
    Stylize(StylizeArgs),
    /// Debug: mix two images under a dynamic mask, both directions.
    Mix(MixArgs),
    /// Pretrain the scorer on the labeled source domain.
    Pretrain(TrainArgs),
    /// Run domain adaptation from a pretrained checkpoint.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on one domain/split.
    Eval(EvalArgs),
    /// Sweep one config key over a list of values, adapting and evaluating
    /// each.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<EffectiveConfig, CliError> {
        let mut cfg = EffectiveConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            cfg.apply_file(&text).map_err(CliError::Usage)?;
        }
        cfg.apply_sets(&self.sets).map_err(CliError::Usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of domains.
    #[arg(long)]
    domains: Option<u32>,
    /// Images per domain.
    #[arg(long)]
    n: Option<usize>,
    /// Image side length (power of two).
    #[arg(long)]
    size: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    /// Attenuation factor.
    #[arg(long)]
    d: f64,
    /// Foreground fraction lambda_k in (0, 0.5].
    #[arg(long)]
    lam: f64,
    #[arg(long)]
    seed: u64,
    /// Mask side length (power of two).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Output PGM path.
    #[arg(long, default_value = "mask.pgm")]
    out: PathBuf,
}

#[derive(Args)]
struct StylizeArgs {
    /// Target PPM image.
    #[arg(long)]
    target: PathBuf,
    /// Source PPM image(s); their amplitudes are averaged.
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    /// Half-side ratio of the replaced low-frequency square.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    /// Source-side PPM image.
    #[arg(long)]
    src: PathBuf,
    /// Target-side PPM image.
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    d: f64,
    #[arg(long)]
    lam: f64,
    #[arg(long)]
    seed: u64,
    /// Output directory for mask.pgm and the two mixed PPMs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory run directories are created under.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Pretrained checkpoint to adapt from.
    #[arg(long)]
    init: PathBuf,
    /// Pathway variant.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    domain: u32,
    /// Split: train or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Fill holes in the predicted masks first.
    #[arg(long)]
    postprocess: bool,
    /// Output CSV path.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    adapt: AdaptArgs,
    /// Config key to sweep.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long)]
    values: String,
}

enum CliError {
    Usage(String),
    Io(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<dds_uda::Error> for CliError {
    fn from(err: dds_uda::Error) -> Self {
        use dds_uda::Error::*;
        match err {
            Divergence(_) => CliError::Divergence(err.to_string()),
            Io(_) | Format(_) | Value(_) | EmptyBatch => CliError::Io(err.to_string()),
            _ => CliError::Usage(err.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Mask(args) => cmd_mask(args),
        Command::Stylize(args) => cmd_stylize(args),
        Command::Mix(args) => cmd_mix(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn require_pow2(n: usize, what: &str) -> Result<(), CliError> {
    if n == 0 || n & (n - 1) != 0 {
        return Err(CliError::Usage(format!(
            "{what} must be a power of two, got {n}"
        )));
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let mut cfg = args.config.build()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(domains) = args.domains {
        cfg.domains = domains;
    }
    if let Some(n) = args.n {
        cfg.n_per_domain = n;
    }
    if let Some(size) = args.size {
        cfg.size = size;
    }
    require_pow2(cfg.size, "--size")?;
    let gen = GenConfig {
        seed: cfg.train.seed,
        n_domains: cfg.domains,
        n_per_domain: cfg.n_per_domain,
        h: cfg.size,
        w: cfg.size,
    };
    gen_dataset(&gen, &args.out)?;
    println!("{}", args.out.join("manifest.csv").display());
    Ok(())
}

/// Builds the mask for the `mask` and `mix` commands: fixed lambda, no
/// interval draw.
fn fixed_mask(size: usize, d: f64, lam: f64, seed: u64) -> Result<DynamicMask, CliError> {
    if !(lam > 0.0 && lam <= 0.5) {
        return Err(CliError::Usage(format!(
            "--lam must be in (0, 0.5], got {lam}"
        )));
    }
    if d < 0.0 {
        return Err(CliError::Usage(format!("--d must be >= 0, got {d}")));
    }
    require_pow2(size, "--size")?;
    let mut rng = Rng::new(seed);
    let noise = decay_noise(size, size, d, &mut rng);
    let field = ifft2(&Spectrum::new(size, size, 1, noise)?)?;
    let bits = binarize_topk(&field, size, size, lam)?;
    Ok(DynamicMask::from_parts(
        bits,
        MaskMeta {
            d,
            lambda_k: lam,
            seed,
        },
    ))
}

fn cmd_mask(args: MaskArgs) -> Result<(), CliError> {
    let mask = fixed_mask(args.size, args.d, args.lam, args.seed)?;
    write_pgm_mask(mask.mask(), &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_stylize(args: StylizeArgs) -> Result<(), CliError> {
    if !(0.0..=0.5).contains(&args.beta) {
        return Err(CliError::Usage(format!(
            "--beta must be in [0, 0.5], got {}",
            args.beta
        )));
    }
    let target = read_ppm(&args.target)?;
    let sources = args
        .sources
        .iter()
        .map(|p| read_ppm(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = batch_mean_amplitude(&sources)?;
    let mask = LowFreqMask::new(target.h(), target.w(), args.beta)?;
    let out = stylize_target(&target, &mean, &mask)?;
    write_ppm(&out, &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_mix(args: MixArgs) -> Result<(), CliError> {
    let src = read_ppm(&args.src)?;
    let tgt = read_ppm(&args.tgt)?;
    let mask = fixed_mask(src.h(), args.d, args.lam, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io(e.to_string()))?;
    write_pgm_mask(mask.mask(), &args.out.join("mask.pgm"))?;
    let src_on = mix_images(&src, &tgt, &mask, MixDirection::SrcOnMask)?;
    let tgt_on = mix_images(&src, &tgt, &mask, MixDirection::TgtOnMask)?;
    write_ppm(&src_on, &args.out.join("mixed_src_on_mask.ppm"))?;
    write_ppm(&tgt_on, &args.out.join("mixed_tgt_on_mask.ppm"))?;
    println!("{}", args.out.display());
    Ok(())
}

fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Creates `<out>/<label>-<hash>/` and echoes the effective config into it.
fn make_run_dir(out: &Path, label: &str, cfg: &EffectiveConfig) -> Result<PathBuf, CliError> {
    let canonical = cfg.canonical();
    let dir = out.join(format!("{label}-{}", config_hash(&canonical)));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(dir.join("config.cfg"), canonical).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(dir)
}

fn write_logs(dir: &Path, log: &RunLog) -> Result<(), CliError> {
    std::fs::write(dir.join("runlog.csv"), log.to_csv())
        .map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(dir.join("evals.csv"), log.evals_to_csv())
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    Ok(Manifest::load(path)?)
}

fn effective_train_config(args: &TrainArgs) -> Result<EffectiveConfig, CliError> {
    let mut cfg = args.config.build()?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn cmd_pretrain(args: TrainArgs) -> Result<(), CliError> {
    let cfg = effective_train_config(&args)?;
    cfg.train.validate()?;
    let manifest = load_manifest(&args.data)?;
    let dir = make_run_dir(&args.out, "pretrain", &cfg)?;
    let (params, log) = trainer::pretrain(&cfg.train, &manifest, cfg.source_domain)?;
    save_checkpoint(&params, &dir.join("pretrain.ckpt"))?;
    write_logs(&dir, &log)?;
    let report = evaluate(&params, &manifest, cfg.source_domain, Split::Test, false)?;
    report.write_csv(&dir.join("eval.csv"))?;
    print_summary("pretrain", &report);
    println!("{}", dir.display());
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> Result<(), CliError> {
    let mut cfg = effective_train_config(&args.train)?;
    if let Some(v) = &args.variant {
        cfg.train.variant = Variant::from_str(v)?;
    }
    cfg.train.validate()?;
    let manifest = load_manifest(&args.train.data)?;
    let init = load_checkpoint(&args.init)?;
    let dir = make_run_dir(&args.train.out, "adapt", &cfg)?;
    let outcome = trainer::adapt(
        &cfg.train,
        &manifest,
        cfg.source_domain,
        cfg.target_domain,
        &init,
    )?;
    save_checkpoint(&outcome.student, &dir.join("student.ckpt"))?;
    save_checkpoint(&outcome.teacher, &dir.join("teacher.ckpt"))?;
    write_logs(&dir, &outcome.log)?;
    let report = evaluate(
        &outcome.student,
        &manifest,
        cfg.target_domain,
        Split::Test,
        false,
    )?;
    report.write_csv(&dir.join("eval.csv"))?;
    print_summary(&format!("adapt[{}]", cfg.train.variant), &report);
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.data)?;
    let params = load_checkpoint(&args.ckpt)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(CliError::Usage(format!(
                "--split must be train or test, got {other:?}"
            )))
        }
    };
    let report = evaluate(&params, &manifest, args.domain, split, args.postprocess)?;
    report.write_csv(&args.out)?;
    print_summary("eval", &report);
    println!("{}", args.out.display());
    Ok(())
}

/// Keys `sweep --param` accepts.
const SWEEPABLE: [&str; 9] = [
    "lambda_s",
    "lambda_t",
    "lambda_t_stylized",
    "d_min",
    "d_max",
    "lambda_k_lo",
    "lambda_k_hi",
    "beta",
    "ema_alpha",
];

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    if !SWEEPABLE.contains(&args.param.as_str()) {
        return Err(CliError::Usage(format!(
            "--param must be one of {SWEEPABLE:?}, got {:?}",
            args.param
        )));
    }
    let values: Vec<&str> = args.values.split(',').filter(|s| !s.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage("--values must list at least one value".into()));
    }
    let mut base = effective_train_config(&args.adapt.train)?;
    if let Some(v) = &args.adapt.variant {
        base.train.variant = Variant::from_str(v)?;
    }
    let manifest = load_manifest(&args.adapt.train.data)?;
    let init = load_checkpoint(&args.adapt.init)?;
    let dir = make_run_dir(&args.adapt.train.out, &format!("sweep-{}", args.param), &base)?;

    let mut csv = String::from("param,value,dice_od,dice_oc,hd95_od,hd95_oc\n");
    for value in values {
        let mut cfg = base;
        cfg.set(&args.param, value).map_err(CliError::Usage)?;
        cfg.train.validate()?;
        let outcome = trainer::adapt(
            &cfg.train,
            &manifest,
            cfg.source_domain,
            cfg.target_domain,
            &init,
        )?;
        let report = evaluate(
            &outcome.student,
            &manifest,
            cfg.target_domain,
            Split::Test,
            false,
        )?;
        let fmt_opt =
            |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{},{}\n",
            args.param,
            value,
            report.dice_od,
            report.dice_oc,
            fmt_opt(report.hd95_od),
            fmt_opt(report.hd95_oc)
        ));
        eprintln!(
            "{}={}: dice od {:.2} oc {:.2}",
            args.param, value, report.dice_od, report.dice_oc
        );
    }
    std::fs::write(dir.join("sweep.csv"), csv).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{}", dir.display());
    Ok(())
}

fn print_summary(label: &str, report: &MetricsReport) {
    let fmt_opt = |v: Option<f64>| {
        v.map(|x| format!("{x:.2}"))
            .unwrap_or_else(|| "undef".into())
    };
    eprintln!(
        "{label}: dice od {:.2} oc {:.2} | hd95 od {} oc {} | n {} undefined {}",
        report.dice_od,
        report.dice_oc,
        fmt_opt(report.hd95_od),
        fmt_opt(report.hd95_oc),
        report.n_images,
        report.undefined
    );
}

//! The `mcdiff` command line: dataset preparation, training, sampling,
//! evaluation and ablation runs.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mcdiff::ablation::run_ablations;
use mcdiff::data::{build_dataset, build_phantom_dataset, ingest_volumes, write_grid, Manifest, PhantomSpec, Split, SplitRatios};
use mcdiff::evaluation::{chain_seeds, evaluate_dataset, restore_slice, write_pgm, write_slice_images, EvalOptions};
use mcdiff::training::{sampling_model, train_loop_with, Checkpoint, LogRecord, TrainConfig};
use mcdiff::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const DATA_DIR_ENV: &str = "DISCDIFF_DATA_DIR";
pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, Parser)]
#[command(name = "mcdiff", version, about = "Guided diffusion super-resolution for multi-contrast MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset manifest from synthetic phantoms or ingested volumes.
    PrepareData(PrepareArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Restore one slice K times and write the samples with mean/std maps.
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and compare the three ablated configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset directory (or its manifest.json).
    #[arg(long, env = DATA_DIR_ENV)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON training configuration merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `ablations.no_curriculum=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Number of synthetic phantom volumes.
    #[arg(long, conflicts_with = "ingest", required_unless_present = "ingest")]
    phantoms: Option<usize>,
    /// JSON index of raw float32 volume pairs.
    #[arg(long)]
    ingest: Option<PathBuf>,
    #[arg(long, default_value_t = 4, value_parser = parse_scale)]
    scale: usize,
    /// In-plane size of phantom slices.
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 8)]
    slices_per_volume: usize,
    /// Crop `rows,cols,slices` for ingested volumes.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    crop: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to the data directory variable.
    #[arg(long, env = DATA_DIR_ENV)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many iterations (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct SamplingArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Respaced reverse steps; defaults to the checkpoint's setting.
    #[arg(long)]
    sampling_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Slice id from the manifest.
    #[arg(long)]
    input: String,
    /// Give every chain the same seed.
    #[arg(long)]
    frozen_rng: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Evaluate only the first N slices of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    no_images: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArg,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Samples per slice when scoring each configuration.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Skip scoring the trained configurations.
    #[arg(long)]
    no_eval: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

fn parse_scale(s: &str) -> Result<usize, String> {
    match s {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("expected 2 or 4, got `{s}`")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train, val or test, got `{s}`")),
    }
}

/// A failure with its exit status.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure {
            code: EXIT_FAILURE,
            error,
        }
    }
}

fn usage(error: Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

type CliResult = Result<serde_json::Value, Failure>;

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit status. A JSON summary goes to stdout;
/// progress and diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::PrepareData(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            EXIT_OK
        }
        Err(f) => {
            let diag = json!({
                "error": {
                    "kind": f.error.kind(),
                    "message": f.error.to_string(),
                    "exit_code": f.code,
                }
            });
            eprintln!("{diag}");
            f.code
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    if !file.exists() {
        return Err(usage(Error::Config(format!("no dataset manifest at {}", file.display()))));
    }
    Ok(Manifest::load(&file)?)
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    TrainConfig::load(args.config.as_deref(), &overrides).map_err(usage)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(usage(Error::Config(format!("checkpoint {} does not exist", path.display()))));
    }
    Ok(Checkpoint::load(path, &candle_core::Device::Cpu)?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn progress(every: usize, label: &str) -> impl FnMut(&LogRecord) + '_ {
    move |r| {
        if every > 0 && (r.iteration + 1) % every == 0 {
            let mut err = std::io::stderr().lock();
            let _ = writeln!(
                err,
                "{label}iteration {} loss {:.5} ({})",
                r.iteration + 1,
                r.loss_total,
                r.sampling
            );
        }
    }
}

fn prepare(a: PrepareArgs) -> CliResult {
    let ratios = SplitRatios::default();
    let manifest = match (&a.ingest, a.phantoms) {
        (Some(index), _) => {
            let volumes = ingest_volumes(index)?;
            let crop = match &a.crop {
                Some(c) => [c[0], c[1], c[2]],
                None => {
                    let first = volumes.first().ok_or(Error::Empty("volume index is empty"))?;
                    let d = first.t2.dim();
                    [d.0, d.1, d.2]
                }
            };
            build_dataset(&volumes, crop, a.scale, ratios, a.seed, &a.out)?
        }
        (None, Some(volumes)) => {
            let spec = PhantomSpec {
                volumes,
                slices_per_volume: a.slices_per_volume,
                resolution: a.resolution,
                seed: a.seed,
            };
            build_phantom_dataset(&spec, a.scale, ratios, &a.out)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let count = |s| manifest.records_in(s).count();
    Ok(json!({
        "manifest": a.out.join("manifest.json"),
        "records": manifest.records.len(),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
    }))
}

fn train(a: TrainArgs) -> CliResult {
    let manifest = load_manifest(&a.data.data)?;
    let config = load_config(&a.config)?;
    if let Some(ck) = &a.resume {
        load_checkpoint(ck)?;
    }
    let outcome = train_loop_with(&manifest, &config, &a.out, a.resume.as_deref(), &mut progress(a.log_every, ""))?;
    Ok(json!({
        "checkpoint": outcome.checkpoint,
        "log": outcome.log,
        "iterations": outcome.iterations,
        "final_loss": outcome.final_loss,
    }))
}

fn sampling_setup(
    s: &SamplingArgs,
) -> Result<(Checkpoint, mcdiff::DisentangledUNet, mcdiff::NoiseSchedule), Failure> {
    if s.k == 0 {
        return Err(usage(Error::Config("--k must be at least 1".into())));
    }
    let ck = load_checkpoint(&s.checkpoint)?;
    let config = ck.config();
    let steps = s.sampling_steps.unwrap_or(config.sampling_steps);
    let schedule = config
        .schedule
        .build()?
        .respace(steps)
        .map_err(usage)?;
    let (_vars, model) = sampling_model(&ck)?;
    Ok((ck, model, schedule))
}

fn sample(a: SampleArgs) -> CliResult {
    let manifest = load_manifest(&a.data.data)?;
    let meta = manifest
        .find(&a.input)
        .ok_or_else(|| usage(Error::Config(format!("slice `{}` is not in the manifest", a.input))))?;
    let record = manifest.load_record(meta)?;
    let (_ck, model, schedule) = sampling_setup(&a.sampling)?;
    let seeds = if a.frozen_rng {
        vec![a.sampling.seed; a.sampling.k]
    } else {
        chain_seeds(a.sampling.seed, 0, a.sampling.k)
    };
    let restored = restore_slice(&record, &model, &schedule, &seeds)?;
    create_dir(&a.out)?;
    let scheme = mcdiff::data::NormScheme::of(&record.hr_t2);
    let mut samples = Vec::new();
    for (i, grid) in restored.samples.iter().enumerate() {
        let raw = format!("{}.sample{i}.f32", record.slice_id);
        let img = format!("{}.sample{i}.pgm", record.slice_id);
        write_grid(&a.out.join(&raw), grid)?;
        write_pgm(&a.out.join(&img), grid, scheme.min, scheme.max)?;
        samples.push(json!({ "raw": raw, "image": img }));
    }
    let images = write_slice_images(&a.out, &record.slice_id, &restored.maps, &record.hr_t2, scheme)?;
    let mean_raw = format!("{}.mean.f32", record.slice_id);
    write_grid(&a.out.join(&mean_raw), &restored.maps.mean)?;
    let std_raw = match &restored.maps.std {
        Some(std) => {
            let name = format!("{}.std.f32", record.slice_id);
            write_grid(&a.out.join(&name), std)?;
            Some(name)
        }
        None => None,
    };
    let summary = json!({
        "slice_id": record.slice_id,
        "k": a.sampling.k,
        "sampling_steps": schedule.steps(),
        "seeds": seeds,
        "shape": record.hr_t2.shape(),
        "samples": samples,
        "mean": { "raw": mean_raw, "image": images.mean },
        "std": { "raw": std_raw, "image": images.std },
        "error_image": images.error,
    });
    let path = a.out.join("sample.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("json value"))
        .map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
    Ok(summary)
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let manifest = load_manifest(&a.data.data)?;
    let (_ck, model, schedule) = sampling_setup(&a.sampling)?;
    create_dir(&a.out)?;
    let opts = EvalOptions {
        split: a.split,
        k: a.sampling.k,
        seed: a.sampling.seed,
        image_dir: (!a.no_images).then(|| a.out.join("images")),
        limit: a.limit,
    };
    let report = evaluate_dataset(&manifest, &model, &schedule, &opts)?;
    let path = a.out.join(REPORT_FILE);
    fs::write(&path, report.to_json()?).map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
    let num = |v: f64| if v.is_finite() { json!(v) } else { json!("inf") };
    Ok(json!({
        "report": path,
        "slices": report.slices.len(),
        "mean_psnr": num(report.mean_psnr),
        "mean_ssim": report.mean_ssim,
        "mean_lr_psnr": num(report.mean_lr_psnr),
        "mean_lr_ssim": report.mean_lr_ssim,
    }))
}

fn ablate(a: AblateArgs) -> CliResult {
    let manifest = load_manifest(&a.data.data)?;
    let config = load_config(&a.config)?;
    if a.k == 0 {
        return Err(usage(Error::Config("--k must be at least 1".into())));
    }
    create_dir(&a.out)?;
    let eval = (!a.no_eval).then(|| EvalOptions {
        split: Split::Test,
        k: a.k,
        seed: config.seed,
        image_dir: None,
        limit: None,
    });
    let every = a.log_every;
    let report = run_ablations(&manifest, &config, &a.out, eval.as_ref(), &mut |name, r| {
        progress(every, &format!("[{name}] "))(r)
    })?;
    let table = report.table();
    eprint!("{table}");
    let table_path = a.out.join("ablation.md");
    fs::write(&table_path, &table).map_err(|e| Failure::from(Error::Io { path: table_path.clone(), source: e }))?;
    let report_path = a.out.join("ablation.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(Error::from)?)
        .map_err(|e| Failure::from(Error::Io { path: report_path.clone(), source: e }))?;
    Ok(json!({
        "table": table_path,
        "report": report_path,
        "runs": report.runs.iter().map(|r| json!({
            "name": r.name,
            "dir": r.out_dir,
            "composition": r.composition,
            "final_loss": r.final_loss,
        })).collect::<Vec<_>>(),
    }))
}

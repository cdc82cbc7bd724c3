//! The `bvt` command-line driver.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 when
//! training or evaluation hits a non-finite value.

mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{DataSource, ExplainConfig, ModelSpec, PresetSpec, RunConfig};

use crate::cka::{cka_matrix, ActivationStack, Pooling};
use crate::data::{six_channel_pipeline, Split, SyntheticSpec, MASK_SUFFIX};
use crate::error::{Error, Result};
use crate::explain::{explain, localization_score, render_saliency, Method, Sidecar, Upsample};
use crate::model::{load_pretrained, Checkpoint, Family, ModelConfig, TransformerModel};
use crate::netpbm::Image8;
use crate::train::{evaluate, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "BVT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "bvt",
    version,
    about = "Train, evaluate and explain B-cos vision transformers"
)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for initialization, shuffling and generated data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; BVT_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Validate inputs and report what would run, without running it.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset as an image folder.
    GenData(GenDataArgs),
    /// Train a model from a run configuration.
    Train,
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write saliency maps for one image.
    Explain(ExplainArgs),
    /// Compare hidden layers with linear CKA.
    Cka(CkaArgs),
    /// Print the parameter count of a model.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Samples per class of the built-in three-class set.
    #[arg(long, default_value_t = 60)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Image folder with a labels.csv, instead of the configured data.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Binary PPM image.
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Comma-separated methods: attn-last, rollout, grad-cam, lrp,
    /// lrp-second, lrp-last, ta.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    /// Class to explain; the predicted class by default.
    #[arg(long)]
    pub class: Option<usize>,
    /// Ground-truth PGM mask; `<image stem>.mask.pgm` is used when present.
    #[arg(long, value_name = "PATH")]
    pub mask: Option<PathBuf>,
    /// Block read by Grad-CAM.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Head-mass fraction.
    #[arg(long)]
    pub mass: Option<f64>,
    #[arg(long, value_enum)]
    pub upsample: Option<UpsampleArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum UpsampleArg {
    Nearest,
    Bilinear,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Errors are printed to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(cli.threads)
        .unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_INVALID;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match pool.install(|| dispatch(&cli, &argv)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INVALID,
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a, argv),
        Command::Train => cmd_train(cli, argv),
        Command::Evaluate(a) => cmd_evaluate(cli, a, argv),
        Command::Explain(a) => cmd_explain(cli, a, argv),
        Command::Cka(a) => cmd_cka(cli, a, argv),
        Command::ParamCount(a) => param_count(cli, a),
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    cli.config.as_deref().map(RunConfig::load).transpose()
}

fn require_config(cli: &Cli) -> Result<RunConfig> {
    load_config(cli)?.ok_or_else(|| Error::Config("this command needs --config PATH".into()))
}

fn output_dir(cli: &Cli, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .ok_or_else(|| Error::Config("no output directory; pass --out DIR".into()))?;
    if !cli.dry_run {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(dir)
}

/// Record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub argv: &'a [String],
    pub seed: Option<u64>,
    pub config: Option<&'a RunConfig>,
    pub model: Option<&'a ModelConfig>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok((bytes.len() as u64, digest.iter().map(|b| format!("{b:02x}")).collect()))
}

fn write_manifest(dir: &Path, mut m: Manifest<'_>, files: &[PathBuf]) -> Result<()> {
    for f in files {
        let (bytes, sha256) = sha256_file(f)?;
        let path = f.strip_prefix(dir).unwrap_or(f).display().to_string();
        m.artifacts.push(Artifact { path, bytes, sha256 });
    }
    write_json(&dir.join("manifest.json"), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest<'a>(command: &'a str, argv: &'a [String], seed: Option<u64>) -> Manifest<'a> {
    Manifest {
        tool: "bvt",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv,
        seed,
        config: None,
        model: None,
        artifacts: Vec::new(),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut spec = match cfg.as_ref().map(|c| &c.data) {
        Some(DataSource::Synthetic(s)) => s.clone(),
        Some(DataSource::Folder { .. }) => {
            return Err(Error::Config("gen-data needs a synthetic data source".into()));
        }
        None => SyntheticSpec::three_class(0, a.image_size, a.per_class),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dir = output_dir(cli, cfg.as_ref())?;
    if cli.dry_run {
        println!(
            "would write {} images of {}x{} to {}",
            spec.total(),
            spec.image_size,
            spec.image_size,
            dir.display()
        );
        return Ok(());
    }
    let ds = crate::data::generate_synthetic(&spec)?;
    ds.write_folder(&dir)?;
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| ds.split(s).len()).collect();
    println!(
        "wrote {} images to {} (train {}, val {}, test {})",
        ds.len(),
        dir.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    let mut m = manifest("gen-data", argv, Some(spec.seed));
    m.config = cfg.as_ref();
    write_manifest(&dir, m, &[dir.join(crate::data::LABELS_FILE)])
}

fn check_image_size(model: &ModelConfig, ds: &crate::data::Dataset) -> Result<()> {
    match ds.image_size() {
        Some((h, w)) if h == model.image_size && w == model.image_size => Ok(()),
        Some((h, w)) => Err(Error::Validation(format!(
            "data has {h}x{w} images but the model expects {0}x{0}",
            model.image_size
        ))),
        None => Err(Error::Validation("dataset is empty".into())),
    }
}

fn cmd_train(cli: &Cli, argv: &[String]) -> Result<()> {
    let mut cfg = require_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let model_cfg = cfg.validate()?;
    let dir = output_dir(cli, Some(&cfg))?;
    if cli.dry_run {
        println!(
            "config ok: {} with {} parameters",
            model_cfg.family.name(),
            model_cfg.param_count()
        );
        return Ok(());
    }
    let ds = cfg.data.load()?;
    check_image_size(&model_cfg, &ds)?;
    if ds.num_classes() > model_cfg.num_classes {
        return Err(Error::Validation(format!(
            "data has {} classes but the model has {} outputs",
            ds.num_classes(),
            model_cfg.num_classes
        )));
    }
    ds.check_trainable()?;
    let norm = cfg.normalization.as_ref();
    let train_set = ds.examples(Split::Train, model_cfg.family, norm)?;
    let val_set = ds.examples(Split::Val, model_cfg.family, norm)?;
    let mut model = TransformerModel::new(model_cfg.clone(), cfg.train.seed)?;
    if let Some(p) = &cfg.init_from {
        let report = load_pretrained(&mut model, &Checkpoint::load(p)?, false)?;
        println!(
            "initialized {} tensors from {} ({} re-drawn)",
            report.matched.len(),
            p.display(),
            report.reinitialized.len()
        );
    }
    println!(
        "training {} ({} parameters) on {} samples",
        model_cfg.family.name(),
        model.param_count(),
        train_set.len()
    );
    let metrics_path = dir.join("metrics.jsonl");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train, &mut log);
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let outcome = outcome?;
    let best = dir.join("best.ckpt");
    let last = dir.join("last.ckpt");
    outcome.best.save(&best)?;
    Checkpoint::from_model(&model, outcome.steps as u64, cfg.train.seed).save(&last)?;
    if let Some(rec) = outcome.history.iter().rev().find(|r| r.split == "val") {
        println!(
            "{} steps; best val F1 {:.4} at epoch {}; last val top-1 {:.4}",
            outcome.steps,
            outcome.history[2 * outcome.best_epoch + 1].f1_macro,
            outcome.best_epoch,
            rec.top1
        );
    }
    let mut m = manifest("train", argv, Some(cfg.train.seed));
    m.config = Some(&cfg);
    m.model = Some(&model_cfg);
    write_manifest(&dir, m, &[best, last, metrics_path])
}

fn resolve_data(cli: &Cli, args: &DataArgs) -> Result<(crate::data::Dataset, Option<RunConfig>)> {
    let cfg = load_config(cli)?;
    let source = match (&args.data, &cfg) {
        (Some(d), _) => DataSource::folder(d),
        (None, Some(c)) => c.data.clone(),
        (None, None) => return Err(Error::Config("no data: pass --data DIR or --config PATH".into())),
    };
    Ok((source.load()?, cfg))
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let split: Split = a.data.split.parse()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let (ds, cfg) = resolve_data(cli, &a.data)?;
    check_image_size(model.config(), &ds)?;
    let dir = output_dir(cli, cfg.as_ref())?;
    if cli.dry_run {
        println!("would evaluate {} samples of split {split}", ds.split(split).len());
        return Ok(());
    }
    let norm = cfg.as_ref().and_then(|c| c.normalization.as_ref());
    let examples = ds.examples(split, model.config().family, norm)?;
    let loss = cfg.as_ref().map_or(TrainConfig::default().loss, |c| c.train.loss);
    let (l, report) = evaluate(&model, &examples, loss, 16)?;
    if !l.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite {} loss on split {split}",
            loss.name()
        )));
    }
    println!(
        "{split}: loss {l:.5} f1 {:.4} top-1 {:.4} top-3 {:.4} ({} samples)",
        report.f1_macro, report.top1, report.top3, report.samples
    );
    let path = dir.join("eval.json");
    #[derive(Serialize)]
    struct EvalOut<'a> {
        split: Split,
        loss_kind: &'a str,
        loss: f64,
        report: &'a crate::train::MetricsReport,
    }
    write_json(
        &path,
        &EvalOut {
            split,
            loss_kind: loss.name(),
            loss: l,
            report: &report,
        },
    )?;
    let mut m = manifest("evaluate", argv, Some(ckpt.seed));
    m.config = cfg.as_ref();
    m.model = Some(model.config());
    write_manifest(&dir, m, &[a.checkpoint.clone(), path])
}

fn sibling_mask(image: &Path) -> Option<PathBuf> {
    let stem = image.file_name()?.to_str()?.strip_suffix(".ppm")?;
    let p = image.with_file_name(format!("{stem}{MASK_SUFFIX}"));
    p.is_file().then_some(p)
}

fn cmd_explain(cli: &Cli, a: &ExplainArgs, argv: &[String]) -> Result<()> {
    let cfg = load_config(cli)?;
    let ex = cfg.as_ref().map(|c| c.explain.clone()).unwrap_or_default();
    let methods = if a.methods.is_empty() {
        ex.methods.clone()
    } else {
        a.methods.clone()
    };
    let mass = a.mass.unwrap_or(ex.mass);
    let layer = a.layer.or(ex.layer);
    let upsample = match a.upsample {
        Some(UpsampleArg::Nearest) => Upsample::Nearest,
        Some(UpsampleArg::Bilinear) => Upsample::Bilinear,
        None => ex.upsample,
    };
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let mc = model.config();
    if methods.iter().any(|m| m.needs_global_attention()) && mc.family.is_windowed() && !mc.modified_last_block {
        return Err(Error::Validation(format!(
            "{} has no global attention layer for {}; retrain with \"modified_last_block\": true or use grad-cam / lrp",
            mc.family.name(),
            methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
        )));
    }
    let img = Image8::load(&a.image)?;
    if img.channels != 3 || img.width != mc.image_size || img.height != mc.image_size {
        return Err(Error::Validation(format!(
            "{} is {}x{}x{}; the model expects an RGB {1}x{1} image",
            a.image.display(),
            img.width,
            img.height,
            mc.image_size
        )));
    }
    let mask_path = a.mask.clone().or_else(|| sibling_mask(&a.image));
    let mask = match &mask_path {
        Some(p) => {
            let m = Image8::load(p)?;
            if (m.width, m.height, m.channels) != (img.width, img.height, 1) {
                return Err(Error::Validation(format!(
                    "mask {} does not match the image",
                    p.display()
                )));
            }
            Some(m.data.iter().map(|&v| v >= 128).collect::<Vec<bool>>())
        }
        None => None,
    };
    let dir = output_dir(cli, cfg.as_ref())?;
    if cli.dry_run {
        println!("would write {} saliency maps to {}", methods.len(), dir.display());
        return Ok(());
    }
    let sample = crate::data::Sample {
        id: "input".into(),
        image: img.to_tensor(),
        label: 0,
        split: Split::Test,
        mask: None,
        path: None,
    };
    let norm = cfg.as_ref().and_then(|c| c.normalization.as_ref());
    let input = six_channel_pipeline(&[&sample], mc.family, norm)?.images;
    let out = explain(&model, &input, &methods, a.class, layer, mass, ex.eps)?;
    println!("explaining class {} (logits {:?})", out.class, out.logits);
    let mut files = vec![a.checkpoint.clone(), a.image.clone()];
    for map in &out.maps {
        let up = render_saliency(&map.grid, img.height, img.width, upsample)?;
        let loc = mask.as_deref().map(|m| localization_score(&up, m)).transpose()?;
        let sidecar = Sidecar::new(map, upsample, loc);
        let (pgm, json) = map.write(&dir, map.method.name(), &up, &sidecar)?;
        match loc {
            Some(l) => println!("{}: localization {l:.4}", map.method.name()),
            None => println!("{}: written", map.method.name()),
        }
        files.push(pgm);
        files.push(json);
    }
    for l in &out.lrp {
        println!(
            "{}: conservation error {:.3e}",
            l.map.method.name(),
            l.conservation_error()
        );
    }
    if let Some(hm) = &out.head_mass {
        let (gh, gw) = out
            .maps
            .first()
            .map_or_else(|| infer_grid(hm.counts.len()), |m| m.shape());
        let path = dir.join("head_mass.csv");
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in 0..gh {
            let row: Vec<String> = hm.counts[r * gw..(r + 1) * gw].iter().map(usize::to_string).collect();
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    let mut m = manifest("explain", argv, Some(ckpt.seed));
    m.config = cfg.as_ref();
    m.model = Some(mc);
    write_manifest(&dir, m, &files)
}

fn infer_grid(n: usize) -> (usize, usize) {
    let g = (n as f64).sqrt().round() as usize;
    if g * g == n {
        (g, g)
    } else {
        (1, n)
    }
}

/// Fewest samples accepted by `cka`.
pub const MIN_CKA_SAMPLES: usize = 32;

fn cmd_cka(cli: &Cli, a: &CkaArgs, argv: &[String]) -> Result<()> {
    if a.samples < MIN_CKA_SAMPLES {
        return Err(Error::Validation(format!(
            "cka needs at least {MIN_CKA_SAMPLES} samples, got {}",
            a.samples
        )));
    }
    let split: Split = a.data.split.parse()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let (ds, cfg) = resolve_data(cli, &a.data)?;
    check_image_size(model.config(), &ds)?;
    let chosen: Vec<_> = ds.split(split).into_iter().take(a.samples).collect();
    if chosen.len() < MIN_CKA_SAMPLES {
        return Err(Error::Validation(format!(
            "split {split} has {} samples; cka needs at least {MIN_CKA_SAMPLES}",
            chosen.len()
        )));
    }
    let dir = output_dir(cli, cfg.as_ref())?;
    if cli.dry_run {
        println!(
            "would compare {} layers on {} samples",
            model.config().depth,
            chosen.len()
        );
        return Ok(());
    }
    let norm = cfg.as_ref().and_then(|c| c.normalization.as_ref());
    let examples = six_channel_pipeline(&chosen, model.config().family, norm)?;
    let ids = chosen.iter().map(|s| s.id.clone()).collect();
    let stack = ActivationStack::from_model(&model, &examples.images, ids, Pooling::PatchMean, 16)?;
    let m = cka_matrix(&stack)?;
    let csv_path = dir.join("cka.csv");
    m.save_csv(&csv_path)?;
    let summary_path = dir.join("cka_summary.json");
    write_json(&summary_path, &m.summary(&stack))?;
    println!("{} layers, mean off-diagonal CKA {:.6}", m.len(), m.mean_off_diagonal());
    let mut man = manifest("cka", argv, Some(ckpt.seed));
    man.config = cfg.as_ref();
    man.model = Some(model.config());
    write_manifest(&dir, man, &[a.checkpoint.clone(), csv_path, summary_path])
}

fn param_count(cli: &Cli, a: &ParamCountArgs) -> Result<()> {
    let cfg = match (&a.preset, &a.family) {
        (Some(p), Some(f)) => ModelConfig::preset(p, Family::parse(f)?, a.classes)?,
        (None, None) => require_config(cli)?.validate()?,
        _ => return Err(Error::Config("pass both --preset and --family, or --config".into())),
    };
    let model = TransformerModel::new(cfg.clone(), 0)?;
    println!("{}", model.param_count());
    if model.param_count() != cfg.param_count() {
        return Err(Error::Validation(format!(
            "closed-form count {} disagrees with the built model",
            cfg.param_count()
        )));
    }
    Ok(())
}

//! Command-line front end. Every command prints `key=value` summaries.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codec::Codec;
use crate::coder::Bitstream;
use crate::corpus::{gen_corpus, ContentKind, CorpusManifest, CorpusSpec, Role};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, write_rd_csv, EvalConfig, ModelArms};
use crate::image_io::{load_image, save_image};
use crate::metrics::{bits_per_pixel, image_mse_8bit, psnr_db, Strategy};
use crate::network::{ArchitectureConfig, ModelParams};
use crate::refine::RefineConfig;
use crate::train::{append_train_log, train, RDLossConfig, TrainMode, TrainSchedule};

#[derive(Debug, Parser)]
#[command(name = "latent-codec", version, about = "Learned image codec with per-image latent refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, or fine-tune a model's prior, on a manifest's train images.
    Train(TrainArgs),
    /// Compress an image to a bitstream.
    Compress(CompressArgs),
    /// Decompress a bitstream to an image.
    Decompress(DecompressArgs),
    /// Rate-distortion evaluation over a manifest's test images.
    Eval(EvalArgs),
    /// Write a synthetic corpus and its manifest.
    GenCorpus(GenCorpusArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CliTrainMode {
    Full,
    ProbaOnly,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model file to write.
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: CliTrainMode,
    /// Starting model; required for proba-only.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Defaults to 0.01, or to the base model's λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Training log CSV; defaults to `<output>.train.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Refine the latents before coding.
    #[arg(long)]
    pub refine: bool,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Steps between hard-quantized checkpoint evaluations.
    #[arg(long, default_value_t = 25)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RefineArgs {
    fn config(&self) -> RefineConfig {
        RefineConfig {
            max_steps: self.steps,
            lr: self.lr,
            eval_every: self.eval_every,
            seed: self.seed,
            ..RefineConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// PNG or binary PPM image.
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long, short)]
    pub output: PathBuf,
    #[command(flatten)]
    pub refine: RefineArgs,
    /// Write the refinement trace CSV here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub model: PathBuf,
    /// `.png` or `.ppm`.
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Base model; repeat once per λ.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Prior-fine-tuned models, matched to base models by λ.
    #[arg(long = "proba")]
    pub proba: Vec<PathBuf>,
    /// Fully retrained models, matched to base models by λ.
    #[arg(long = "retrained")]
    pub retrained: Vec<PathBuf>,
    /// Comma-separated: baseline, +adapt, +proba, retrained.
    #[arg(long, value_delimiter = ',', default_value = "baseline,+adapt", value_parser = parse_strategy)]
    pub strategies: Vec<Strategy>,
    /// Restrict to these λ values.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 25)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "shapes")]
    pub kind: ContentKind,
    #[arg(long, default_value_t = 32)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_kind(s: &str) -> std::result::Result<ContentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit code
/// (0 success, 1 runtime error, 2 usage error).
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli, out: &mut impl std::io::Write) -> std::result::Result<(), Failure> {
    let lines = match cli.command {
        Command::Train(a) => cmd_train(&a)?,
        Command::Compress(a) => cmd_compress(&a)?,
        Command::Decompress(a) => cmd_decompress(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::GenCorpus(a) => cmd_gen_corpus(&a)?,
    };
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Codec> {
    Codec::new(ModelParams::load(path)?)
}

fn cmd_train(a: &TrainArgs) -> std::result::Result<Vec<String>, Failure> {
    let (mode, base) = match (a.mode, &a.base) {
        (CliTrainMode::ProbaOnly, None) => {
            return Err(Failure::Usage("proba-only training needs --base <model>".into()))
        }
        (CliTrainMode::ProbaOnly, Some(p)) => (TrainMode::ProbaOnly, ModelParams::load(p)?),
        (CliTrainMode::Full, Some(p)) => (TrainMode::Full, ModelParams::load(p)?),
        (CliTrainMode::Full, None) => {
            let lambda = a.lambda.unwrap_or(0.01);
            (TrainMode::Full, ModelParams::init(ArchitectureConfig::default(), lambda, a.seed)?)
        }
    };
    let lambda = a.lambda.unwrap_or(base.lambda);
    let cfg = RDLossConfig::new(lambda)?;
    let manifest = CorpusManifest::load(&a.manifest)?;
    let images: Vec<_> = manifest
        .load_images(Role::Train)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    if images.is_empty() {
        return Err(Error::Corpus("manifest has no train images".into()).into());
    }
    let schedule = TrainSchedule {
        steps: a.steps,
        batch_size: a.batch,
        crop: a.crop,
        lr: a.lr,
        seed: a.seed,
        log_every: a.log_every,
        threads: a.threads,
        ..TrainSchedule::default()
    };
    let outcome = train(&images, &base, mode, &cfg, &schedule)?;
    outcome.params.save(&a.output)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.output.clone().into_os_string();
        p.push(".train.csv");
        PathBuf::from(p)
    });
    append_train_log(&log_path, &outcome.log)?;
    let last = outcome.log.last();
    let mut lines = vec![
        format!("model={}", a.output.display()),
        format!("model_id={:016x}", outcome.params.model_id()),
        format!("mode={mode}"),
        format!("lambda={lambda}"),
        format!("steps={}", a.steps),
        format!("seed={}", a.seed),
        format!("log={}", log_path.display()),
    ];
    if let Some(row) = last {
        lines.push(format!("final_loss={:.6}", row.loss));
        lines.push(format!("final_rate_bpp={:.6}", row.rate_bpp));
        lines.push(format!("final_mse={:.8}", row.mse));
    }
    if let Some(reason) = outcome.aborted {
        lines.push(format!("aborted={reason}"));
    }
    Ok(lines)
}

fn cmd_compress(a: &CompressArgs) -> std::result::Result<Vec<String>, Failure> {
    let codec = load_model(&a.model)?;
    let image = load_image(&a.input)?;
    let refine = a.refine.refine.then(|| a.refine.config());
    if let Some(cfg) = &refine {
        cfg.validate()?;
    }
    let compressed = codec.compress(&image, refine.as_ref())?;
    let bytes = compressed.bitstream.pack();
    std::fs::write(&a.output, &bytes)?;
    let decoded = codec.decompress(&compressed.bitstream)?;
    let mse = image_mse_8bit(&image, &decoded.image)?;
    let [_, _, h, w] = image.dims4()?;
    let mut lines = vec![
        format!("output={}", a.output.display()),
        format!("bytes={}", bytes.len()),
        format!("width={w}"),
        format!("height={h}"),
        format!("bpp_payload={:.6}", bits_per_pixel(compressed.bitstream.payload.len(), w, h)),
        format!("bpp_total={:.6}", bits_per_pixel(bytes.len(), w, h)),
        format!("mse={mse:.6}"),
        format!("psnr_db={:.6}", psnr_db(mse)),
        format!("refine_steps={}", refine.as_ref().map_or(0, |r| r.max_steps)),
        format!("seed={}", a.refine.seed),
    ];
    if let Some(r) = &compressed.refinement {
        lines.push(format!("best_step={}", r.best_checkpoint().step));
        lines.push(format!("initial_true_loss={:.6}", r.initial_checkpoint().true_loss));
        lines.push(format!("best_true_loss={:.6}", r.best_checkpoint().true_loss));
        if r.diverged {
            lines.push("diverged=true".into());
        }
        if let Some(path) = &a.trace {
            r.write_trace(path)?;
            lines.push(format!("trace={}", path.display()));
        }
    } else if a.trace.is_some() {
        return Err(Failure::Usage("--trace requires --refine".into()));
    }
    Ok(lines)
}

fn cmd_decompress(a: &DecompressArgs) -> std::result::Result<Vec<String>, Failure> {
    let codec = load_model(&a.model)?;
    let bytes = std::fs::read(&a.input)?;
    let bitstream = Bitstream::unpack(&bytes)?;
    let decoded = codec.decompress(&bitstream)?;
    save_image(&a.output, &decoded.image)?;
    Ok(vec![
        format!("output={}", a.output.display()),
        format!("width={}", bitstream.header.width),
        format!("height={}", bitstream.header.height),
        format!("decoder_ops={}", decoded.decoder_ops),
    ])
}

fn cmd_eval(a: &EvalArgs) -> std::result::Result<Vec<String>, Failure> {
    let manifest = CorpusManifest::load(&a.manifest)?;
    let images = manifest.load_images(Role::Test)?;
    if images.is_empty() {
        return Err(Error::Corpus("manifest has no test images".into()).into());
    }
    let load_all = |paths: &[PathBuf]| -> Result<Vec<Codec>> { paths.iter().map(|p| load_model(p)).collect() };
    let (proba, retrained) = (load_all(&a.proba)?, load_all(&a.retrained)?);
    let take = |pool: &[Codec], lambda: f64| pool.iter().find(|c| c.params().lambda == lambda).cloned();
    let mut arms = Vec::new();
    for base in load_all(&a.models)? {
        let lambda = base.params().lambda;
        if !a.lambdas.is_empty() && !a.lambdas.contains(&lambda) {
            continue;
        }
        arms.push(ModelArms {
            proba: take(&proba, lambda),
            retrained: take(&retrained, lambda),
            base,
        });
    }
    for l in &a.lambdas {
        if !arms.iter().any(|arm| arm.lambda() == *l) {
            return Err(Failure::Usage(format!("no --model trained at lambda {l}")));
        }
    }
    let cfg = EvalConfig {
        strategies: a.strategies.clone(),
        refine: RefineConfig {
            max_steps: a.steps,
            lr: a.lr,
            eval_every: a.eval_every,
            ..RefineConfig::default()
        },
        threads: a.threads,
        seed: a.seed,
    };
    cfg.refine.validate()?;
    let rows = evaluate(&images, &arms, &cfg)?;
    write_rd_csv(&a.output, &rows)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    let mut lines = vec![
        format!("output={}", a.output.display()),
        format!("rows={}", rows.len()),
        format!("failed={failed}"),
        format!("seed={}", a.seed),
    ];
    for m in aggregate(&rows) {
        lines.push(format!(
            "lambda={} strategy={} bpp_payload={:.6} psnr_db={:.4}",
            m.lambda, m.strategy, m.bpp_payload, m.psnr_db
        ));
    }
    Ok(lines)
}

fn cmd_gen_corpus(a: &GenCorpusArgs) -> std::result::Result<Vec<String>, Failure> {
    let spec = CorpusSpec {
        kind: a.kind,
        train: a.train,
        test: a.test,
        width: a.width,
        height: a.height,
        seed: a.seed,
    };
    let manifest = gen_corpus(&a.output, &spec)?;
    Ok(vec![
        format!("manifest={}", a.output.join(crate::corpus::MANIFEST_NAME).display()),
        format!("train={}", a.train),
        format!("test={}", a.test),
        format!("content_hash={}", manifest.content_hash()?),
        format!("seed={}", a.seed),
    ])
}

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use motion_diffuse::dataset::{generate_synthetic, load_dataset, training_clips, DatasetSpec, Family, Sample};
use motion_diffuse::denoiser::DenoiserConfig;
use motion_diffuse::diffusion::ScheduleConfig;
use motion_diffuse::editor::{edit, inbetween_mask, load_mask, prediction_mask, EditMask};
use motion_diffuse::evaluate::{evaluate, EvalConfig};
use motion_diffuse::extractor::{train_feature_extractor, ExtractorConfig, ExtractorTrainConfig, FeatureExtractor};
use motion_diffuse::motion::{load_motion_dims, save_motion, sidecar_path, MotionSequence, PositionsFile, Skeleton};
use motion_diffuse::sampler::{sample_many, Method, SampleSpec};
use motion_diffuse::text::{load_embedding_file, FileEncoder, TextEncoder};
use motion_diffuse::trainer::{TrainConfig, Trainer};
use motion_diffuse::Error;
use serde::{Deserialize, Serialize};

const CONFIG_ENV: &str = "MOTION_DIFFUSE_CONFIG";

#[derive(Parser)]
#[command(name = "motion-diffuse", version, about = "Text-driven motion diffusion: data, training, sampling, editing, evaluation")]
struct Cli {
    /// JSON run configuration; defaults to $MOTION_DIFFUSE_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic text–motion dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Generate motions from a prompt.
    Sample(SampleArgs),
    /// Regenerate the unmasked part of a reference motion.
    Edit(EditArgs),
    /// Sample for every annotation of a dataset and write a metric report.
    Eval(EvalArgs),
    /// Train the contrastive feature extractor used by `eval`.
    TrainExtractor(ExtractorArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    freeze_text: bool,
    /// JSON-lines loss log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the checkpoint every N steps as well as at the end.
    #[arg(long, default_value_t = 0)]
    save_every: u64,
    /// Continue from `--out` when it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Sampling {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stored prompt embeddings (JSON lines); unknown prompts use the model's table.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Also write joint positions to `<out>.pos.json`.
    #[arg(long)]
    positions: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    /// Number of motions; sample `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    text: String,
    #[arg(long)]
    out: PathBuf,
    /// Keep the first N frames and predict the rest.
    #[arg(long)]
    predict_after: Option<usize>,
    /// Keep the first A frames (with `--keep-tail`) and fill the middle.
    #[arg(long)]
    keep_head: Option<usize>,
    #[arg(long)]
    keep_tail: Option<usize>,
    #[command(flatten)]
    sampling: Sampling,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Evaluate at most N clips, spread evenly over the dataset.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ExtractorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Everything a JSON config file may set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    train: TrainConfig,
    data: DataConfig,
    extractor: ExtractorConfig,
    extractor_train: ExtractorTrainConfig,
    eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    clip_frames: usize,
    clip_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clip_frames: 128,
            clip_stride: 32,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let Some(path) = path.map(Path::to_path_buf).or(env_path) else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let cfg = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

fn print_config<T: Serialize>(what: &str, cfg: &T) -> Result<()> {
    eprintln!("{what} configuration:\n{}", serde_json::to_string_pretty(cfg)?);
    Ok(())
}

fn load_clips(dir: &Path, data: &DataConfig, stride: usize) -> Result<Vec<Sample>> {
    let samples = load_dataset(dir)?;
    Ok(training_clips(&samples, data.clip_frames, stride)?)
}

fn encoder(trainer: &Trainer, embeddings: Option<&Path>) -> Result<Box<dyn TextEncoder>> {
    let toy = trainer.net.text_encoder(&trainer.ema);
    Ok(match embeddings {
        Some(p) => Box::new(FileEncoder::new(load_embedding_file(p)?, toy)?),
        None => Box::new(toy),
    })
}

fn write_motion(m: &MotionSequence, path: &Path, positions: bool) -> Result<()> {
    save_motion(m, path)?;
    if positions {
        PositionsFile::from_motion(m, &Skeleton::default())?.save(&sidecar_path(path))?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn sample_spec(trainer: &Trainer, s: &Sampling, length: usize, seed: u64) -> SampleSpec {
    let mut spec = SampleSpec::new(length, seed);
    spec.steps = s.steps;
    if let Some(g) = s.guidance {
        spec.guidance_scale = g;
    }
    if let Some(m) = s.method {
        spec.method = m;
    }
    log::debug!("sampling with {} schedule steps", trainer.schedule.len());
    spec
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{i}{ext}"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::MakeSynthetic { out, classes, per_class, seed } => {
            if classes < 2 || classes > Family::ALL.len() {
                return Err(Error::Validation(format!("--classes must be in 2..={}", Family::ALL.len())).into());
            }
            if per_class == 0 {
                return Err(Error::Validation("--per-class must be positive".into()).into());
            }
            let spec = DatasetSpec {
                classes: Family::ALL[..classes].to_vec(),
                samples_per_class: per_class,
                seed,
                ..DatasetSpec::default()
            };
            print_config("dataset", &spec)?;
            let samples = generate_synthetic(&spec, &out)?;
            println!("wrote {} motions in {} classes to {}", samples.len(), classes, out.display());
        }
        Command::Train(a) => {
            if let Some(v) = a.steps {
                cfg.train.total_steps = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.seed {
                cfg.train.seed = v;
            }
            cfg.train.freeze_text |= a.freeze_text;
            print_config("run", &cfg)?;
            let data = load_clips(&a.data, &cfg.data, cfg.data.clip_stride)?;
            info!("{} training clips", data.len());
            let mut trainer = if a.resume && a.out.exists() {
                let mut t = Trainer::load(&a.out)?;
                t.cfg.total_steps = cfg.train.total_steps;
                info!("resuming at step {}", t.step);
                t
            } else {
                Trainer::new(cfg.model.clone(), cfg.schedule, cfg.train.clone())?
            };
            let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.jsonl"));
            let mut log = fs::OpenOptions::new()
                .create(true)
                .append(a.resume)
                .write(true)
                .truncate(!a.resume)
                .open(&log_path)
                .map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
            while trainer.step < trainer.cfg.total_steps {
                let batch = trainer.draw_batch(&data)?;
                let (l, grad_norm) = trainer.train_step(&batch)?;
                let entry = serde_json::json!({
                    "step": trainer.step,
                    "simple": l.simple,
                    "vlb": l.vlb,
                    "hybrid": l.hybrid,
                    "lr": trainer.cfg.lr,
                    "grad_norm": grad_norm,
                });
                writeln!(log, "{entry}").map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
                if trainer.step % 50 == 0 {
                    info!("step {} hybrid {:.5}", trainer.step, l.hybrid);
                }
                if a.save_every > 0 && trainer.step % a.save_every == 0 {
                    trainer.save(&a.out)?;
                }
            }
            trainer.save(&a.out)?;
            println!("wrote {} at step {}", a.out.display(), trainer.step);
        }
        Command::Sample(a) => {
            let trainer = Trainer::load(&a.ckpt)?;
            let enc = encoder(&trainer, a.sampling.embeddings.as_deref())?;
            let ctx = enc.encode(&a.text);
            let jobs: Vec<_> = (0..a.count.max(1))
                .map(|i| (ctx.clone(), sample_spec(&trainer, &a.sampling, a.frames, a.sampling.seed.wrapping_add(i as u64))))
                .collect();
            print_config("sampling", &jobs[0].1)?;
            let model = trainer.ema_model();
            let results = sample_many(&model, &trainer.schedule, &jobs, &enc.encode(""), a.jobs);
            for (i, m) in results.into_iter().enumerate() {
                let path = if jobs.len() == 1 { a.out.clone() } else { numbered(&a.out, i) };
                write_motion(&m?, &path, a.sampling.positions)?;
            }
        }
        Command::Edit(a) => {
            let trainer = Trainer::load(&a.ckpt)?;
            let model = trainer.ema_model();
            let reference = load_motion_dims(&a.reference, trainer.net.config().d_motion)?;
            let (frames, dims) = reference.data.dim();
            let mut masks: Vec<EditMask> = Vec::new();
            if let Some(p) = &a.mask {
                masks.push(load_mask(p, frames, dims)?);
            }
            if let Some(n) = a.predict_after {
                masks.push(prediction_mask(frames, dims, n)?);
            }
            match (a.keep_head, a.keep_tail) {
                (None, None) => {}
                (h, t) => masks.push(inbetween_mask(frames, dims, h.unwrap_or(0), t.unwrap_or(0))?),
            }
            let mask = masks
                .into_iter()
                .try_fold(EditMask::zeros(frames, dims), |acc, m| acc.union(&m))?;
            if mask.count_preserved() == 0 {
                log::warn!("mask keeps nothing; this is plain sampling");
            }
            let enc = encoder(&trainer, a.sampling.embeddings.as_deref())?;
            let spec = sample_spec(&trainer, &a.sampling, reference.valid_len, a.sampling.seed);
            print_config("sampling", &spec)?;
            let out = edit(&model, &trainer.schedule, &reference, &mask, &enc.encode(&a.text), &enc.encode(""), &spec)?;
            write_motion(&out, &a.out, a.sampling.positions)?;
        }
        Command::Eval(a) => {
            if !a.extractor.exists() {
                return Err(Error::Io {
                    path: a.extractor.clone(),
                    source: std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "feature extractor not found; run `motion-diffuse train-extractor --data DIR --out FILE` first",
                    ),
                }
                .into());
            }
            if let Some(v) = a.steps {
                cfg.eval.steps = Some(v);
            }
            if let Some(v) = a.guidance {
                cfg.eval.guidance_scale = v;
            }
            if let Some(v) = a.seed {
                cfg.eval.seed = v;
            }
            if let Some(v) = a.jobs {
                cfg.eval.threads = v;
            }
            print_config("eval", &cfg.eval)?;
            let trainer = Trainer::load(&a.ckpt)?;
            let extractor = FeatureExtractor::load(&a.extractor)?;
            let mut data = load_clips(&a.data, &cfg.data, cfg.data.clip_frames)?;
            if let Some(n) = a.limit.filter(|&n| n > 0 && n < data.len()) {
                let stride = data.len().div_ceil(n);
                data = data.into_iter().step_by(stride).collect();
            }
            let enc = encoder(&trainer, None)?;
            let report = evaluate(&trainer.ema_model(), &trainer.schedule, enc.as_ref(), &extractor, &data, &cfg.eval)?;
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(&a.out, json).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
            let table = report.to_string();
            let table_path = a.out.with_extension("txt");
            fs::write(&table_path, &table).map_err(|e| Error::Io { path: table_path, source: e })?;
            println!("{table}");
        }
        Command::TrainExtractor(a) => {
            if let Some(v) = a.steps {
                cfg.extractor_train.steps = v;
            }
            if let Some(v) = a.seed {
                cfg.extractor_train.seed = v;
            }
            cfg.extractor.max_frames = cfg.extractor.max_frames.max(cfg.data.clip_frames);
            print_config("extractor", &(&cfg.extractor, &cfg.extractor_train))?;
            let data = load_clips(&a.data, &cfg.data, cfg.data.clip_stride)?;
            let ex = train_feature_extractor(&data, cfg.extractor.clone(), &cfg.extractor_train, |_, _| {})?;
            ex.save(&a.out)?;
            println!("wrote {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("motion-diffuse failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

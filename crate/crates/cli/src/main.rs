use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pgan_core::checkpoint::{load_generators, resolve_checkpoint_path, Checkpoint};
use pgan_core::config::Config;
use pgan_core::data::toy::{synth_toy_domains, ToyTask};
use pgan_core::data::{decode, list_images, rgb_to_signed_chw, tensor_to_images, PreprocessSpec};
use pgan_core::evalkit::{self, AttrTrainConfig, AttributeClassifier, C2STConfig, FitOptions, MetricRecord};
use pgan_core::generator::Generator;
use pgan_core::nn::Track;
use pgan_core::refnet::pretrain::{pretrain_trunk, toy_trunk_arch, TrunkPretrainConfig};
use pgan_core::refnet::{load_reference_weights, ArchDescriptor};
use pgan_core::trainer::{builtin_arch, run_training};
use pgan_core::{Error, Result};

const DEVICE_ENV: &str = "PGAN_DEVICE";
const MANIFEST_FILE: &str = "run_manifest.json";

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "pgan", version, about = "Unpaired image translation with a frozen-feature discriminator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Direction {
    Xy,
    Yx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Metric {
    C2st,
    Attr,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Load trunk weights, optionally apply pool/rectifier surgery, and
    /// write a prepared container plus manifest.
    PrepareRefnet {
        #[arg(long)]
        weights: PathBuf,
        /// `vgg19`, `toy-vgg-shapes` or a descriptor file.
        #[arg(long)]
        arch: String,
        #[arg(long, value_enum, default_value = "on")]
        surgery: OnOff,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the generators, then train adversarially.
    Train {
        /// Config file; optional when resuming (the checkpoint's config is used).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file, checkpoint directory or run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory. Defaults to `runs/<config name>`, or the resumed run.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `section.key=value`, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        /// Resume even if the config hash differs from the checkpoint's.
        #[arg(long)]
        allow_config_change: bool,
    },
    /// Translate every image of a folder, keeping file names.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "xy")]
        direction: Direction,
        #[arg(long)]
        force: bool,
    },
    /// Translate a source folder and score it against real target images.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum, default_value = "c2st")]
        metric: Metric,
        /// Metrics file (one JSON record per line).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "xy")]
        direction: Direction,
        /// Attribute classifier; defaults to `eval.attr_classifier`.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Target class id; defaults to `eval.attr_target`.
        #[arg(long)]
        target: Option<u32>,
        /// Also write an input/output montage of the first 8 images.
        #[arg(long)]
        montage: Option<PathBuf>,
        /// `eval.key=value` overrides.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Write procedural toy domains as `domainX/` and `domainY/` PNG folders.
    MakeToyData {
        #[arg(long, default_value = "shapes")]
        task: String,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the small shape-classification trunk and save it as
    /// trunk weights.
    MakeToyTrunk {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: u32,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy domain classifier used by `evaluate --metric attr`.
    TrainAttr {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "shapes")]
        task: String,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: u32,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Written to the run directory before training starts and completed when
/// it ends.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: Vec<String>,
    config_hash: String,
    /// Fully resolved config, all defaults materialized.
    config: String,
    output_dir: PathBuf,
    started_at: u64,
    finished_at: Option<u64>,
    status: String,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(m: &RunManifest) -> Result<()> {
    let path = m.output_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.is_empty() && d != "cpu" => Err(Error::config(
            DEVICE_ENV,
            format!("device `{d}` is not available in this build (only `cpu`)"),
        )),
        _ => Ok(()),
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Refuses to write into an existing non-empty directory (or over an
/// existing file) unless forced.
fn guard_output(p: &Path, force: bool) -> Result<()> {
    let taken = if p.is_dir() { is_nonempty_dir(p) } else { p.exists() };
    if taken && !force {
        return Err(Error::config(
            "output",
            format!("{} already exists; pass --force to overwrite", p.display()),
        ));
    }
    Ok(())
}

fn parse_arch(arch: &str) -> Result<ArchDescriptor> {
    let p = Path::new(arch);
    if p.is_file() {
        ArchDescriptor::from_file(p)
    } else {
        builtin_arch(arch)
    }
}

fn prepare_refnet(weights: &Path, arch: &str, surgery: OnOff, out: &Path) -> Result<()> {
    let desc = parse_arch(arch)?;
    let mut net = load_reference_weights(weights, &desc)?;
    if surgery == OnOff::On && !net.is_surgically_modified() {
        net = net.apply_surgery()?;
    }
    net.save(out)?;
    log::info!(
        "wrote {} ({} conv layers, surgery {})",
        out.display(),
        net.conv_layer_count(),
        if net.is_surgically_modified() { "applied" } else { "off" }
    );
    Ok(())
}

/// Run directory of a checkpoint path (`<run>/checkpoints/step_N`).
fn run_dir_of(ckpt: &Path) -> PathBuf {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    if dir.file_name().is_some_and(|n| n == "checkpoints") {
        dir.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        dir.to_path_buf()
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    resume: Option<&Path>,
    out: Option<&Path>,
    set: &[String],
    force: bool,
    allow_config_change: bool,
    argv: Vec<String>,
) -> Result<()> {
    let resume = resume.map(resolve_checkpoint_path).transpose()?;
    let cfg = match (config, &resume) {
        (Some(p), _) => Config::load(p, set)?,
        (None, Some(ck)) => {
            let stored = Checkpoint::read(ck)?.meta.config;
            Config::from_toml_with_overrides(&stored, set)?
        }
        (None, None) => return Err(Error::config("config", "pass --config (or --resume)")),
    };
    let out = match (out, &resume, config) {
        (Some(o), _, _) => o.to_path_buf(),
        (None, Some(ck), _) => run_dir_of(ck),
        (None, None, Some(c)) => {
            let stem = c.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "run".into());
            PathBuf::from("runs").join(stem)
        }
        (None, None, None) => unreachable!("config required without resume"),
    };
    if resume.is_none() {
        guard_output(&out, force)?;
        if force {
            for owned in ["checkpoints", "log.jsonl", MANIFEST_FILE] {
                let p = out.join(owned);
                let r = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
                if let Err(e) = r {
                    if e.kind() != std::io::ErrorKind::NotFound {
                        return Err(Error::io(&p, e));
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut manifest = RunManifest {
        command: argv,
        config_hash: cfg.hash(),
        config: cfg.to_toml(),
        output_dir: out.clone(),
        started_at: now(),
        finished_at: None,
        status: "running".into(),
    };
    write_manifest(&manifest)?;
    log::info!("run {} (config {})", out.display(), &manifest.config_hash[..12]);
    let result = run_training(&cfg, &out, resume.as_deref(), allow_config_change);
    manifest.finished_at = Some(now());
    manifest.status = match &result {
        Ok(_) => "completed".into(),
        Err(e) => format!("failed: {e}"),
    };
    write_manifest(&manifest)?;
    let state = result?;
    log::info!("finished at step {}", state.step);
    Ok(())
}

fn pick_generator(set: &pgan_core::checkpoint::GeneratorSet, direction: Direction) -> Result<&Generator> {
    match direction {
        Direction::Xy => Ok(&set.g_xy),
        Direction::Yx => set.g_yx.as_ref().ok_or_else(|| {
            Error::config(
                "direction",
                "checkpoint was trained in single mode and has no reverse (yx) generator",
            )
        }),
    }
}

/// Native-size image as a `[1, 3, H, W]` tensor in `[-1, 1]`.
fn load_native(path: &Path) -> Result<candle_core::Tensor> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(candle_core::Tensor::from_vec(
        rgb_to_signed_chw(&rgb),
        (1, 3, h as usize, w as usize),
        &candle_core::Device::Cpu,
    )?)
}

fn translate(checkpoint: &Path, input: &Path, output: &Path, direction: Direction, force: bool) -> Result<()> {
    let set = load_generators(&resolve_checkpoint_path(checkpoint)?)?;
    let g = pick_generator(&set, direction)?;
    let files = list_images(input)?;
    guard_output(output, force)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    for f in &files {
        let x = load_native(f)?;
        let y = g
            .translate(&x, Track::InputOnly)
            .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        let name = f.file_name().expect("listed files have names");
        let dst = output.join(name);
        tensor_to_images(&y)?[0].save(&dst).map_err(|e| Error::Decode {
            path: dst.clone(),
            msg: e.to_string(),
        })?;
    }
    log::info!("translated {} images into {}", files.len(), output.display());
    Ok(())
}

/// Every image of `dir` resized to the training resolution.
fn load_folder(dir: &Path, resolution: u32) -> Result<candle_core::Tensor> {
    let spec = PreprocessSpec::new(resolution);
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{} contains no images", dir.display())));
    }
    let r = resolution as usize;
    let mut data = Vec::with_capacity(files.len() * 3 * r * r);
    for f in &files {
        data.extend(decode(f, &spec)?);
    }
    Ok(candle_core::Tensor::from_vec(data, (files.len(), 3, r, r), &candle_core::Device::Cpu)?)
}

struct EvaluateArgs<'a> {
    checkpoint: &'a Path,
    real: &'a Path,
    source: &'a Path,
    metric: Metric,
    out: &'a Path,
    direction: Direction,
    classifier: Option<&'a Path>,
    target: Option<u32>,
    montage: Option<&'a Path>,
    set: &'a [String],
    force: bool,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    guard_output(a.out, a.force)?;
    let set = load_generators(&resolve_checkpoint_path(a.checkpoint)?)?;
    let mut cfg = set.config.clone();
    if !a.set.is_empty() {
        cfg = Config::from_toml_with_overrides(&cfg.to_toml(), a.set)?;
    }
    let run_hash = set.config.hash();
    let want_attr = matches!(a.metric, Metric::Attr | Metric::Both);
    let clf = if want_attr {
        let path = a
            .classifier
            .map(Path::to_path_buf)
            .or_else(|| (!cfg.eval.attr_classifier.is_empty()).then(|| PathBuf::from(&cfg.eval.attr_classifier)));
        let Some(path) = path else {
            return Err(Error::config(
                "eval.attr_classifier",
                "no attribute classifier given; train one with `pgan train-attr --out <file>` and pass --classifier",
            ));
        };
        if !path.is_file() {
            return Err(Error::config(
                "eval.attr_classifier",
                format!("{} not found; train one with `pgan train-attr --out {}`", path.display(), path.display()),
            ));
        }
        Some(AttributeClassifier::load(&path)?)
    } else {
        None
    };

    let g = pick_generator(&set, a.direction)?;
    let res = cfg.data.resolution;
    let source = load_folder(a.source, res)?;
    let fake = evalkit::translate_all(g, &source, 32)?;
    let mut records: Vec<MetricRecord> = Vec::new();
    if matches!(a.metric, Metric::C2st | Metric::Both) {
        let real = load_folder(a.real, res)?;
        let r = evalkit::c2st(&real, &fake, &C2STConfig::from_eval(&cfg.eval))?;
        log::info!("c2st log-loss {:.4} (accuracy {:.3})", r.log_loss, r.accuracy);
        records.push(r.record(&run_hash));
    }
    if let Some(clf) = clf {
        let target = a.target.unwrap_or(cfg.eval.attr_target);
        let s = evalkit::attribute_logloss(&clf, &fake, target)?;
        log::info!("attribute log-loss {:.4} over {} images", s.mean_nll, s.count);
        records.push(s.record(&run_hash));
    }
    evalkit::export_metrics(&records, a.out)?;
    if let Some(m) = a.montage {
        let n = source.dim(0)?.min(8);
        evalkit::save_montage(&source.narrow(0, 0, n)?, &fake.narrow(0, 0, n)?, m)?;
    }
    Ok(())
}

fn make_toy_data(task: &str, count: usize, resolution: u32, seed: u64, out: &Path, force: bool) -> Result<()> {
    let task: ToyTask = task.parse()?;
    guard_output(out, force)?;
    let (x, y) = synth_toy_domains(task, count, resolution, seed)?;
    x.write_to(out)?;
    y.write_to(out)?;
    log::info!("wrote {count} images per domain under {}", out.display());
    Ok(())
}

fn make_toy_trunk(out: &Path, resolution: u32, steps: usize, seed: u64) -> Result<()> {
    let cfg = TrunkPretrainConfig {
        resolution,
        steps,
        seed,
        ..Default::default()
    };
    let t = pretrain_trunk(&toy_trunk_arch(), &cfg)?;
    t.net.save(out)?;
    log::info!("hold-out shape accuracy {:.3}; wrote {}", t.holdout_accuracy, out.display());
    Ok(())
}

fn train_attr(out: &Path, task: &str, count: usize, resolution: u32, epochs: usize, seed: u64) -> Result<()> {
    let defaults = AttrTrainConfig::default();
    let cfg = AttrTrainConfig {
        task: task.parse()?,
        count,
        resolution,
        fit: FitOptions {
            epochs,
            seed,
            ..defaults.fit
        },
        ..defaults
    };
    let (clf, acc) = evalkit::train_attribute_classifier(&cfg)?;
    clf.save(out)?;
    log::info!("hold-out accuracy {acc:.3}; wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::PrepareRefnet {
            weights,
            arch,
            surgery,
            out,
        } => prepare_refnet(&weights, &arch, surgery, &out),
        Command::Train {
            config,
            resume,
            out,
            set,
            force,
            allow_config_change,
        } => train(
            config.as_deref(),
            resume.as_deref(),
            out.as_deref(),
            &set,
            force,
            allow_config_change,
            argv,
        ),
        Command::Translate {
            checkpoint,
            input,
            output,
            direction,
            force,
        } => translate(&checkpoint, &input, &output, direction, force),
        Command::Evaluate {
            checkpoint,
            real,
            source,
            metric,
            out,
            direction,
            classifier,
            target,
            montage,
            set,
            force,
        } => evaluate(EvaluateArgs {
            checkpoint: &checkpoint,
            real: &real,
            source: &source,
            metric,
            out: &out,
            direction,
            classifier: classifier.as_deref(),
            target,
            montage: montage.as_deref(),
            set: &set,
            force,
        }),
        Command::MakeToyData {
            task,
            count,
            resolution,
            seed,
            out,
            force,
        } => make_toy_data(&task, count, resolution, seed, &out, force),
        Command::MakeToyTrunk {
            out,
            resolution,
            steps,
            seed,
        } => make_toy_trunk(&out, resolution, steps, seed),
        Command::TrainAttr {
            out,
            task,
            count,
            resolution,
            epochs,
            seed,
        } => train_attr(&out, &task, count, resolution, epochs, seed),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Arch { .. } | Error::Partition { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

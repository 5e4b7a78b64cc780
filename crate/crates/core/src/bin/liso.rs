//! Batch command-line surface: train, encode, decode, evaluate,
//! bench-optimizers, steganalyze.
//!
//! Exit codes are stable: 0 ok, 1 io/internal, 2 configuration, 3 training
//! divergence, 4 message over capacity, 5 payload/checkpoint mismatch,
//! 6 malformed message header.

use clap::{Args, Parser, Subcommand};
use liso_core::bitstream::{pack_message, sample_random_message, unpack_message, Payload};
use liso_core::error::Error;
use liso_core::imageio::{load_image, load_image_square, make_split, quantize, save_jpeg, save_png};
use liso_core::jpeg::JpegConfig;
use liso_core::metrics::{evaluate, psnr, ssim, write_bench_curves, EncodeMode, EvalConfig};
use liso_core::nets::{decode_bits, decoder_forward};
use liso_core::optim::{
    lbfgs_optimize, liso_encode, liso_refine_lbfgs, pgd_optimize, LbfgsConfig, OptimizeConfig,
    PgdConfig,
};
use liso_core::steganalysis::{detection_accuracy, train_detector};
use liso_core::train::{
    load_checkpoint, parse_config_file, save_checkpoint, set_key, FileConfig,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "liso", version, about = "Iterative optimization steganography toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder, decoder and critic on a directory of images.
    Train(TrainArgs),
    /// Hide a message file inside a cover image.
    Encode(EncodeArgs),
    /// Recover the message bytes from a stego image.
    Decode(DecodeArgs),
    /// Encode a validation set under several optimizers and report metrics.
    Evaluate(EvaluateArgs),
    /// Export error/objective-vs-iteration curves per optimizer.
    #[command(name = "bench-optimizers", alias = "bench")]
    BenchOptimizers(BenchArgs),
    /// Train or evaluate the steganalysis detector.
    Steganalyze(SteganalyzeArgs),
    /// Generate a deterministic synthetic image corpus for desk-scale runs.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images (config key `data_dir`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Extra overrides as `key=value` pairs.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bpp: Option<usize>,
    /// Checkpoint output path.
    #[arg(long, default_value = "liso.ckpt")]
    out: PathBuf,
    /// Training-log CSV (step, loss components).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cover: PathBuf,
    /// Message file; its raw bytes are embedded.
    #[arg(long)]
    message: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Assert the checkpoint payload matches this bits-per-pixel value.
    #[arg(long)]
    bpp: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    eta: f32,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Truncation bound on the perturbation (infinite when omitted).
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f32,
    /// Polish with this many L-BFGS steps after the learned encoder.
    #[arg(long, value_name = "STEPS")]
    refine_lbfgs: Option<usize>,
    /// Enable the JPEG layer and store the stego image as JPEG at this
    /// quality.
    #[arg(long)]
    jpeg_quality: Option<u8>,
    /// Detector checkpoint for the steganalysis defense term.
    #[arg(long, value_name = "DETECTOR.CKPT")]
    defend: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stego: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    val_dir: PathBuf,
    /// Comma-separated subset of liso,liso+lbfgs,pgd,lbfgs.
    #[arg(long, default_value = "liso,liso+lbfgs")]
    modes: String,
    /// Evaluate only the first N images.
    #[arg(long)]
    limit: Option<usize>,
    /// Resize images to a square side before encoding.
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 100)]
    lbfgs_steps: usize,
    #[arg(long)]
    jpeg_quality: Option<u8>,
    /// Report CSV path (stdout table is always printed).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the stego files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    val_dir: PathBuf,
    /// Comma-separated subset of liso,pgd,lbfgs,liso+lbfgs.
    #[arg(long, default_value = "liso,pgd,lbfgs")]
    optimizers: String,
    /// Iteration budget per optimizer.
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SteganalyzeArgs {
    /// Directory of cover images.
    #[arg(long)]
    covers: PathBuf,
    /// Directory of stego images.
    #[arg(long)]
    stegos: PathBuf,
    /// Train a detector and write it here; without this flag an existing
    /// detector (--detector) is evaluated instead.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::EmptyDataset => 2,
        Error::DivergenceDetected { .. } => 3,
        Error::CapacityExceeded { .. } => 4,
        Error::PayloadMismatch { .. } => 5,
        Error::MalformedHeader(_) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::BenchOptimizers(args) => cmd_bench(args),
        Command::Steganalyze(args) => cmd_steganalyze(args),
        Command::Synth(args) => {
            liso_core::synth::write_corpus(&args.out, args.count, args.side, args.seed)
                .map(|paths| println!("wrote {} images to {}", paths.len(), args.out.display()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => FileConfig::default(),
    };
    for pair in &args.sets {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")));
        };
        set_key(&mut cfg, k.trim(), v.trim())?;
    }
    if let Some(d) = args.data_dir {
        cfg.data_dir = Some(d);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = args.bpp {
        cfg.train.net.bpp = b;
    }
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("missing key `data_dir` (no dataset directory)".into()))?;
    if !data_dir.is_dir() {
        return Err(Error::Config(format!(
            "data_dir `{}` is not a directory",
            data_dir.display()
        )));
    }
    let (_val, train_list) = make_split(&data_dir, cfg.val_count, cfg.train_count)?;

    let out = args.out.clone();
    let started = Instant::now();
    let (params, log) = liso_core::train::train(&train_list, &cfg.train, None, &mut |epoch, p| {
        save_checkpoint(p, &out)?;
        eprintln!("epoch {epoch} done ({:.1}s)", started.elapsed().as_secs_f64());
        Ok(())
    })?;
    save_checkpoint(&params, &args.out)?;
    if let Some(log_path) = args.log {
        let mut w = std::io::BufWriter::new(std::fs::File::create(log_path)?);
        use std::io::Write;
        writeln!(w, "step,total,acc,qua,critic")?;
        for row in &log {
            writeln!(
                w,
                "{},{},{},{},{}",
                row.step, row.total, row.acc, row.qua, row.critic
            )?;
        }
    }
    println!("trained {} steps -> {}", log.len(), args.out.display());
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<(), Error> {
    let params = load_checkpoint(&args.checkpoint)?;
    if let Some(bpp) = args.bpp {
        if bpp != params.config.bpp {
            return Err(Error::PayloadMismatch {
                params: params.config.bpp,
                message: bpp,
            });
        }
    }
    let cover = load_image(&args.cover)?;
    let (h, w) = cover.dims();
    let payload = Payload::new(std::fs::read(&args.message)?);
    let message = pack_message(&payload, h, w, params.config.bpp)?;

    let jpeg = match args.jpeg_quality {
        Some(q) => JpegConfig {
            quality: q,
            enabled: true,
        },
        None => JpegConfig::default(),
    };
    let cfg = OptimizeConfig {
        eta: args.eta,
        max_iters: args.max_iters,
        patience: args.patience,
        tau: args.tau.unwrap_or(f32::INFINITY),
        lambda: args.lambda,
        jpeg,
        ..OptimizeConfig::default()
    };
    let detector = match &args.defend {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };

    let started = Instant::now();
    let (stego, trace) = match args.refine_lbfgs {
        Some(steps) => {
            liso_refine_lbfgs(&cover, &message, &params, &cfg, steps, detector.as_ref())?
        }
        None => {
            let (x, t, _) = liso_encode(&cover, &message, &params, &cfg, detector.as_ref())?;
            (x, t)
        }
    };
    let seconds = started.elapsed().as_secs_f64();

    match jpeg.active_quality() {
        Some(q) => save_jpeg(&stego, &args.out, q)?,
        None => save_png(&stego, &args.out)?,
    }
    let loaded = load_image(&args.out)?;
    let probs = decoder_forward(&params, &loaded)?;
    let bits = decode_bits(&probs);
    let err = liso_core::bitstream::error_rate(&bits, &message)?;
    let cover_q = quantize(&cover);
    println!(
        "{} {} {} {} {}",
        err,
        psnr(&cover_q, &loaded)?,
        ssim(&cover_q, &loaded)?,
        trace.iterations(),
        seconds
    );
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<(), Error> {
    let params = load_checkpoint(&args.checkpoint)?;
    let stego = load_image(&args.stego)?;
    let probs = decoder_forward(&params, &stego)?;
    let bits = decode_bits(&probs);
    let payload = unpack_message(&bits)?;
    std::fs::write(&args.out, payload.bytes())?;
    println!("decoded {} bytes", payload.len());
    Ok(())
}

fn listed_images(dir: &Path, limit: Option<usize>) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(n) = limit {
        files.truncate(n);
    }
    Ok(files)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    let params = load_checkpoint(&args.checkpoint)?;
    let modes: Vec<EncodeMode> = args
        .modes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(EncodeMode::parse)
        .collect::<Result<_, _>>()?;
    let files = listed_images(&args.val_dir, args.limit)?;
    let jpeg = match args.jpeg_quality {
        Some(q) => JpegConfig {
            quality: q,
            enabled: true,
        },
        None => JpegConfig::default(),
    };
    let cfg = EvalConfig {
        opt: OptimizeConfig {
            max_iters: args.max_iters,
            jpeg,
            ..OptimizeConfig::default()
        },
        lbfgs_steps: args.lbfgs_steps,
        seed: args.seed,
        resize: args.resize,
        out_dir: args.out_dir.clone(),
        ..EvalConfig::default()
    };
    let report = evaluate(&files, &params, &modes, &cfg)?;
    print!("{}", report.table());
    if let Some(path) = args.out {
        let file = std::fs::File::create(path)?;
        report.write_csv(std::io::BufWriter::new(file))?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let params = load_checkpoint(&args.checkpoint)?;
    let modes: Vec<EncodeMode> = args
        .optimizers
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(EncodeMode::parse)
        .collect::<Result<_, _>>()?;
    let files = listed_images(&args.val_dir, args.limit)?;

    let mut traces = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let cover = match args.resize {
            Some(side) => load_image_square(path, side)?,
            None => load_image(path)?,
        };
        let (h, w) = cover.dims();
        let message =
            sample_random_message(h, w, params.config.bpp, args.seed.wrapping_add(i as u64))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        for &mode in &modes {
            // Fixed-iteration runs produce full-length curves.
            let trace = match mode {
                EncodeMode::Liso => {
                    let cfg = OptimizeConfig {
                        max_iters: args.iters,
                        patience: args.iters.max(1),
                        stop_on_zero: false,
                        ..OptimizeConfig::default()
                    };
                    liso_encode(&cover, &message, &params, &cfg, None)?.1
                }
                EncodeMode::LisoLbfgs => {
                    let cfg = OptimizeConfig {
                        max_iters: args.iters,
                        stop_on_zero: true,
                        ..OptimizeConfig::default()
                    };
                    liso_refine_lbfgs(&cover, &message, &params, &cfg, args.iters, None)?.1
                }
                EncodeMode::Pgd => {
                    let cfg = PgdConfig {
                        steps: args.iters,
                        stop_on_zero: false,
                        ..PgdConfig::default()
                    };
                    pgd_optimize(&cover, &message, &params, &cfg)?.1
                }
                EncodeMode::Lbfgs => {
                    let cfg = LbfgsConfig {
                        max_steps: args.iters,
                        stop_on_zero: false,
                        ..LbfgsConfig::default()
                    };
                    lbfgs_optimize(&cover, &cover, &message, &params, &cfg)?.1
                }
            };
            traces.push((stem.clone(), mode, trace));
        }
    }
    write_bench_curves(&traces, &args.out_dir)?;
    println!(
        "wrote {} traces for {} optimizers to {}",
        traces.len(),
        modes.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_steganalyze(args: SteganalyzeArgs) -> Result<(), Error> {
    let load_dir = |dir: &Path| -> Result<Vec<_>, Error> {
        listed_images(dir, None)?
            .iter()
            .map(|p| match args.resize {
                Some(side) => load_image_square(p, side),
                None => load_image(p),
            })
            .collect()
    };
    let covers = load_dir(&args.covers)?;
    let stegos = load_dir(&args.stegos)?;

    let detector = match (&args.out, &args.detector) {
        (Some(out), _) => {
            let cfg = liso_core::nets::NetConfig::default();
            let det = train_detector(cfg, &covers, &stegos, args.epochs, args.seed)?;
            save_checkpoint(&det, out)?;
            det
        }
        (None, Some(path)) => load_checkpoint(path)?,
        (None, None) => {
            return Err(Error::Config(
                "pass --out to train a detector or --detector to evaluate one".into(),
            ))
        }
    };
    let acc = detection_accuracy(&detector, &covers, &stegos, args.threshold)?;
    println!("detection_accuracy_percent {acc}");
    Ok(())
}

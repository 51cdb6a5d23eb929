//! Command-line front end: mask rendering, synthetic corpus generation,
//! dataset inspection, training, enhancement, evaluation, parameter
//! auditing, BD-rate reporting, and gradient checking.
//!
//! Exit codes: 0 success, 1 usage, 2 input/validation failure, 3 internal.

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bdrrn::dataset::{build_eval_frames, build_patch_dataset, parse_manifest, EvalFrame};
use bdrrn::mask::{mean_mask, synth_degrade, MeanMask};
use bdrrn::metrics::{parse_rd_file, RdReport};
use bdrrn::model::checkpoint::load_checkpoint;
use bdrrn::model::{Fusion, Model, ModelConfig, Variant};
use bdrrn::partition::{parse_partition_file, random_quadtree, write_partitions, FramePartition};
use bdrrn::plane::{read_pgm, read_yuv420_y, write_pgm, write_yuv420_replacing_y, Plane8};
use bdrrn::train::{evaluate, train, TrainConfig};
use bdrrn::{Error, Result};

const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "bdrrn",
    version,
    about = "Block-information-constrained recursive residual network toolkit \
             for compressed-video quality enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Drrn,
    Bdrrn,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FusionArg {
    Add,
    Concat,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Fusion {
        match f {
            FusionArg::Add => Fusion::Add,
            FusionArg::Concat => Fusion::Concat,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the mean mask of a decoded frame as an 8-bit PGM.
    Mask {
        /// Decoded frame: PGM, or raw YUV420 when --yuv-dims is given.
        #[arg(long)]
        decoded: PathBuf,
        /// BPART partition file.
        #[arg(long)]
        partition: PathBuf,
        /// Output PGM path.
        #[arg(long)]
        out: PathBuf,
        /// Frame index into the YUV and partition streams.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// WxH of the raw YUV input, e.g. 352x288.
        #[arg(long)]
        yuv_dims: Option<String>,
    },
    /// Generate a degraded corpus: random quadtrees plus partition-aligned
    /// quantization of the luma plane. Chroma is copied through.
    Synth {
        /// Raw YUV420 source.
        #[arg(long)]
        original: PathBuf,
        /// WxH of the source, e.g. 352x288.
        #[arg(long)]
        dims: String,
        /// Number of frames to process.
        #[arg(long)]
        frames: usize,
        /// Quantization step (>= 1); larger means stronger blocking.
        #[arg(long)]
        qstep: u32,
        /// Probability of splitting a CU at each quadtree level.
        #[arg(long, default_value_t = 0.5)]
        split_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Degraded YUV420 output.
        #[arg(long)]
        out_decoded: PathBuf,
        /// BPART output with one partition per frame.
        #[arg(long)]
        out_partition: PathBuf,
    },
    /// Build the training patch set for one QP and print its statistics.
    Dataset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        qp: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on the manifest's clips at one QP.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Fusion for the bdrrn variant; rejected with --variant drrn.
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long)]
        qp: u32,
        #[arg(long, default_value_t = 150)]
        epochs: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path; CSV logs are written alongside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Recursion depths as main,extra,merge.
        #[arg(long, default_value = "9,3,2")]
        iters: String,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        /// Stop after this many optimizer steps regardless of epochs.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Evaluate on the manifest's whole frames every N epochs.
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Run whole-frame inference with a trained checkpoint.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input frame(s): PGM, or raw YUV420 when --dims is given.
        #[arg(long)]
        decoded: PathBuf,
        /// BPART partitions; required by bdrrn checkpoints.
        #[arg(long)]
        partition: Option<PathBuf>,
        /// Output path, same container as the input.
        #[arg(long)]
        out: PathBuf,
        /// WxH of the raw YUV input.
        #[arg(long)]
        dims: Option<String>,
    },
    /// Print the parameter count and per-layer table for a configuration.
    Params {
        #[arg(long, value_enum, default_value = "drrn")]
        variant: VariantArg,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Recursion depths as main,extra,merge.
        #[arg(long, default_value = "9,3,2")]
        iters: String,
    },
    /// Per-frame PSNR of decoded and enhanced frames against originals.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        qp: u32,
    },
    /// BD-rate table of one or more test methods against an anchor.
    Bdrate {
        /// Anchor RD file: lines `<sequence> <qp> <rate_kbps> <psnr_db>`.
        #[arg(long)]
        anchor: PathBuf,
        /// Test RD files, one per method.
        #[arg(long, required = true, num_args = 1..)]
        test: Vec<PathBuf>,
        /// Emit CSV instead of the aligned text table.
        #[arg(long)]
        csv: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        channels: usize,
        /// Input size as HxW.
        #[arg(long, default_value = "16x16")]
        size: String,
        #[arg(long, value_enum, default_value = "bdrrn")]
        variant: VariantArg,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Recursion depths as main,extra,merge.
        #[arg(long, default_value = "3,1,1")]
        iters: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Input and validation failures exit 2; failures inside the numerics
/// (which no flag combination should be able to trigger) exit 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingGrad(_) | Error::Training(_) => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mask {
            decoded,
            partition,
            out,
            frame,
            yuv_dims,
        } => cmd_mask(&decoded, &partition, &out, frame, yuv_dims.as_deref()),
        Command::Synth {
            original,
            dims,
            frames,
            qstep,
            split_prob,
            seed,
            out_decoded,
            out_partition,
        } => cmd_synth(&original, &dims, frames, qstep, split_prob, seed, &out_decoded, &out_partition),
        Command::Dataset { manifest, qp, seed } => cmd_dataset(&manifest, qp, seed),
        Command::Train {
            manifest,
            variant,
            fusion,
            qp,
            epochs,
            batch,
            seed,
            out,
            channels,
            iters,
            lr,
            max_steps,
            eval_every,
        } => {
            let cfg = model_config(variant, fusion, channels, &iters)?;
            let tc = TrainConfig {
                base_lr: lr,
                batch_size: batch,
                epochs,
                seed,
                eval_every,
                checkpoint_path: Some(out.clone()),
                max_steps,
            };
            cmd_train(&manifest, cfg, qp, tc, &out)
        }
        Command::Enhance {
            ckpt,
            decoded,
            partition,
            out,
            dims,
        } => cmd_enhance(&ckpt, &decoded, partition.as_deref(), &out, dims.as_deref()),
        Command::Params {
            variant,
            fusion,
            channels,
            iters,
        } => cmd_params(model_config(variant, fusion, channels, &iters)?),
        Command::Eval { ckpt, manifest, qp } => cmd_eval(&ckpt, &manifest, qp),
        Command::Bdrate { anchor, test, csv } => cmd_bdrate(&anchor, &test, csv),
        Command::Gradcheck {
            channels,
            size,
            variant,
            fusion,
            iters,
            seed,
        } => {
            let cfg = model_config(variant, fusion, channels, &iters)?;
            let (h, w) = parse_dims(&size)?;
            cmd_gradcheck(cfg, seed, h, w)
        }
    }
}

fn model_config(
    variant: VariantArg,
    fusion: Option<FusionArg>,
    channels: usize,
    iters: &str,
) -> Result<ModelConfig> {
    if variant == VariantArg::Drrn && fusion.is_some() {
        // Conditional flag compatibility is outside clap's reach; report it
        // in the usage style and exit 1 like any other bad invocation.
        eprintln!("error: --fusion applies only to --variant bdrrn");
        std::process::exit(1);
    }
    let (main_iters, extra_iters, merge_iters) = parse_iters(iters)?;
    let mut cfg = match variant {
        VariantArg::Drrn => ModelConfig::drrn(),
        VariantArg::Bdrrn => ModelConfig::bdrrn(fusion.map(Fusion::from).unwrap_or(Fusion::Add)),
    };
    cfg.channels = channels;
    cfg.main_iters = main_iters;
    cfg.extra_iters = extra_iters;
    cfg.merge_iters = merge_iters;
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("expected <A>x<B>, got `{s}`"));
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || b == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    Ok((a, b))
}

fn parse_iters(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || Error::InvalidArgument(format!("expected --iters main,extra,merge, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut vals = [0usize; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p.trim().parse().map_err(|_| bad())?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn is_yuv(path: &Path, dims: Option<&str>) -> bool {
    dims.is_some()
        || path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("yuv"))
}

/// Loads input frames: raw YUV420 when dims are given (or the extension says
/// so), a single PGM frame otherwise.
fn load_frames(path: &Path, dims: Option<&str>) -> Result<Vec<Plane8>> {
    if is_yuv(path, dims) {
        let dims = dims.ok_or_else(|| {
            Error::InvalidArgument("raw YUV input needs explicit WxH dimensions".into())
        })?;
        let (w, h) = parse_dims(dims)?;
        read_yuv420_y(path, w, h, None)
    } else {
        Ok(vec![read_pgm(path)?])
    }
}

fn partition_for_frame(partitions: &[FramePartition], frame: usize) -> Result<&FramePartition> {
    partitions.get(frame).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "partition file has {} frame(s), frame {frame} requested",
            partitions.len()
        ))
    })
}

fn cmd_mask(
    decoded: &Path,
    partition: &Path,
    out: &Path,
    frame: usize,
    yuv_dims: Option<&str>,
) -> Result<()> {
    let frames = load_frames(decoded, yuv_dims)?;
    let plane = frames.get(frame).ok_or_else(|| {
        Error::InvalidArgument(format!("input has {} frame(s), frame {frame} requested", frames.len()))
    })?;
    let partitions = parse_partition_file(partition)?;
    let part = partition_for_frame(&partitions, frame)?;
    let mask = mean_mask(plane, part)?;
    write_pgm(&mask.to_plane8(), out)?;
    println!("wrote {} ({}x{})", out.display(), mask.width, mask.height);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    original: &Path,
    dims: &str,
    frames: usize,
    qstep: u32,
    split_prob: f64,
    seed: u64,
    out_decoded: &Path,
    out_partition: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&split_prob) {
        return Err(Error::InvalidArgument("split-prob must be in [0, 1]".into()));
    }
    let (w, h) = parse_dims(dims)?;
    let planes = read_yuv420_y(original, w, h, Some(frames))?;
    if planes.len() < frames {
        return Err(Error::InvalidArgument(format!(
            "input provides {} frame(s), {frames} requested",
            planes.len()
        )));
    }
    let mut degraded = Vec::with_capacity(frames);
    let mut partitions = Vec::with_capacity(frames);
    for (i, plane) in planes.iter().take(frames).enumerate() {
        let part = random_quadtree(seed.wrapping_add(i as u64), w, h, split_prob);
        degraded.push(synth_degrade(plane, &part, qstep)?);
        partitions.push(part);
    }
    write_yuv420_replacing_y(original, out_decoded, &degraded)?;
    let file = std::fs::File::create(out_partition)
        .map_err(|e| Error::io(format!("creating {}", out_partition.display()), e))?;
    write_partitions(BufWriter::new(file), w, h, &partitions)?;
    println!(
        "wrote {} and {} ({} frame(s), qstep {qstep})",
        out_decoded.display(),
        out_partition.display(),
        frames
    );
    Ok(())
}

fn cmd_dataset(manifest: &Path, qp: u32, seed: u64) -> Result<()> {
    let entries = parse_manifest(manifest)?;
    let matching = entries.iter().filter(|e| e.qp == qp).count();
    let patches = build_patch_dataset(&entries, qp, seed)?;
    println!("entries at qp {qp}: {matching}");
    println!("patches: {}", patches.len());
    Ok(())
}

fn cmd_train(manifest: &Path, cfg: ModelConfig, qp: u32, tc: TrainConfig, out: &Path) -> Result<()> {
    let entries = parse_manifest(manifest)?;
    let patches = build_patch_dataset(&entries, qp, tc.seed)?;
    if patches.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest has no patches at qp {qp}"
        )));
    }
    let eval_frames = match tc.eval_every {
        Some(_) => Some(build_eval_frames(&entries, qp)?),
        None => None,
    };
    println!(
        "training {} (channels {}, iters {},{},{}) on {} patches",
        cfg.variant_name(),
        cfg.channels,
        cfg.main_iters,
        cfg.extra_iters,
        cfg.merge_iters,
        patches.len()
    );
    let mut model = Model::build(cfg, tc.seed)?;
    let log = train(&mut model, &patches, &tc, eval_frames.as_deref())?;
    let steps_path = out.with_extension("steps.csv");
    let evals_path = out.with_extension("evals.csv");
    std::fs::write(&steps_path, log.steps_csv())
        .map_err(|e| Error::io(format!("writing {}", steps_path.display()), e))?;
    std::fs::write(&evals_path, log.evals_csv())
        .map_err(|e| Error::io(format!("writing {}", evals_path.display()), e))?;
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        println!(
            "steps: {} loss: {:.6} -> {:.6}",
            log.steps.len(),
            first.loss,
            last.loss
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_enhance(
    ckpt: &Path,
    decoded: &Path,
    partition: Option<&Path>,
    out: &Path,
    dims: Option<&str>,
) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let needs_mask = model.config.variant == Variant::Bdrrn;
    if needs_mask && partition.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} checkpoint requires --partition",
            model.config.variant_name()
        )));
    }
    if !needs_mask && partition.is_some() {
        eprintln!("warning: drrn checkpoint takes no block information, ignoring --partition");
    }
    let frames = load_frames(decoded, dims)?;
    let partitions = match (needs_mask, partition) {
        (true, Some(p)) => parse_partition_file(p)?,
        _ => Vec::new(),
    };
    let mut enhanced = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        let mask = if needs_mask {
            mean_mask(frame, partition_for_frame(&partitions, i)?)?
        } else {
            MeanMask {
                width: frame.width,
                height: frame.height,
                values: vec![0.0; frame.width * frame.height],
            }
        };
        let ef = EvalFrame {
            decoded: frame.clone(),
            original: frame.clone(),
            mask,
        };
        enhanced.push(bdrrn::train::enhance_frame(&model, &ef)?);
    }
    if is_yuv(decoded, dims) {
        write_yuv420_replacing_y(decoded, out, &enhanced)?;
    } else {
        write_pgm(&enhanced[0], out)?;
    }
    println!("wrote {} ({} frame(s))", out.display(), enhanced.len());
    Ok(())
}

fn cmd_params(cfg: ModelConfig) -> Result<()> {
    let model = Model::build(cfg, 0)?;
    println!("variant: {}", cfg.variant_name());
    println!("{:<14} {:>14} {:>10}", "parameter", "shape", "count");
    for (name, p) in model.params.iter() {
        println!("{:<14} {:>14} {:>10}", name, format!("{}", p.value.shape()), p.value.len());
    }
    println!("total: {}", model.param_count());
    if cfg.variant == Variant::Bdrrn {
        let mut base = cfg;
        base.variant = Variant::Drrn;
        base.fusion = Fusion::Add;
        let drrn = Model::build(base, 0)?;
        let delta = model.param_count() as i64 - drrn.param_count() as i64;
        println!("Δ vs drrn: {delta}");
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, manifest: &Path, qp: u32) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let entries = parse_manifest(manifest)?;
    let frames = build_eval_frames(&entries, qp)?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest has no frames at qp {qp}"
        )));
    }
    let rows = evaluate(&model, &frames)?;
    println!("{:>5} {:>12} {:>12} {:>9}", "frame", "psnr_decoded", "psnr_enhanced", "delta_db");
    let mut sum = 0.0;
    for (i, r) in rows.iter().enumerate() {
        println!(
            "{:>5} {:>12.4} {:>12.4} {:>9.4}",
            i, r.psnr_decoded, r.psnr_enhanced, r.delta_db
        );
        sum += r.delta_db;
    }
    println!("mean delta: {:.4} dB over {} frame(s)", sum / rows.len() as f64, rows.len());
    Ok(())
}

fn method_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn read_rd(path: &Path) -> Result<Vec<(String, bdrrn::metrics::RdCurve)>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening RD file {}", path.display()), e))?;
    parse_rd_file(std::io::BufReader::new(file))
}

fn cmd_bdrate(anchor: &Path, tests: &[PathBuf], csv: bool) -> Result<()> {
    let anchor_name = method_name(anchor);
    let mut curves = vec![(anchor_name.clone(), read_rd(anchor)?)];
    for t in tests {
        let name = method_name(t);
        if curves.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate method name `{name}`; rename one input file"
            )));
        }
        curves.push((name, read_rd(t)?));
    }
    let report = RdReport::build(&anchor_name, &curves)?;
    if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_gradcheck(cfg: ModelConfig, seed: u64, h: usize, w: usize) -> Result<()> {
    let report = bdrrn::gradcheck::gradcheck(cfg, seed, h, w)?;
    println!(
        "max relative gradient error: {:.3e} (worst: {}, {} parameters, {} elements)",
        report.max_rel_error, report.worst_param, report.params_checked, report.elements_checked
    );
    if report.max_rel_error >= GRADCHECK_THRESHOLD {
        return Err(Error::InvalidArgument(format!(
            "gradient error {:.3e} exceeds {GRADCHECK_THRESHOLD:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

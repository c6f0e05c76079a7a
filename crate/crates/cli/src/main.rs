use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use facelock::codec::Message;
use facelock::conditioning::EncoderRegistry;
use facelock::manipulation::{ManipulationKind, ManipulationSpec};
use facelock::pipeline::{
    self, file_digest, load_checkpoint, save_checkpoint, Checkpoint, Dataset, EvaluationConfig, TrainConfig, CACHE_ENV,
};
use facelock::verification::{Protocol, ThresholdCalibration};

#[derive(Parser)]
#[command(name = "facelock", version, about = "Semi-fragile portrait watermarks keyed to facial attributes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    BlackBox,
    WhiteBox,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural face dataset in the layout `train --data` reads.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        identities: usize,
        #[arg(long, default_value_t = 6)]
        per_identity: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on `<data>/<identity>/*.png` and write a checkpoint.
    Train {
        /// TOML training config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where the step log and validation log go; defaults to the checkpoint's directory.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        /// Reuse finished runs with the same config and training set.
        #[arg(long, env = CACHE_ENV)]
        cache: Option<PathBuf>,
    },
    /// Print the default training config.
    DefaultConfig,
    /// Watermark one image.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Message as hex, e.g. `deadbeef` for 32 bits.
        #[arg(long)]
        message: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode the message from an image under its own condition map.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also print per-bit logits as JSON.
        #[arg(long)]
        logits: bool,
    },
    /// Compare the decoded message with the expected one.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        message: String,
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Fit a detection threshold and write a calibration record.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitName,
        /// Perturbation level for the black-box threshold.
        #[arg(long, default_value_t = 5)]
        level: u8,
        #[arg(long, default_value_t = 0.0)]
        safety: f64,
        /// Fakes for the white-box protocol, `kind[:strength]`.
        #[arg(long)]
        manipulation: Option<ManipulationSpec>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fidelity, robustness sweep and detection tables on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Black-box calibration record.
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// `kind[:strength]`, repeatable; defaults to every kind at strength 1.
        #[arg(long)]
        manipulation: Vec<ManipulationSpec>,
        /// Also calibrate a white-box threshold per manipulation on the validation split.
        #[arg(long)]
        white_box: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render tables and plots from an evaluation directory and a step log.
    Report {
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Steps averaged per point of the loss plot.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path, &EncoderRegistry::default()).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_message(hex: &str, bits: usize) -> Result<Message> {
    let m = Message::from_hex(hex).with_context(|| format!("message {hex:?}"))?;
    if m.len() != bits {
        bail!("message has {} bits, the checkpoint embeds {bits}", m.len());
    }
    Ok(m)
}

/// The split a checkpoint was trained with, recomputed from its seed.
fn select(ck: &Checkpoint, data: &Path, split: SplitName) -> Result<Dataset> {
    let all = Dataset::load_dir(data, ck.model.config.image_size)?;
    if let SplitName::All = split {
        return Ok(all);
    }
    let seed = ck.meta.train_config.as_ref().map_or(0, |c| c.seed);
    let s = all.split(seed)?;
    Ok(match split {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        _ => s.test,
    })
}

fn read_calibration(path: &Path) -> Result<ThresholdCalibration> {
    let text = fs::read_to_string(path).with_context(|| format!("reading calibration {}", path.display()))?;
    Ok(ThresholdCalibration::from_record(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ToyData {
            out,
            identities,
            per_identity,
            size,
            seed,
        } => {
            let d = Dataset::toy(identities, per_identity, size, seed);
            d.write_dir(&out)?;
            println!("wrote {} images of {} identities to {}", d.len(), identities, out.display());
        }
        Command::DefaultConfig => print!("{}", TrainConfig::default().to_toml()),
        Command::Train {
            config,
            data,
            out,
            log_dir,
            cache,
        } => {
            let config = match config {
                Some(p) => TrainConfig::load(&p).with_context(|| format!("config {}", p.display()))?,
                None => TrainConfig::default(),
            };
            let all = Dataset::load_dir(&data, config.model.image_size)?;
            let split = all.split(config.seed)?;
            println!(
                "identities: {} train, {} val, {} test",
                split.train.identities().len(),
                split.val.identities().len(),
                split.test.identities().len()
            );
            let reg = EncoderRegistry::default();
            let halt = out.with_extension("halted.flck");
            let run = pipeline::train_or_load(&config, &split.train, Some(&split.val), &reg, cache.as_deref(), Some(&halt))?;
            let adv = run.adversary.as_ref().map(|(c, e)| (c, e, &config.adversary));
            save_checkpoint(&out, &run.model, adv, &run.meta)?;
            let logs = log_dir.unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
            fs::create_dir_all(&logs)?;
            pipeline::write_trace_csv(&logs.join("train_log.csv"), &run.trace)?;
            pipeline::write_validation_csv(&logs.join("validation_log.csv"), &run.validation_log)?;
            fs::write(logs.join("train_loss.svg"), pipeline::trace_svg(&run.trace, 50))?;
            println!(
                "{} {} after {} steps (config {})",
                if run.from_cache { "reused" } else { "trained" },
                out.display(),
                run.meta.steps,
                &config.digest()[..16]
            );
        }
        Command::Embed {
            checkpoint,
            input,
            message,
            output,
        } => {
            let ck = load(&checkpoint)?;
            let m = parse_message(&message, ck.model.config.message_bits)?;
            let rec = pipeline::embed_file(&ck.model, &file_digest(&checkpoint)?, &input, &m, &output)?;
            let psnr = rec.psnr.map_or("inf".to_string(), |p| format!("{p:.2}"));
            println!("wrote {} (psnr {psnr} dB, ssim {:.4})", output.display(), rec.ssim);
        }
        Command::Extract {
            checkpoint,
            input,
            logits,
        } => {
            let ck = load(&checkpoint)?;
            let got = pipeline::extract_file(&ck.model, &input)?;
            println!("{}", got.message.to_hex());
            if logits {
                println!("{}", serde_json::to_string(&got.logits)?);
            }
        }
        Command::Verify {
            checkpoint,
            input,
            message,
            calibration,
        } => {
            let cal = read_calibration(&calibration)?;
            let ck = load(&checkpoint)?;
            let m = parse_message(&message, ck.model.config.message_bits)?;
            let r = pipeline::verify_file(&ck.model, &input, &m, &cal)?;
            println!(
                "{} ber {:.4} p_fake {:.4} tau {:.4} ({})",
                r.verdict, r.ber, r.p_fake, r.tau, cal.protocol
            );
        }
        Command::Calibrate {
            checkpoint,
            data,
            protocol,
            split,
            level,
            safety,
            manipulation,
            seed,
            out,
        } => {
            let ck = load(&checkpoint)?;
            let d = select(&ck, &data, split)?;
            let cal = match (protocol, manipulation) {
                (ProtocolArg::BlackBox, None) => pipeline::calibrate_black_box_on(&ck.model, &d, level, safety, seed)?,
                (ProtocolArg::BlackBox, Some(_)) => bail!("black_box calibration uses real samples only; drop --manipulation"),
                (ProtocolArg::WhiteBox, None) => bail!("white_box calibration needs fake samples; pass --manipulation"),
                (ProtocolArg::WhiteBox, Some(spec)) => {
                    let o = pipeline::calibrate_white_box_on(&ck.model, &d, &spec, seed)?;
                    if o.degenerate {
                        eprintln!("warning: real and manipulated BERs do not separate");
                    }
                    o.calibration
                }
            };
            fs::write(&out, cal.to_record())?;
            println!("{} tau {:.4} -> {}", cal.protocol, cal.tau, out.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            calibration,
            split,
            manipulation,
            white_box,
            seed,
            out,
        } => {
            let cal = read_calibration(&calibration)?;
            if cal.protocol != Protocol::BlackBox {
                bail!("evaluate expects a black_box calibration; white-box thresholds come from --white-box");
            }
            let ck = load(&checkpoint)?;
            let test = select(&ck, &data, split)?;
            let mut config = EvaluationConfig {
                seed,
                ..EvaluationConfig::default()
            };
            if !manipulation.is_empty() {
                config.manipulations = manipulation;
            }
            let mut wb: Vec<(ManipulationKind, ThresholdCalibration)> = Vec::new();
            if white_box {
                let val = select(&ck, &data, SplitName::Val)?;
                for spec in &config.manipulations {
                    let o = pipeline::calibrate_white_box_on(&ck.model, &val, spec, seed)?;
                    wb.push((spec.kind, o.calibration));
                }
            }
            let report = pipeline::evaluate(&ck.model, &test, &cal, &wb, &config)?;
            let files = pipeline::write_evaluation(&out, &report)?;
            print!("{}", pipeline::markdown_summary(&report));
            println!("\nwrote {} files to {}", files.len(), out.display());
        }
        Command::Report { eval, trace, window } => {
            if eval.is_none() && trace.is_none() {
                bail!("nothing to report; pass --eval and/or --trace");
            }
            if let Some(dir) = eval {
                let report = pipeline::read_evaluation(&dir)?;
                pipeline::write_evaluation(&dir, &report)?;
                print!("{}", pipeline::markdown_summary(&report));
            }
            if let Some(path) = trace {
                let t = pipeline::read_trace_csv(&path)?;
                let svg = path.with_extension("svg");
                fs::write(&svg, pipeline::trace_svg(&t, window))?;
                if let Some(last) = t.last() {
                    println!(
                        "step {} total {:.4} recon {:.4} ber {:.4}; plot {}",
                        last.step,
                        last.total,
                        last.recon,
                        last.ber,
                        svg.display()
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}

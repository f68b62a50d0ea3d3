//! Command-line front end for the transfer pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use drape::checkpoint::Checkpoint;
use drape::config::GuidanceConfig;
use drape::denoiser::{train_denoiser, DenoiserNet};
use drape::diffusion::NoiseSchedule;
use drape::error::{Error, Result};
use drape::features::{train_extractor, FeatureNet};
use drape::maskgen::{generate_masks, Mask};
use drape::metrics;
use drape::netpbm;
use drape::pipeline::transfer;
use drape::synth::{self, SynthClass};
use drape::Tensor;

#[derive(Parser)]
#[command(name = "drape", version, about = "Structure-preserving appearance transfer on images")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (images, masks, manifest).
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        n_per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train the label-conditional denoiser on a dataset directory.
    TrainDenoiser {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
    },
    /// Train the feature extractor (with classifier head) on a dataset.
    TrainExtractor {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 800)]
        steps: usize,
    },
    /// Generate foreground masks for a structure image.
    GenMask {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        checkpoint_denoiser: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Positive (foreground) label, by name or numeric id.
        #[arg(long, default_value = "bag")]
        labels_positive: String,
        /// Negative label triple "a,b,c"; repeat for several sets.
        #[arg(long)]
        labels_negative: Vec<String>,
        /// Override the automatic best-mask selection.
        #[arg(long)]
        select_index: Option<usize>,
    },
    /// Run the mask-guided appearance transfer.
    #[command(group(ArgGroup::new("mask_source").required(true).args(["mask", "auto_mask"])))]
    Transfer {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        /// Foreground mask as a binary PGM.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Generate the mask from the denoiser instead of loading one.
        #[arg(long, default_value_t = false)]
        auto_mask: bool,
        #[arg(long)]
        checkpoint_denoiser: PathBuf,
        #[arg(long)]
        checkpoint_extractor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bag")]
        labels_positive: String,
        #[arg(long)]
        labels_negative: Vec<String>,
        /// Dump every per-step latent under <out>/trace.
        #[arg(long, default_value_t = false)]
        dump_trace: bool,
    },
    /// Report metrics for a transfer output.
    Eval {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        appearance: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long)]
        checkpoint_extractor: Option<PathBuf>,
        /// Label for the classifier-loss metric (requires the extractor).
        #[arg(long)]
        label: Option<String>,
    },
}

fn parse_label(text: &str) -> Result<usize> {
    if let Ok(id) = text.parse::<usize>() {
        SynthClass::from_id(id)?;
        return Ok(id);
    }
    Ok(SynthClass::from_name(text)?.id())
}

fn parse_negative_sets(args: &[String], y_p: usize) -> Result<Vec<Vec<usize>>> {
    if args.is_empty() {
        return Ok(synth::default_negative_sets_for(y_p));
    }
    args.iter()
        .map(|spec| spec.split(',').map(|s| parse_label(s.trim())).collect())
        .collect()
}

fn load_config(path: &Option<PathBuf>, seed: u64) -> Result<GuidanceConfig> {
    let mut cfg = match path {
        Some(p) => GuidanceConfig::load(p)?,
        None => GuidanceConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = netpbm::read_image(path)?;
    if img.shape()[0] != 3 {
        return Err(Error::format(path.display().to_string(), "expected a color PPM (P6)"));
    }
    Ok(img)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenDataset { out, seed, n_per_class, size } => {
            let samples = synth::gen_dataset(n_per_class, seed, size)?;
            std::fs::create_dir_all(&out)?;
            synth::write_dataset(&out, &samples)?;
            println!("wrote {} samples under {}", samples.len(), out.display());
        }
        Cmd::TrainDenoiser { dataset, out, seed, config, steps, lr } => {
            let cfg = load_config(&config, seed)?;
            let samples = synth::load_dataset(&dataset)?;
            let pairs = synth::as_pairs(&samples);
            let sched = NoiseSchedule::default_for(cfg.t_total)?;
            let (net, meta) = train_denoiser(&pairs, synth::NUM_CLASSES, &sched, steps, lr, seed)?;
            net.to_checkpoint(meta.clone()).save(&out)?;
            println!(
                "trained denoiser for {} steps (final loss {:.6}) -> {}",
                meta.steps,
                meta.final_loss,
                out.display()
            );
        }
        Cmd::TrainExtractor { dataset, out, seed, steps } => {
            let samples = synth::load_dataset(&dataset)?;
            let pairs = synth::as_pairs(&samples);
            let (net, meta) = train_extractor(&pairs, synth::NUM_CLASSES, steps, seed)?;
            net.to_checkpoint(meta.clone()).save(&out)?;
            println!(
                "trained extractor for {} steps (final loss {:.6}) -> {}",
                meta.steps,
                meta.final_loss,
                out.display()
            );
        }
        Cmd::GenMask {
            structure,
            checkpoint_denoiser,
            out,
            seed,
            config,
            labels_positive,
            labels_negative,
            select_index,
        } => {
            let cfg = load_config(&config, seed)?;
            let x_s0 = load_rgb(&structure)?;
            let denoiser = DenoiserNet::from_checkpoint(&Checkpoint::load(&checkpoint_denoiser)?)?;
            let y_p = parse_label(&labels_positive)?;
            let sets = parse_negative_sets(&labels_negative, y_p)?;
            let sched = NoiseSchedule::default_for(cfg.t_total)?;
            let (masks, auto) = generate_masks(&x_s0, &denoiser, &sched, y_p, &sets, cfg.theta_mask, seed)?;
            let selected = match select_index {
                Some(i) if i < masks.len() => i,
                Some(i) => {
                    return Err(Error::InvalidArgument(format!(
                        "--select-index {i} out of range ({} masks)",
                        masks.len()
                    )))
                }
                None => auto,
            };
            std::fs::create_dir_all(&out)?;
            for (i, mask) in masks.iter().enumerate() {
                mask.save_pgm(&out.join(format!("mask_{i}.pgm")))?;
                mask.diff_map().save_tnsr(&out.join(format!("diff_{i}.tnsr")))?;
            }
            masks[selected].save_pgm(&out.join("selected.pgm"))?;
            std::fs::write(out.join("selected.txt"), format!("{selected}\n"))?;
            println!(
                "wrote {} masks under {} (selected {} with foreground fraction {:.3})",
                masks.len(),
                out.display(),
                selected,
                masks[selected].fraction()
            );
        }
        Cmd::Transfer {
            structure,
            appearance,
            mask,
            auto_mask,
            checkpoint_denoiser,
            checkpoint_extractor,
            out,
            seed,
            config,
            labels_positive,
            labels_negative,
            dump_trace,
        } => {
            let cfg = load_config(&config, seed)?;
            let x_s0 = load_rgb(&structure)?;
            let x_a0 = load_rgb(&appearance)?;
            let denoiser = DenoiserNet::from_checkpoint(&Checkpoint::load(&checkpoint_denoiser)?)?;
            let fext = FeatureNet::from_checkpoint(&Checkpoint::load(&checkpoint_extractor)?)?;
            let y_p = parse_label(&labels_positive)?;
            let sched = NoiseSchedule::default_for(cfg.t_total)?;

            let mask = if auto_mask {
                let sets = parse_negative_sets(&labels_negative, y_p)?;
                let (masks, sel) = generate_masks(&x_s0, &denoiser, &sched, y_p, &sets, cfg.theta_mask, seed)?;
                masks.into_iter().nth(sel).expect("selected mask")
            } else {
                let path = mask.expect("clap group guarantees a mask source");
                Mask::load_pgm(&path)?.with_labels(y_p, Vec::new())
            };

            let (image, trace) = transfer(&x_s0, &x_a0, &mask, &denoiser, &fext, &cfg, &sched)?;
            std::fs::create_dir_all(&out)?;
            netpbm::write_image(&out.join("out.ppm"), &image)?;
            mask.save_pgm(&out.join("mask.pgm"))?;
            if dump_trace {
                trace.dump(&out.join("trace"))?;
            }
            println!(
                "transfer done (mask skipped: {}) -> {}",
                trace.mask_skipped,
                out.join("out.ppm").display()
            );
        }
        Cmd::Eval { output, structure, appearance, mask, out, bins, checkpoint_extractor, label } => {
            let x_out = load_rgb(&output)?;
            let x_s0 = load_rgb(&structure)?;
            let x_a0 = load_rgb(&appearance)?;
            let mask = Mask::load_pgm(&mask)?;
            let mut report = String::new();
            let mut push = |name: &str, value: f64| report.push_str(&format!("{name} {value}\n"));
            push("cdh_output_appearance", metrics::cdh_distance(&x_out, &x_a0, bins)?);
            push("cdh_inside_output_appearance", metrics::cdh_distance_masked(&x_out, &x_a0, &mask, bins)?);
            push("cdh_inside_structure_appearance", metrics::cdh_distance_masked(&x_s0, &x_a0, &mask, bins)?);
            push("mean_abs_change_inside", metrics::mean_abs_diff_region(&x_out, &x_s0, &mask, true)?);
            push("mean_abs_change_outside", metrics::mean_abs_diff_region(&x_out, &x_s0, &mask, false)?);
            push("mask_fraction", mask.fraction());
            if let (Some(ckpt), Some(label)) = (checkpoint_extractor, label) {
                let fext = FeatureNet::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
                let y = parse_label(&label)?;
                push("classifier_loss", metrics::classifier_loss(&fext, &x_out, y)?);
            }
            std::fs::write(&out, &report)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use discseg::checkpoint::Checkpoint;
use discseg::config::RunConfig;
use discseg::io::{load_image, load_manifest, PatchGeometry};
use discseg::mask::mask_stats;
use discseg::pipeline::{compare_dirs, predict_image, predict_manifest, run_training, write_metrics_csv};
use discseg::sampler::{corner_patches, sample_disc_patches, tiling, SamplerConfig};
use discseg::synth::{synth_dataset, SynthConfig};
use discseg::unet::{geometry, input_extent, param_count, ModelConfig};
use discseg::{Error, Result};

#[derive(Parser)]
#[command(name = "discseg", version, about = "Optic-disc segmentation with disc-centered patch sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration file.
    Train {
        config: PathBuf,
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Predict masks for a manifest or a single image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Output patch size for a single image.
        #[arg(long, default_value_t = 388)]
        patch: usize,
        #[arg(long)]
        out: PathBuf,
        /// Skip largest-component selection and hole filling.
        #[arg(long)]
        raw: bool,
        /// Also write the disc probability map.
        #[arg(long)]
        probabilities: bool,
    },
    /// Score predicted masks against truth masks with the same file names.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw disc-centered and corner patches for every image of a manifest.
    SamplePatches {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 500)]
        min_positive: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic fundus-like dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Output patch size recorded in the manifest.
        #[arg(long, default_value_t = 100)]
        patch: usize,
        /// Network depth used to derive the input patch size.
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the parameter count and patch geometry of a model.
    Info {
        /// Run configuration to read the model from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        depth: Option<usize>,
        #[arg(long, conflicts_with = "config")]
        width: Option<usize>,
        /// Output patch size.
        #[arg(long, default_value_t = 388)]
        output: usize,
    },
}

fn open_out(out: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, fold } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run_training(&cfg, fold)?;
            let m = summary.mean;
            println!(
                "test images {}: precision {:.4} recall {:.4} f1 {:.4} overlap {:.4}",
                summary.scores.len(),
                m.precision,
                m.recall,
                m.f1,
                m.overlap
            );
            println!("outputs in {}", summary.output_dir.display());
        }
        Command::Predict { checkpoint, manifest, image, patch, out, raw, probabilities } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let written = match (manifest, image) {
                (Some(m), _) => predict_manifest(&ckpt, &load_manifest(&m)?, &out, !raw, probabilities)?,
                (None, Some(img)) => {
                    let id = img.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                    predict_image(&ckpt, &load_image(&img)?, &id, patch, patch, &out, !raw, probabilities)?
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Metrics { pred, truth, out } => {
            let scores = compare_dirs(&pred, &truth)?;
            let mut w = open_out(out.as_ref())?;
            let dest = out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
            write_metrics_csv(&mut w, &scores).and_then(|_| w.flush()).map_err(|e| Error::io(&dest, e))?;
        }
        Command::SamplePatches { manifest, seed, ratio, min_positive, out } => {
            let m = load_manifest(&manifest)?;
            let g = m.geometry;
            let cfg = SamplerConfig {
                ratio,
                min_positive,
                patch_w: g.output_w,
                patch_h: g.output_h,
                margin: g.margin(),
                include_corners: true,
                seed,
            };
            cfg.validate()?;
            let mut w = open_out(out.as_ref())?;
            let dest = out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
            let io_err = |e| Error::io(&dest, e);
            writeln!(w, "id,kind,x,y,w,h,positives").map_err(io_err)?;
            for (i, r) in m.records.iter().enumerate() {
                let Some(mask_path) = &r.mask else {
                    log::warn!("{}: no mask, skipped", r.id);
                    continue;
                };
                let mask = discseg::io::load_mask(&m.resolve(mask_path))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let population = tiling(mask.width(), mask.height(), cfg.patch_w, cfg.patch_h, cfg.margin).len();
                let mut patches = match sample_disc_patches(&mask, &cfg, population, &mut rng) {
                    Ok(d) => {
                        for msg in d.warnings {
                            log::warn!("{}: {msg}", r.id);
                        }
                        d.patches
                    }
                    Err(Error::Sampling(msg)) => {
                        log::warn!("{}: {msg} (positives {})", r.id, mask_stats(&mask).positive_count);
                        Vec::new()
                    }
                    Err(e) => return Err(e),
                };
                patches.extend(corner_patches(mask.width(), mask.height(), &cfg)?);
                for p in patches {
                    let kind = format!("{:?}", p.kind).to_lowercase();
                    let pos = mask.count_in(p.x, p.y, p.w, p.h);
                    writeln!(w, "{},{kind},{},{},{},{},{pos}", r.id, p.x, p.y, p.w, p.h).map_err(io_err)?;
                }
            }
            w.flush().map_err(io_err)?;
        }
        Command::Synth { out, count, size, patch, depth, seed } => {
            let input = input_extent(depth, patch).ok_or_else(|| {
                Error::Geometry(format!("output patch {patch} is not reachable at depth {depth}"))
            })?;
            let geo = PatchGeometry { output_w: patch, output_h: patch, input_w: input, input_h: input };
            let cfg = SynthConfig { count, width: size, height: size, max_disc_extent: patch, seed };
            let m = synth_dataset(&out, &cfg, geo)?;
            println!("{} images, manifest {}", m.records.len(), out.join("manifest.toml").display());
        }
        Command::Info { config, depth, width, output } => {
            let model = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => {
                    let d = ModelConfig::default();
                    ModelConfig { depth: depth.unwrap_or(d.depth), base_width: width.unwrap_or(d.base_width), ..d }
                }
            };
            model.validate()?;
            let g = geometry(&model, output, output)?;
            println!("depth {} base_width {}", model.depth, model.base_width);
            println!("param_count {}", param_count(&model));
            println!("output {}x{} input {}x{} margin {}", g.output_w, g.output_h, g.input_w, g.input_h, g.margin);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

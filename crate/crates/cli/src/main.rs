use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use portrait_field::dataio::{self, Dataset, SynthSceneConfig};
use portrait_field::eval::{self, Split, Variant};
use portrait_field::model::Model;
use portrait_field::trainer::{train, TrainConfig};
use portrait_field::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "pfield", version, about = "Train and evaluate audio-driven portrait radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic portrait dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Render one frame to an RGB PNG.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write report.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the deformation heatmap of one frame.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and its ablations under one budget and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoints, reports, and ablation.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
}

#[derive(Args)]
struct TrainOverrides {
    /// JSON training configuration; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_deform: bool,
    #[arg(long)]
    no_dynamic_sampling: bool,
    #[arg(long)]
    no_latent: bool,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Validation(format!("invalid config {}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.iters {
            config.iterations = v;
        }
        if let Some(v) = self.rays {
            config.rays = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if self.no_deform {
            config.model.deform = None;
        }
        if self.no_dynamic_sampling {
            config.dynamic_sampling = false;
        }
        if self.no_latent {
            config.model.latent = None;
        }
        config.validate().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(config)
    }
}

fn load_dataset(dir: &Path, audio_window: usize) -> Result<Dataset, Error> {
    Dataset::load(dir, audio_window)
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(Model, Dataset), Error> {
    let model = Model::load(ckpt)?;
    let dataset = load_dataset(data, model.config.audio.window)?;
    Ok((model, dataset))
}

fn check_frame(dataset: &Dataset, frame: usize) -> Result<(), Error> {
    if frame >= dataset.meta.frames {
        return Err(Error::Validation(format!(
            "frame {frame} outside the dataset's {} frames",
            dataset.meta.frames
        )));
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { out, frames, size, seed } => {
            let config = SynthSceneConfig {
                frames,
                size,
                seed,
                ..SynthSceneConfig::default()
            };
            config.validate().map_err(|e| Error::Validation(e.to_string()))?;
            let meta = dataio::generate_synthetic(&config, &out)?;
            println!(
                "wrote {} frames of {}x{} to {} ({} train / {} holdout)",
                meta.frames,
                meta.width,
                meta.height,
                out.display(),
                meta.train.len(),
                meta.holdout.len()
            );
        }
        Command::Train { data, out, overrides } => {
            let config = overrides.resolve()?;
            let dataset = load_dataset(&data, config.model.audio.window)?;
            let outcome = train(&dataset, config, &out)?;
            if let Some(last) = outcome.last {
                println!(
                    "iteration {}: loss {:.6} (photometric {:.6}, semantic {:.6})",
                    last.iteration, last.total, last.photometric, last.semantic
                );
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Render { ckpt, data, frame, out } => {
            let (model, dataset) = load_pair(&ckpt, &data)?;
            check_frame(&dataset, frame)?;
            let record = dataset.frame(frame)?;
            let config = eval::eval_render_config(&model, &dataset);
            let render = eval::render_frame(&model, &dataset, &record, &config, true)?;
            dataio::write_rgb(&out, render.width, render.height, &render.image)?;
            println!("psnr {:.3} dB", eval::psnr(&render.image, &record.image)?);
        }
        Command::Eval { ckpt, data, split, out } => {
            let (model, dataset) = load_pair(&ckpt, &data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Holdout => Split::Holdout,
            };
            let config = eval::eval_render_config(&model, &dataset);
            let report = eval::evaluate(&model, &dataset, split, &config)?;
            report.save(&out)?;
            let a = &report.aggregate;
            println!(
                "{}: psnr {:.3} dB, ssim {:.4}, semantic accuracy {:.4} over {} frames",
                report.split, a.psnr, a.ssim, a.sem_acc, a.frames
            );
        }
        Command::Heatmap { ckpt, data, frame, out } => {
            let (model, dataset) = load_pair(&ckpt, &data)?;
            check_frame(&dataset, frame)?;
            let config = eval::eval_render_config(&model, &dataset);
            let map = eval::heatmap(&model, &dataset, frame, &config)?;
            let sidecar = eval::export_heatmap(&map, &out)?;
            println!("heatmap scale {:.6}, mean {:.6}", sidecar.scale, sidecar.mean);
        }
        Command::Ablate { data, out, overrides } => {
            let config = overrides.resolve()?;
            let dataset = load_dataset(&data, config.model.audio.window)?;
            fs::create_dir_all(&out).map_err(|e| Error::Validation(format!("{}: {e}", out.display())))?;
            let report = eval::ablate(&dataset, &config, &Variant::ALL, &out)?;
            for v in &report.variants {
                println!(
                    "{:<20} holdout psnr {:.3} dB, ssim {:.4}, semantic accuracy {:.4}",
                    v.variant.name(),
                    v.holdout.psnr,
                    v.holdout.ssim,
                    v.holdout.sem_acc
                );
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Contract(_) | Error::Json { .. } | Error::Image { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
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

//! Command line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{RunConfig, SNAPSHOT_NAME};
use crate::data::{self, read_image};
use crate::error::{Error, Result};
use crate::eval::{export_latents, LatentKind, LatentRow};
use crate::gmm::{interpolate_codes, AttributeCode, DomainLabel};
use crate::nn::{attribute_point, ImageBatch};
use crate::pipeline::{
    self, batch_to_images, codes_tensor, grid, images_to_batch, repeat_item, select_inputs, CHECKPOINT_NAME,
};
use crate::training::{BatchSource, TrainState, Variant};

#[derive(Debug, Parser)]
#[command(name = "gmmunit", version, about = "Multi-domain, multi-modal image translation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration; defaults to `<out>/config.toml` when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read (default `<out>/checkpoint.ckpt`); for `train`,
    /// the checkpoint to resume from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model.
    Train {
        /// Total iterations; overrides the configured count.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Translate one image with attribute codes drawn from the prior.
    Translate {
        #[arg(long)]
        input: PathBuf,
        /// Target domain names; all domains when omitted.
        #[arg(long)]
        domain: Vec<String>,
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Sample grids for held-out images: one row per sample, one column per
    /// domain.
    SampleGrid {
        #[arg(long, default_value_t = 4)]
        inputs: usize,
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Strip of translations along a line between two attribute codes.
    Interpolate {
        #[arg(long)]
        input: PathBuf,
        /// Start domain (its component mean).
        #[arg(long, conflicts_with = "from_image")]
        from: Option<String>,
        /// End domain (its component mean).
        #[arg(long, conflicts_with = "to_image")]
        to: Option<String>,
        /// Start code taken from a reference image.
        #[arg(long)]
        from_image: Option<PathBuf>,
        /// End code taken from a reference image.
        #[arg(long)]
        to_image: Option<PathBuf>,
        /// Number of frames.
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        t_min: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        t_max: f64,
    },
    /// Translate with the attribute code of a reference image.
    StyleTransfer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Score a trained model on the held-out split.
    Eval,
    /// Write sampled and extracted attribute codes to CSV.
    ExportLatents {
        /// Sampled codes per domain.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Argument(e.to_string()))?;
    execute(cli)
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let path = match (&g.config, &g.out) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(out)) if out.join(SNAPSHOT_NAME).exists() => Some(out.join(SNAPSHOT_NAME)),
        _ => None,
    };
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn load_state(g: &Global, cfg: &RunConfig) -> Result<TrainState> {
    let path = g.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_NAME));
    checkpoint::load(&path)
}

fn model_image(state: &TrainState, path: &Path) -> Result<ImageBatch<f32>> {
    let c = state.model.config();
    images_to_batch(&[read_image(path, c.height, c.width)?])
}

fn find_label<'a>(state: &'a TrainState, name: &str) -> Result<&'a DomainLabel> {
    state.gmm.label_by_name(name).ok_or_else(|| {
        let known: Vec<&str> = state.gmm.components().iter().map(|c| c.label.name.as_str()).collect();
        Error::Label(format!("unknown domain {name:?}; known: {}", known.join(", ")))
    })
}

fn save(dir: &Path, name: &str, img: &RgbImage) -> Result<PathBuf> {
    let path = dir.join(name);
    data::write_png(&path, img)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

/// `rows = samples`, `cols = targets`; codes drawn column by column.
fn sampled_grid(state: &TrainState, x: &ImageBatch<f32>, targets: &[usize], samples: usize, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    let mut columns = Vec::new();
    for &k in targets {
        let codes = (0..samples)
            .map(|_| state.gmm.sample_component(k, rng))
            .collect::<Result<Vec<_>>>()?;
        let y = state.model.translate(&repeat_item(x, 0, samples), &codes_tensor(&codes))?;
        columns.push(batch_to_images(&y));
    }
    let rows: Vec<Vec<RgbImage>> = (0..samples).map(|r| columns.iter().map(|c| c[r].clone()).collect()).collect();
    grid(&rows)
}

fn code_of_image(state: &TrainState, path: &Path, rng: &mut ChaCha8Rng) -> Result<AttributeCode> {
    let post = state.model.encode_attributes(&model_image(state, path)?)?;
    let z = attribute_point(&post, state.settings.point_mode, rng);
    Ok(AttributeCode(z.data().iter().map(|&v| v as f64).collect()))
}

fn endpoint(state: &TrainState, name: &Option<String>, image: &Option<PathBuf>, rng: &mut ChaCha8Rng, which: &str) -> Result<AttributeCode> {
    match (name, image) {
        (Some(n), None) => Ok(AttributeCode(state.gmm.domain_component(find_label(state, n)?)?.mean.clone())),
        (None, Some(p)) => code_of_image(state, p, rng),
        _ => Err(Error::Argument(format!("give exactly one of --{which} or --{which}-image"))),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = resolve_config(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cli.command {
        Command::Train { steps, variant } => {
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let state = pipeline::train_run(&cfg, g.checkpoint.as_deref())?;
            log::info!("trained to iteration {}", state.iteration);
        }
        Command::Translate { input, domain, samples } => {
            cfg.validate()?;
            if samples == 0 {
                return Err(Error::Argument("--samples must be >= 1".into()));
            }
            let state = load_state(g, &cfg)?;
            let x = model_image(&state, &input)?;
            let targets = if domain.is_empty() {
                (0..state.gmm.num_components()).collect()
            } else {
                domain
                    .iter()
                    .map(|d| state.gmm.component_index(find_label(&state, d)?))
                    .collect::<Result<Vec<_>>>()?
            };
            let img = sampled_grid(&state, &x, &targets, samples, &mut rng)?;
            save(&cfg.out, "translate.png", &img)?;
        }
        Command::SampleGrid { inputs, samples } => {
            cfg.validate()?;
            if samples == 0 || inputs == 0 {
                return Err(Error::Argument("--inputs and --samples must be >= 1".into()));
            }
            let state = load_state(g, &cfg)?;
            let data = cfg.load_dataset()?;
            let test = if data.test.is_empty() { &data.train } else { &data.test };
            let dir = cfg.out.join("sample_grid");
            let targets: Vec<usize> = (0..state.gmm.num_components()).collect();
            for (i, idx) in select_inputs(test, inputs, cfg.seed).into_iter().enumerate() {
                let (x, _) = test.batch(&[idx])?;
                save(&dir, &format!("input_{i:03}_source.png"), &batch_to_images(&x)[0])?;
                let img = sampled_grid(&state, &x, &targets, samples, &mut rng)?;
                save(&dir, &format!("input_{i:03}.png"), &img)?;
            }
        }
        Command::Interpolate {
            input,
            from,
            to,
            from_image,
            to_image,
            steps,
            t_min,
            t_max,
        } => {
            cfg.validate()?;
            if steps < 2 {
                return Err(Error::Argument("--steps must be >= 2".into()));
            }
            let state = load_state(g, &cfg)?;
            let x = model_image(&state, &input)?;
            let za = endpoint(&state, &from, &from_image, &mut rng, "from")?;
            let zb = endpoint(&state, &to, &to_image, &mut rng, "to")?;
            let mut codes = Vec::new();
            let mut csv = String::from("frame,t,extrapolated\n");
            for j in 0..steps {
                let t = t_min + (t_max - t_min) * j as f64 / (steps - 1) as f64;
                let r = interpolate_codes(&za, &zb, t)?;
                csv.push_str(&format!("{j},{t},{}\n", r.extrapolated));
                codes.push(r.code);
            }
            let y = state.model.translate(&repeat_item(&x, 0, steps), &codes_tensor(&codes))?;
            save(&cfg.out, "interpolate.png", &grid(&[batch_to_images(&y)])?)?;
            let p = cfg.out.join("interpolate.csv");
            fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        }
        Command::StyleTransfer { input, reference } => {
            cfg.validate()?;
            let state = load_state(g, &cfg)?;
            let x = model_image(&state, &input)?;
            let z = code_of_image(&state, &reference, &mut rng)?;
            let y = state.model.translate(&x, &codes_tensor(&[z]))?;
            save(&cfg.out, "style_transfer.png", &batch_to_images(&y)[0])?;
        }
        Command::Eval => {
            let state = load_state(g, &cfg)?;
            let report = pipeline::evaluate(&cfg, &state, &cfg.out)?;
            print!("{}", report.summary());
        }
        Command::ExportLatents { samples } => {
            cfg.validate()?;
            let state = load_state(g, &cfg)?;
            let data = cfg.load_dataset()?;
            let test = if data.test.is_empty() { &data.train } else { &data.test };
            let mut rows = Vec::new();
            for (k, c) in state.gmm.components().iter().enumerate() {
                for _ in 0..samples {
                    rows.push(LatentRow {
                        label: c.label.name.clone(),
                        kind: LatentKind::Sampled,
                        code: state.gmm.sample_component(k, &mut rng)?,
                    });
                }
            }
            let all: Vec<usize> = (0..test.len()).collect();
            for chunk in all.chunks(64) {
                let (x, labels) = test.batch(chunk)?;
                let post = state.model.encode_attributes(&x)?;
                let z = attribute_point(&post, state.settings.point_mode, &mut rng);
                let d = z.shape()[1];
                for (row, label) in z.data().chunks_exact(d).zip(labels) {
                    rows.push(LatentRow {
                        label: label.name,
                        kind: LatentKind::Extracted,
                        code: AttributeCode(row.iter().map(|&v| v as f64).collect()),
                    });
                }
            }
            fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
            let path = cfg.out.join("latents.csv");
            export_latents(&rows, &path)?;
            log::info!("wrote {} codes to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

/// Process exit status for an error class.
pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        "config" => 3,
        "data" => 4,
        "checkpoint" => 5,
        "numeric" => 6,
        _ => 2,
    }
}

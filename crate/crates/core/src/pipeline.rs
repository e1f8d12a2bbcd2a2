//! Run-level operations shared by the command line and the test suites:
//! training with logs and checkpoints, the probe lifecycle, and evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gmmunit_autodiff::Tensor;
use image::{GenericImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, chw_to_rgb, rgb_to_chw, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    self, background_diversity, background_from_mask, pairwise_mean, Classifier, Embedder, Probe, ProbeTraining,
    Summary,
};
use crate::gmm::{interpolate_codes, AttributeCode, AttributeGmm, GmmMode};
use crate::nn::{attribute_point, ImageBatch, PointMode};
use crate::objectives::{FeatureExtractor, LossReport};
use crate::training::{train_until, BatchSource, TrainState};

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const LOSSES_NAME: &str = "losses.csv";
pub const PROBE_NAME: &str = "probe.json";
pub const REPORT_NAME: &str = "report.json";
pub const SAMPLES_DIR: &str = "samples";

/// Random stream used by evaluation, disjoint from training streams.
const EVAL_STREAM: u64 = u64::MAX - 1;

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(CHECKPOINT_NAME)
}

// ---- image helpers ----------------------------------------------------------

pub fn batch_to_images(x: &ImageBatch<f32>) -> Vec<RgbImage> {
    let (n, c, h, w) = x.values().dims4();
    let per = c * h * w;
    (0..n)
        .map(|i| chw_to_rgb(&x.values().data()[i * per..(i + 1) * per], h, w))
        .collect()
}

pub fn images_to_batch(images: &[RgbImage]) -> Result<ImageBatch<f32>> {
    let first = images.first().ok_or_else(|| Error::Argument("no images".into()))?;
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(Error::Shape("images differ in size".into()));
    }
    let data: Vec<f32> = images.iter().flat_map(rgb_to_chw).collect();
    ImageBatch::new(Tensor::from_vec(&[images.len(), 3, h as usize, w as usize], data))
}

/// Rounds every value to the nearest 8-bit level, as writing a PNG would.
pub fn quantize(x: &ImageBatch<f32>) -> ImageBatch<f32> {
    let t = x.values().map(|v| data::normalize(data::denormalize(v)));
    ImageBatch::new(t).expect("quantized values stay in range")
}

/// Tiles `cells[row][col]`; all cells share one size.
pub fn grid(cells: &[Vec<RgbImage>]) -> Result<RgbImage> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Argument("empty grid".into()))?;
    let (w, h) = first.dimensions();
    let cols = cells[0].len();
    if cells.iter().any(|r| r.len() != cols) {
        return Err(Error::Argument("grid rows differ in length".into()));
    }
    let mut out = RgbImage::new(w * cols as u32, h * cells.len() as u32);
    for (r, row) in cells.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            out.copy_from(img, w * c as u32, h * r as u32)
                .map_err(|e| Error::Shape(format!("grid cell: {e}")))?;
        }
    }
    Ok(out)
}

/// Splits a grid back into `cells[row][col]` of size `h x w`.
pub fn split_grid(img: &RgbImage, h: u32, w: u32) -> Result<Vec<Vec<RgbImage>>> {
    let (gw, gh) = img.dimensions();
    if gw % w != 0 || gh % h != 0 {
        return Err(Error::Shape(format!("{gw}x{gh} grid is not made of {w}x{h} cells")));
    }
    Ok((0..gh / h)
        .map(|r| {
            (0..gw / w)
                .map(|c| image::imageops::crop_imm(img, c * w, r * h, w, h).to_image())
                .collect()
        })
        .collect())
}

pub fn codes_tensor(codes: &[AttributeCode]) -> Tensor<f32> {
    let d = codes.first().map(|c| c.len()).unwrap_or(0);
    Tensor::from_vec(
        &[codes.len(), d],
        codes.iter().flat_map(|c| c.0.iter().map(|&v| v as f32)).collect(),
    )
}

/// `n` copies of item `i`.
pub fn repeat_item(x: &ImageBatch<f32>, i: usize, n: usize) -> ImageBatch<f32> {
    let (_, c, h, w) = x.values().dims4();
    let per = c * h * w;
    let item = &x.values().data()[i * per..(i + 1) * per];
    let data = item.iter().copied().cycle().take(n * per).collect();
    ImageBatch::new(Tensor::from_vec(&[n, c, h, w], data)).expect("copies of a valid item")
}

/// Up to `n` items of `data`, chosen by a seeded shuffle.
pub fn select_inputs(data: &Dataset, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx
}

// ---- training ---------------------------------------------------------------

/// Loads the run's probe, or trains and calibrates one and saves it.
pub fn ensure_probe(cfg: &RunConfig, train: &Dataset, test: &Dataset, n_classes: usize) -> Result<Probe> {
    let path = cfg.out.join(PROBE_NAME);
    if path.exists() {
        let probe = Probe::load(&path)?;
        if probe.n_classes == n_classes && (probe.height, probe.width) == (cfg.image_size, cfg.image_size) {
            return Ok(probe);
        }
        log::warn!("{} does not fit this dataset; retraining", path.display());
    }
    let mut probe = Probe::new(n_classes, cfg.image_size, cfg.image_size, cfg.seed)?;
    let opts = ProbeTraining {
        steps: cfg.probe_steps,
        batch_size: cfg.probe_batch,
        lr: cfg.probe_lr,
        seed: cfg.seed,
    };
    probe.train(train, &opts)?;
    let held_out = if test.is_empty() { train } else { test };
    let acc = probe.calibrate(held_out)?;
    log::info!("probe accuracy on real images: {acc:.4}");
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    probe.save(&path)?;
    Ok(probe)
}

fn keep_log_prefix(path: &Path, until: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<u64>().ok()).is_some_and(|i| i < until))
        .map(str::to_string)
        .collect())
}

/// Trains to `cfg.steps`, starting from `resume` when given. Writes the
/// config snapshot, the per-iteration loss log and periodic checkpoints to
/// `cfg.out`.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    cfg.snapshot()?;
    let data = cfg.load_dataset()?;
    let prior = AttributeGmm::new(cfg.gmm_spec(&data.names))?;
    let net = cfg.net_config(prior.code_dim(), prior.label_width());
    let mut state = match resume {
        Some(path) => {
            let s = checkpoint::load(path)?;
            if s.settings != cfg.train_settings() {
                return Err(Error::config(format!(
                    "{} was trained with different settings than this configuration",
                    path.display()
                )));
            }
            s
        }
        None => TrainState::new(cfg.train_settings(), net, prior.spec().clone())?,
    };
    let probe = if cfg.lambda_perc != 0.0 {
        Some(ensure_probe(cfg, &data.train, &data.test, data.names.len())?)
    } else {
        None
    };
    let extractor = probe.as_ref().map(|p| p as &dyn FeatureExtractor<f32>);

    let log_path = cfg.out.join(LOSSES_NAME);
    let kept = keep_log_prefix(&log_path, state.iteration)?;
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{}", LossReport::csv_header()).map_err(io)?;
    for line in kept {
        writeln!(log, "{line}").map_err(io)?;
    }
    let ckpt = checkpoint_path(cfg);
    let started = std::time::Instant::now();
    let first = state.iteration;
    train_until(&mut state, &data.train, cfg.steps, extractor, |s, rec| {
        writeln!(log, "{}", rec.report.csv_row()).map_err(io)?;
        if s.iteration % cfg.log_every == 0 {
            let per = started.elapsed().as_secs_f64() / (s.iteration - first) as f64;
            log::info!(
                "iter {} L_D {:.4} L_G {:.4} ({per:.2} s/iter)",
                s.iteration,
                rec.report.l_d,
                rec.report.l_g
            );
        }
        if s.iteration % cfg.checkpoint_every == 0 {
            log.flush().map_err(io)?;
            checkpoint::save(s, &ckpt)?;
        }
        Ok(())
    })?;
    log.flush().map_err(io)?;
    checkpoint::save(&state, &ckpt)?;
    Ok(state)
}

// ---- evaluation -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub translations: usize,
    pub domain_accuracy: f64,
    pub diversity: Summary,
    /// `None` when the test split has fewer than two real target images.
    pub frechet: Option<f64>,
    pub background_diversity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub extractor: String,
    pub probe_accuracy: f64,
    pub seed: u64,
    pub variant: String,
    pub iteration: u64,
    pub inputs: usize,
    pub samples_per_input: usize,
    pub targets: Vec<TargetMetrics>,
    /// Over all translations of all targets.
    pub domain_accuracy: f64,
    /// Over every (target, input) pair.
    pub diversity: Summary,
    pub recon_mae: f64,
    /// Fraction of inputs whose interpolation strip changes predicted
    /// domain at most once.
    pub interp_monotone: f64,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from(
            "target,translations,domain_accuracy,diversity_mean,diversity_std,frechet,background_diversity\n",
        );
        for t in &self.targets {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.target,
                t.translations,
                t.domain_accuracy,
                t.diversity.mean,
                t.diversity.std,
                opt(t.frechet),
                opt(t.background_diversity)
            ));
        }
        out.push_str(&format!(
            "all,{},{},{},{},,\n",
            self.targets.iter().map(|t| t.translations).sum::<usize>(),
            self.domain_accuracy,
            self.diversity.mean,
            self.diversity.std
        ));
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "extractor {} (real-image accuracy {:.4}), variant {}, iteration {}, seed {}\n\
             {} inputs x {} samples per target\n\
             domain accuracy {:.4}\n\
             diversity {:.6} +- {:.6}\n\
             self-reconstruction MAE {:.4}\n\
             monotone interpolation strips {:.4}\n",
            self.extractor,
            self.probe_accuracy,
            self.variant,
            self.iteration,
            self.seed,
            self.inputs,
            self.samples_per_input,
            self.domain_accuracy,
            self.diversity.mean,
            self.diversity.std,
            self.recon_mae,
            self.interp_monotone
        );
        for t in &self.targets {
            s.push_str(&format!(
                "  {}: accuracy {:.4}, diversity {:.6}, frechet {}\n",
                t.target,
                t.domain_accuracy,
                t.diversity.mean,
                t.frechet.map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into())
            ));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad report {}: {e}", path.display())))
    }
}

/// Number of class changes along a sequence.
pub fn class_changes(classes: &[usize]) -> usize {
    classes.windows(2).filter(|w| w[0] != w[1]).count()
}

fn sample_path(out: &Path, target: &str, input: usize) -> PathBuf {
    out.join(SAMPLES_DIR).join(target).join(format!("input_{input:05}.png"))
}

/// Evaluates `state` on the test split and writes `report.{json,csv,txt}`
/// plus one sample strip (one sample per row) per (target, input) under
/// `<out>/samples/<target>/`.
///
/// Scores are computed on the 8-bit images that are written, so they can be
/// recomputed from the files alone.
pub fn evaluate(cfg: &RunConfig, state: &TrainState, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let gmm = &state.gmm;
    if gmm.spec().mode != GmmMode::Categorical {
        return Err(Error::config("evaluation needs categorical (folder) domains"));
    }
    let k = gmm.num_components();
    let probe = ensure_probe(cfg, &data.train, &data.test, k)?;
    let probe_accuracy = probe
        .accuracy
        .ok_or_else(|| Error::Data("probe has no recorded accuracy".into()))?;
    let test = if data.test.is_empty() { &data.train } else { &data.test };
    let chosen = select_inputs(test, cfg.eval_inputs, cfg.seed);
    let (x, labels) = test.batch(&chosen)?;
    let model = &state.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM);
    let s = cfg.eval_samples;

    let mut targets = Vec::new();
    let mut all_scores = Vec::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    for target in 0..k {
        let name = gmm.components()[target].label.name.clone();
        let mut scores = Vec::new();
        let mut translated = Vec::new();
        let mut t_hits = 0usize;
        let mut backgrounds = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            if label.hot_index() == Some(target) {
                continue;
            }
            let codes = (0..s)
                .map(|_| gmm.sample_component(target, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let z = codes_tensor(&codes);
            let src = repeat_item(&x, i, s);
            let y = quantize(&model.translate(&src, &z)?);
            let images = batch_to_images(&y);
            let path = sample_path(out, &name, i);
            data::write_png(&path, &grid(&images.iter().map(|im| vec![im.clone()]).collect::<Vec<_>>())?)?;
            scores.push(pairwise_mean(&probe.embed(&y)?)?);
            t_hits += probe.classify(&y)?.iter().filter(|&&c| c == target).count();
            if model.config().attention && model.config().disentangled {
                let content = model.encode_content(&src)?;
                let (_, mask) = model.generate(&content, &z)?;
                if let Some(mask) = mask {
                    let first = mask.slice_rows(0, 1);
                    let region = background_from_mask(&first)?;
                    if region.data().iter().any(|&r| r > 0.0) {
                        let input = repeat_item(&x, i, 1);
                        backgrounds.push(background_diversity(&input, &y, &region, &probe)?);
                    }
                }
            }
            translated.push(y);
        }
        if translated.is_empty() {
            continue;
        }
        let n_t: usize = translated.iter().map(|b| b.len()).sum();
        let reals: Vec<usize> = (0..test.len()).filter(|&j| test.labels[j].hot_index() == Some(target)).collect();
        let frechet = if reals.len() >= 2 && n_t >= 2 {
            let (real, _) = test.batch(&reals)?;
            let a = eval::probe_feature_set(&probe, &[real])?;
            let b = eval::probe_feature_set(&probe, &translated)?;
            Some(eval::frechet_distance(&a, &b)?)
        } else {
            None
        };
        hits += t_hits;
        total += n_t;
        all_scores.extend(&scores);
        targets.push(TargetMetrics {
            target: name,
            translations: n_t,
            domain_accuracy: t_hits as f64 / n_t as f64,
            diversity: Summary::of(&scores)?,
            frechet,
            background_diversity: (!backgrounds.is_empty())
                .then(|| backgrounds.iter().sum::<f64>() / backgrounds.len() as f64),
        });
    }
    if total == 0 {
        return Err(Error::Data("no evaluation input differs from every target domain".into()));
    }

    let post = model.encode_attributes(&x)?;
    let z_self = attribute_point(&post, PointMode::Mean, &mut rng);
    let rec = model.translate(&x, &z_self)?;
    let recon_mae = rec
        .values()
        .data()
        .iter()
        .zip(x.values().data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / x.values().len() as f64;

    let frames = cfg.interp_frames;
    let mut monotone = 0usize;
    for i in 0..x.len() {
        let (a, b) = (i % k, (i + 1) % k);
        let za = AttributeCode(gmm.components()[a].mean.clone());
        let zb = AttributeCode(gmm.components()[b].mean.clone());
        let codes = (0..frames)
            .map(|j| interpolate_codes(&za, &zb, j as f64 / (frames - 1) as f64).map(|r| r.code))
            .collect::<Result<Vec<_>>>()?;
        let y = quantize(&model.translate(&repeat_item(&x, i, frames), &codes_tensor(&codes))?);
        if class_changes(&probe.classify(&y)?) <= 1 {
            monotone += 1;
        }
    }

    let report = EvalReport {
        extractor: eval::Embedder::id(&probe).to_string(),
        probe_accuracy,
        seed: cfg.seed,
        variant: state.settings.variant.to_string(),
        iteration: state.iteration,
        inputs: x.len(),
        samples_per_input: s,
        targets,
        domain_accuracy: hits as f64 / total as f64,
        diversity: Summary::of(&all_scores)?,
        recon_mae,
        interp_monotone: monotone as f64 / x.len() as f64,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(REPORT_NAME, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write("report.csv", report.csv())?;
    write("report.txt", report.summary())?;
    Ok(report)
}

/// Recomputes the overall diversity of a report from its sample strips.
pub fn diversity_from_samples(out: &Path, probe: &Probe, report: &EvalReport) -> Result<Summary> {
    let mut scores = Vec::new();
    for t in &report.targets {
        let dir = out.join(SAMPLES_DIR).join(&t.target);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(&dir, e)))
            .collect::<Result<_>>()?;
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let cells = split_grid(&img, probe.height as u32, probe.width as u32)?;
            let samples: Vec<RgbImage> = cells.into_iter().flatten().collect();
            scores.push(pairwise_mean(&probe.embed(&images_to_batch(&samples)?)?)?);
        }
    }
    Summary::of(&scores)
}

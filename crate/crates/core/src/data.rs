//! Image datasets with per-image domain labels, and a procedural toy set.
//!
//! Two layouts are read:
//!
//! * folders: `root/<domain>/*.{png,jpg,jpeg}`, one categorical domain per
//!   sub-directory (sorted by name);
//! * manifest: a CSV with header `path,<attr>,<attr>,...` and one 0/1 bit per
//!   attribute column; paths are relative to `root`.

use std::fs;
use std::path::{Path, PathBuf};

use gmmunit_autodiff::Tensor;
use image::imageops::FilterType;
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::DomainLabel;
use crate::nn::ImageBatch;
use crate::training::{mirror_items, BatchSource};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// `v / 127.5 - 1`.
pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding and clamping to 8 bits.
pub fn denormalize(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelSource {
    Folders,
    Manifest { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub labels: LabelSource,
    pub height: usize,
    pub width: usize,
    pub split_seed: u64,
    /// Fraction of images held out for testing.
    pub test_fraction: f64,
}

/// Decoded images `(n, 3, h, w)` in `[-1, 1]` with one label each.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
    pub labels: Vec<DomainLabel>,
    pub paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Default::default()
        }
    }

    fn item_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn push(&mut self, image: &RgbImage, label: DomainLabel, path: PathBuf) {
        assert_eq!(
            (image.height() as usize, image.width() as usize),
            (self.height, self.width),
            "image size"
        );
        self.data.extend(rgb_to_chw(image));
        self.labels.push(label);
        self.paths.push(path);
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let n = self.item_len();
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data[i * n..(i + 1) * n].to_vec())
    }

    /// Indices of the items whose label equals `label`.
    pub fn indices_of(&self, label: &DomainLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].bits == label.bits).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.item_len();
        let mut out = Dataset::new(self.height, self.width);
        for &i in indices {
            out.data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
            out.labels.push(self.labels[i].clone());
            out.paths.push(self.paths[i].clone());
        }
        out
    }
}

impl BatchSource for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(ImageBatch<f32>, Vec<DomainLabel>)> {
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("index {i} out of range {}", self.len())));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
            labels.push(self.labels[i].clone());
        }
        let x = ImageBatch::new(Tensor::from_vec(&[indices.len(), 3, self.height, self.width], data))?;
        Ok((x, labels))
    }
}

/// Train/test partition plus the label vocabulary.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    /// Domain names (folders) or attribute names (manifest).
    pub names: Vec<String>,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn rgb_to_chw(image: &RgbImage) -> Vec<f32> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = vec![0.0; 3 * h * w];
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = normalize(p[c]);
        }
    }
    out
}

/// One `(3, h, w)` item back to 8-bit RGB.
pub fn chw_to_rgb(data: &[f32], h: usize, w: usize) -> RgbImage {
    assert_eq!(data.len(), 3 * h * w);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| denormalize(data[(c * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    })
}

/// Decodes an image file, converting to RGB and resizing with a bilinear
/// (triangle) filter when the size differs.
pub fn read_image(path: &Path, height: usize, width: usize) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    if (img.height() as usize, img.width() as usize) == (height, width) {
        Ok(img)
    } else {
        Ok(image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle))
    }
}

pub fn write_png(path: &Path, image: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn folder_items(root: &Path) -> Result<(Vec<String>, Vec<(PathBuf, DomainLabel)>)> {
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} has no domain folders", root.display())));
    }
    let names: Vec<String> = dirs
        .iter()
        .map(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let mut items = Vec::new();
    for (k, dir) in dirs.iter().enumerate() {
        for p in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
            items.push((p, DomainLabel::one_hot(k, dirs.len(), names[k].clone())));
        }
    }
    Ok((names, items))
}

fn manifest_items(root: &Path, manifest: &Path) -> Result<(Vec<String>, Vec<(PathBuf, DomainLabel)>)> {
    let manifest = if manifest.is_absolute() {
        manifest.to_path_buf()
    } else {
        root.join(manifest)
    };
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("manifest header: {e}")))?
        .clone();
    if header.len() < 2 || &header[0] != "path" {
        return Err(Error::Data("manifest header must be `path,<attribute>,...`".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut items = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("manifest row {}: {e}", line + 2)))?;
        if row.len() != header.len() {
            return Err(Error::Label(format!(
                "manifest row {} has {} fields, expected {}",
                line + 2,
                row.len(),
                header.len()
            )));
        }
        let bits = row
            .iter()
            .skip(1)
            .map(|b| match b.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Label(format!("manifest row {}: bit {other:?}", line + 2))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let path = root.join(&row[0]);
        let name = names
            .iter()
            .zip(&bits)
            .filter(|(_, &b)| b == 1)
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>()
            .join("+");
        items.push((path, DomainLabel::from_bits(bits, name)));
    }
    Ok((names, items))
}

/// Reads, resizes and normalizes every image, then splits with a seeded
/// shuffle. Enumeration order (and therefore the split) depends only on the
/// file names and the seed.
pub fn load_dataset(spec: &DatasetSpec) -> Result<LoadedDataset> {
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::config(format!(
            "test_fraction must lie in [0, 1), got {}",
            spec.test_fraction
        )));
    }
    let (names, items) = match &spec.labels {
        LabelSource::Folders => folder_items(&spec.root)?,
        LabelSource::Manifest { path } => manifest_items(&spec.root, path)?,
    };
    if items.is_empty() {
        return Err(Error::Data(format!("no images under {}", spec.root.display())));
    }
    let mut all = Dataset::new(spec.height, spec.width);
    for (path, label) in items {
        let img = read_image(&path, spec.height, spec.width)?;
        all.push(&img, label, path);
    }
    let (train, test) = split_indices(all.len(), spec.test_fraction, spec.split_seed);
    Ok(LoadedDataset {
        names,
        train: all.subset(&train),
        test: all.subset(&test),
    })
}

/// Disjoint sorted train/test index sets.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Flips each item horizontally with probability `p`; returns the flags.
pub fn augment_mirror<R: Rng + ?Sized>(batch: &ImageBatch<f32>, rng: &mut R, p: f64) -> (ImageBatch<f32>, Vec<bool>) {
    let flips: Vec<bool> = (0..batch.len()).map(|_| rng.random::<f64>() < p).collect();
    let out = mirror_items(batch.values(), &flips);
    (ImageBatch::new(out).expect("mirroring preserves range"), flips)
}

// ---- procedural digits ------------------------------------------------------

/// Strokes of each digit as polylines in a unit box (x right, y down).
fn glyph(d: usize) -> Vec<Vec<(f64, f64)>> {
    let ring = |cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize| -> Vec<(f64, f64)> {
        (0..=steps)
            .map(|i| {
                let a = (from + (to - from) * i as f64 / steps as f64).to_radians();
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    match d {
        0 => vec![ring(0.5, 0.5, 0.27, 0.4, 0.0, 360.0, 20)],
        1 => vec![vec![(0.33, 0.25), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.35, 0.14),
            (0.55, 0.1),
            (0.72, 0.2),
            (0.72, 0.38),
            (0.25, 0.9),
            (0.78, 0.9),
        ]],
        3 => vec![vec![
            (0.25, 0.15),
            (0.72, 0.15),
            (0.45, 0.45),
            (0.68, 0.53),
            (0.74, 0.73),
            (0.57, 0.9),
            (0.25, 0.85),
        ]],
        4 => vec![vec![(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.8, 0.65)]],
        5 => vec![vec![
            (0.75, 0.12),
            (0.32, 0.12),
            (0.28, 0.46),
            (0.55, 0.42),
            (0.73, 0.55),
            (0.72, 0.77),
            (0.55, 0.9),
            (0.25, 0.85),
        ]],
        6 => vec![
            vec![(0.7, 0.12), (0.45, 0.22), (0.31, 0.45), (0.29, 0.68)],
            ring(0.5, 0.69, 0.21, 0.2, 180.0, 540.0, 16),
        ],
        7 => vec![vec![(0.22, 0.12), (0.78, 0.12), (0.42, 0.9)]],
        8 => vec![
            ring(0.5, 0.3, 0.18, 0.19, 0.0, 360.0, 16),
            ring(0.5, 0.69, 0.22, 0.21, 0.0, 360.0, 16),
        ],
        _ => vec![
            ring(0.5, 0.32, 0.2, 0.21, 0.0, 360.0, 16),
            vec![(0.7, 0.32), (0.66, 0.6), (0.58, 0.9)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders digit `d` as an anti-aliased white-on-black image with a random
/// scale, rotation, shear, offset and stroke width.
pub fn render_digit<R: Rng + ?Sized>(d: usize, size: usize, rng: &mut R) -> GrayImage {
    let s = size as f64;
    let scale = s * rng.random_range(0.58..0.72);
    let angle = rng.random_range(-0.25f64..0.25);
    let shear = rng.random_range(-0.25..0.25);
    let offset = (rng.random_range(-0.06..0.06) * s, rng.random_range(-0.06..0.06) * s);
    let thickness = rng.random_range(0.06..0.1) * s;
    let (sin, cos) = angle.sin_cos();
    let map = |(x, y): (f64, f64)| {
        let (x, y) = (x - 0.5 + shear * (y - 0.5), y - 0.5);
        let (x, y) = (cos * x - sin * y, sin * x + cos * y);
        (s / 2.0 + offset.0 + scale * x, s / 2.0 + offset.1 + scale * y)
    };
    let strokes: Vec<Vec<(f64, f64)>> = glyph(d).into_iter().map(|l| l.into_iter().map(map).collect()).collect();
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let dist = strokes
            .iter()
            .flat_map(|l| l.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let v = (thickness / 2.0 - dist + 0.5).clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// `n` digits with uniformly random classes.
pub fn synth_digits(n: usize, size: usize, seed: u64) -> Vec<(GrayImage, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let d = rng.random_range(0..10);
            (render_digit(d, size, &mut rng), d)
        })
        .collect()
}

pub fn toy_domain_name(k: usize) -> String {
    match k {
        0 => "d0_plain".into(),
        1 => "d1_textured".into(),
        2 => "d2_street".into(),
        k => format!("d{k}_tint"),
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Applies the fixed transform of domain `k` to a grayscale digit.
///
/// Domain 0 replicates the gray value; 1 puts an inverted digit on a smooth
/// colored texture; 2 draws a dark digit on a light flat background with
/// noise; higher domains tint the strokes with a domain-specific hue.
pub fn colorize<R: Rng + ?Sized>(gray: &GrayImage, k: usize, rng: &mut R) -> RgbImage {
    let (w, h) = gray.dimensions();
    match k {
        0 => RgbImage::from_fn(w, h, |x, y| {
            let g = gray.get_pixel(x, y)[0];
            Rgb([g, g, g])
        }),
        1 => {
            let waves: Vec<[f64; 4]> = (0..9)
                .map(|_| {
                    [
                        rng.random_range(0.05..0.35),
                        rng.random_range(0.05..0.35),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.1..0.25),
                    ]
                })
                .collect();
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
            RgbImage::from_fn(w, h, |x, y| {
                let g = gray.get_pixel(x, y)[0] as f64 / 255.0;
                Rgb(std::array::from_fn(|c| {
                    let bg = waves[3 * c..3 * c + 3]
                        .iter()
                        .fold(base[c], |acc, wv| acc + wv[3] * (wv[0] * x as f64 + wv[1] * y as f64 + wv[2]).sin())
                        .clamp(0.0, 1.0);
                    let v = bg * (1.0 - g) + (1.0 - bg) * g;
                    (v * 255.0).round() as u8
                }))
            })
        }
        2 => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..0.95));
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.3));
            let noise: Vec<f64> = (0..(w * h * 3)).map(|_| rng.random_range(-0.04..0.04)).collect();
            RgbImage::from_fn(w, h, |x, y| {
                let g = gray.get_pixel(x, y)[0] as f64 / 255.0;
                let at = ((y * w + x) * 3) as usize;
                Rgb(std::array::from_fn(|c| {
                    let v = (bg[c] * (1.0 - g) + fg[c] * g + noise[at + c]).clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                }))
            })
        }
        k => {
            let fg = hue_to_rgb((k as f64 * 0.618_033_988_75) % 1.0);
            let bg = rng.random_range(0.0..0.15);
            RgbImage::from_fn(w, h, |x, y| {
                let g = gray.get_pixel(x, y)[0] as f64 / 255.0;
                Rgb(std::array::from_fn(|c| {
                    let v = bg * (1.0 - g) + fg[c] * g;
                    (v * 255.0).round() as u8
                }))
            })
        }
    }
}

/// Splits `source` into `n_domains` disjoint shares (seeded shuffle) and
/// colorizes share `k` with domain `k`'s transform.
pub fn toy_domain_images(source: &[GrayImage], n_domains: usize, seed: u64) -> Result<Vec<Vec<RgbImage>>> {
    if n_domains < 2 {
        return Err(Error::config(format!("need at least 2 domains, got {n_domains}")));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); n_domains];
    for k in 0..n_domains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        for &i in order.iter().skip(k).step_by(n_domains) {
            out[k].push(colorize(&source[i], k, &mut rng));
        }
    }
    Ok(out)
}

/// Writes the toy domains as `root/<domain>/<index>.png` and returns a spec
/// reading them back in the folder layout.
pub fn build_toy_domains(source: &[GrayImage], n_domains: usize, seed: u64, root: &Path) -> Result<DatasetSpec> {
    let (w, h) = source
        .first()
        .map(|g| g.dimensions())
        .ok_or_else(|| Error::Data("empty source set".into()))?;
    let domains = toy_domain_images(source, n_domains, seed)?;
    for (k, images) in domains.iter().enumerate() {
        let dir = root.join(toy_domain_name(k));
        for (i, img) in images.iter().enumerate() {
            write_png(&dir.join(format!("{i:05}.png")), img)?;
        }
    }
    Ok(DatasetSpec {
        root: root.to_path_buf(),
        labels: LabelSource::Folders,
        height: h as usize,
        width: w as usize,
        split_seed: seed,
        test_fraction: 0.1,
    })
}

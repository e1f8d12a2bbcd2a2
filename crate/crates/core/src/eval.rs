//! Measurement harness: Fréchet distance between feature moments, pairwise
//! diversity, background diversity, domain accuracy under a probe
//! classifier, and attribute-code export.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use gmmunit_autodiff::{Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::AttributeCode;
use crate::nn::ImageBatch;
use crate::objectives::FeatureExtractor;
use crate::training::BatchSource;

/// Eigenvalues down to this are treated as round-off and clamped to zero.
pub const EIGEN_CLAMP: f64 = -1e-6;
const EIGEN_TOL: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;
const UNIT_NORM_EPS: f64 = 1e-10;
const EMBED_CHUNK: usize = 64;

/// `N x F` feature matrix tagged with the extractor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub extractor: String,
    rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(extractor: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let f = rows.first().map(Vec::len).unwrap_or(0);
        if f == 0 {
            return Err(Error::Argument("feature set is empty".into()));
        }
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature rows differ in width".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(Self {
            extractor: extractor.into(),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n, f) = (self.len(), self.dim());
        if n < 2 {
            return Err(Error::Argument(format!("moments need at least 2 rows, got {n}")));
        }
        let mut mean = DVector::zeros(f);
        for r in &self.rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(f, f);
        for r in &self.rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov.syger(1.0, &d, &d, 1.0);
        }
        cov /= (n - 1) as f64;
        cov.fill_upper_triangle_with_lower_triangle();
        Ok((mean, cov))
    }
}

fn psd_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(m, EIGEN_TOL, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("matrix square root did not converge".into()))?;
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < EIGEN_CLAMP) {
        return Err(Error::Numeric(format!("matrix is not positive semidefinite (eigenvalue {bad:e})")));
    }
    Ok(eig)
}

/// Symmetric PSD square root.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m.clone())?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖m_a − m_b‖² + Tr(C_a + C_b − 2 (C_a C_b)^{1/2})`.
///
/// The trace of `(C_a C_b)^{1/2}` is taken as the trace of the square root
/// of the symmetric matrix `C_a^{1/2} C_b C_a^{1/2}`, which has the same
/// spectrum.
pub fn frechet_from_moments(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let f = mean_a.len();
    if mean_b.len() != f || cov_a.shape() != (f, f) || cov_b.shape() != (f, f) {
        return Err(Error::Shape("moment dimensions differ".into()));
    }
    let s = sqrtm_psd(cov_a)?;
    let inner = &s * cov_b * &s;
    let tr_cross: f64 = psd_eigen(inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (mean_a - mean_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.dim(), b.dim())));
    }
    let (ma, ca) = a.moments()?;
    let (mb, cb) = b.moments()?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

/// Maps images to flat vectors whose squared Euclidean distance is the
/// perceptual distance used by the diversity scores.
pub trait Embedder {
    fn id(&self) -> &str;
    fn embed(&self, x: &ImageBatch<f32>) -> Result<Vec<Vec<f64>>>;
}

/// Raw pixels scaled so the squared distance is the mean squared pixel
/// difference.
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn id(&self) -> &str {
        "pixels"
    }

    fn embed(&self, x: &ImageBatch<f32>) -> Result<Vec<Vec<f64>>> {
        let (n, c, h, w) = x.values().dims4();
        let per = c * h * w;
        let s = 1.0 / (per as f64).sqrt();
        Ok(x.values()
            .data()
            .chunks_exact(per)
            .take(n)
            .map(|img| img.iter().map(|&v| v as f64 * s).collect())
            .collect())
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("nothing to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Average distance over all unordered pairs of one input's samples.
pub fn pairwise_mean(samples: &[Vec<f64>]) -> Result<f64> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::Argument(format!("diversity needs at least 2 samples, got {s}")));
    }
    let mut total = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            total += squared_distance(&samples[i], &samples[j]);
        }
    }
    Ok(total / (s * (s - 1) / 2) as f64)
}

/// `per_input[i]` holds the embeddings of the samples generated from input
/// `i`.
pub fn diversity_score(per_input: &[Vec<Vec<f64>>]) -> Result<Summary> {
    let scores = per_input.iter().map(|s| pairwise_mean(s)).collect::<Result<Vec<_>>>()?;
    Summary::of(&scores)
}

pub fn diversity_score_images(per_input: &[ImageBatch<f32>], embedder: &dyn Embedder) -> Result<Summary> {
    let embedded = per_input.iter().map(|b| embedder.embed(b)).collect::<Result<Vec<_>>>()?;
    diversity_score(&embedded)
}

/// Multiplies every channel by `region: (h, w)`.
pub fn mask_region(x: &ImageBatch<f32>, region: &Tensor<f32>) -> Result<ImageBatch<f32>> {
    let (n, c, h, w) = x.values().dims4();
    if region.shape() != [h, w] {
        return Err(Error::Shape(format!("region {:?} for images {h}x{w}", region.shape())));
    }
    if region.data().iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Argument("region values must lie in [0, 1]".into()));
    }
    if region.data().iter().all(|&r| r == 0.0) {
        return Err(Error::Argument("background region is empty".into()));
    }
    let mut out = x.values().clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= region.data()[i % (h * w)];
    }
    debug_assert_eq!(out.len(), n * c * h * w);
    ImageBatch::new(out)
}

/// Mean distance between the masked input and each masked sample.
pub fn background_diversity(
    input: &ImageBatch<f32>,
    samples: &ImageBatch<f32>,
    region: &Tensor<f32>,
    embedder: &dyn Embedder,
) -> Result<f64> {
    if input.len() != 1 {
        return Err(Error::Argument("background diversity takes one input image".into()));
    }
    if samples.size() != input.size() {
        return Err(Error::Shape("samples and input differ in size".into()));
    }
    let a = embedder.embed(&mask_region(input, region)?)?;
    let b = embedder.embed(&mask_region(samples, region)?)?;
    Ok(b.iter().map(|s| squared_distance(&a[0], s)).sum::<f64>() / b.len() as f64)
}

/// Complement of an attention mask `(1, 1, h, w)` thresholded at 0.5.
pub fn background_from_mask(mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (n, c, h, w) = mask.dims4();
    if n != 1 || c != 1 {
        return Err(Error::Shape("expected a single one-channel mask".into()));
    }
    Ok(Tensor::from_vec(
        &[h, w],
        mask.data().iter().map(|&m| if m < 0.5 { 1.0 } else { 0.0 }).collect(),
    ))
}

pub trait Classifier {
    fn classify(&self, x: &ImageBatch<f32>) -> Result<Vec<usize>>;
}

/// Fraction of images assigned to their target class.
pub fn domain_accuracy(translated: &[ImageBatch<f32>], targets: &[usize], probe: &dyn Classifier) -> Result<f64> {
    let n: usize = translated.iter().map(|b| b.len()).sum();
    if n == 0 {
        return Err(Error::Argument("domain accuracy of an empty batch".into()));
    }
    if n != targets.len() {
        return Err(Error::Argument(format!("{n} images but {} targets", targets.len())));
    }
    let mut predicted = Vec::with_capacity(n);
    for b in translated {
        predicted.extend(probe.classify(b)?);
    }
    let hits = predicted.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / n as f64)
}

// ---- probe --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Small convolutional classifier over domains. Its hidden activations double
/// as the perceptual feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Accuracy on held-out real images, recorded after training.
    pub accuracy: Option<f64>,
    weights: Vec<StoredTensor>,
}

/// (c_in, c_out, kernel, stride, pad) of the three conv layers.
const PROBE_CONVS: [(usize, usize, usize, usize, usize); 3] = [(3, 16, 3, 1, 1), (16, 32, 4, 2, 1), (32, 64, 4, 2, 1)];
const PROBE_ID: &str = "probe-conv3";

impl Probe {
    pub fn new(n_classes: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config("probe needs at least two classes"));
        }
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::config(format!("probe input {height}x{width} must be a positive multiple of 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], fan_in: usize, gain: f64| {
            let std = gain / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            StoredTensor {
                shape: shape.to_vec(),
                data: (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (e * std) as f32
                    })
                    .collect(),
            }
        };
        let mut weights = Vec::new();
        for (ci, co, k, _, _) in PROBE_CONVS {
            weights.push(normal(&[co, ci, k, k], ci * k * k, std::f64::consts::SQRT_2));
            weights.push(StoredTensor {
                shape: vec![co],
                data: vec![0.0; co],
            });
        }
        let last = PROBE_CONVS[2].1;
        weights.push(normal(&[n_classes, last], last, 1.0));
        weights.push(StoredTensor {
            shape: vec![n_classes],
            data: vec![0.0; n_classes],
        });
        Ok(Self {
            n_classes,
            height,
            width,
            accuracy: None,
            weights,
        })
    }

    fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| {
                let t = Tensor::from_vec(&w.shape, w.data.clone());
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    fn forward(tape: &mut Tape<f32>, p: &[Var], x: Var) -> (Vec<Var>, Var) {
        let mut h = x;
        let mut feats = Vec::new();
        for (i, &(_, _, _, stride, pad)) in PROBE_CONVS.iter().enumerate() {
            h = tape.conv2d(h, p[2 * i], Some(p[2 * i + 1]), stride, pad);
            h = tape.relu(h);
            feats.push(h);
        }
        let pooled = tape.global_avg_pool(h);
        let logits = tape.linear(pooled, p[6], Some(p[7]));
        (feats, logits)
    }

    fn check_input(&self, x: &ImageBatch<f32>) -> Result<()> {
        if x.size() != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "probe expects {}x{} images, got {:?}",
                self.height,
                self.width,
                x.size()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &ImageBatch<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.values().clone());
        let (_, logits) = Self::forward(&mut tape, &p, xv);
        Ok(tape.value(logits).clone())
    }

    /// Trains on `data` whose labels are one-hot domains, with Adam and
    /// batches drawn with replacement.
    pub fn train(&mut self, data: &dyn BatchSource, opts: &ProbeTraining) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Data("probe training set is empty".into()));
        }
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let mut m: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.data.len()]).collect();
        let mut v = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut losses = Vec::with_capacity(opts.steps);
        for t in 1..=opts.steps {
            let idx: Vec<usize> = (0..opts.batch_size).map(|_| rng.random_range(0..data.len())).collect();
            let (x, labels) = data.batch(&idx)?;
            self.check_input(&x)?;
            let targets = class_indices(&labels, self.n_classes)?;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, true);
            let xv = tape.constant(x.into_values());
            let (_, logits) = Self::forward(&mut tape, &p, xv);
            let loss = tape.cross_entropy(logits, &targets);
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("probe loss became {value} at step {t}")));
            }
            losses.push(value);
            let grads = tape.backward(loss);
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            for (k, w) in self.weights.iter_mut().enumerate() {
                let Some(g) = grads.get(p[k]) else { continue };
                for (j, &gj) in g.data().iter().enumerate() {
                    let gj = gj as f64;
                    m[k][j] = b1 * m[k][j] + (1.0 - b1) * gj;
                    v[k][j] = b2 * v[k][j] + (1.0 - b2) * gj * gj;
                    let step = opts.lr * (m[k][j] / c1) / ((v[k][j] / c2).sqrt() + eps);
                    w.data[j] -= step as f32;
                }
            }
        }
        Ok(losses)
    }

    /// Accuracy on every item of `data`; also recorded on the probe.
    pub fn calibrate(&mut self, data: &dyn BatchSource) -> Result<f64> {
        let acc = self.accuracy_on(data)?;
        self.accuracy = Some(acc);
        Ok(acc)
    }

    pub fn accuracy_on(&self, data: &dyn BatchSource) -> Result<f64> {
        let mut batches = Vec::new();
        let mut targets = Vec::new();
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(EMBED_CHUNK) {
            let (x, labels) = data.batch(chunk)?;
            targets.extend(class_indices(&labels, self.n_classes)?);
            batches.push(x);
        }
        domain_accuracy(&batches, &targets, self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("probe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Probe = serde_json::from_str(text).map_err(|e| Error::Data(format!("bad probe file: {e}")))?;
        let reference = Probe::new(p.n_classes, p.height, p.width, 0)?;
        let fits = p.weights.len() == reference.weights.len()
            && p.weights
                .iter()
                .zip(&reference.weights)
                .all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len());
        if !fits {
            return Err(Error::Data("probe file has the wrong layout".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn class_indices(labels: &[crate::gmm::DomainLabel], n: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| match l.hot_index() {
            Some(k) if k < n && l.bits.len() == n => Ok(k),
            _ => Err(Error::Label(format!("probe needs one-hot labels over {n} classes, got {:?}", l.bits))),
        })
        .collect()
}

impl Classifier for Probe {
    fn classify(&self, x: &ImageBatch<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .data()
            .chunks_exact(self.n_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

impl FeatureExtractor<f32> for Probe {
    fn id(&self) -> &str {
        PROBE_ID
    }

    fn features(&self, tape: &mut Tape<f32>, x: Var) -> Vec<Var> {
        let p = self.bind(tape, false);
        Self::forward(tape, &p, x).0
    }
}

/// Channel-normalizes each feature map position and scales by
/// `1/sqrt(h w)`, so the squared distance of two embeddings is the sum over
/// layers of the spatially averaged squared difference of unit features.
pub fn unit_feature_embedding(maps: &[Tensor<f32>]) -> Vec<Vec<f64>> {
    let n = maps.first().map(|m| m.dims4().0).unwrap_or(0);
    let mut out = vec![Vec::new(); n];
    for map in maps {
        let (_, c, h, w) = map.dims4();
        let hw = h * w;
        let s = 1.0 / (hw as f64).sqrt();
        for (i, img) in map.data().chunks_exact(c * hw).enumerate() {
            let mut vec = vec![0.0; c * hw];
            for pos in 0..hw {
                let norm = (0..c).map(|ch| (img[ch * hw + pos] as f64).powi(2)).sum::<f64>().sqrt();
                for ch in 0..c {
                    vec[ch * hw + pos] = img[ch * hw + pos] as f64 / (norm + UNIT_NORM_EPS) * s;
                }
            }
            out[i].extend(vec);
        }
    }
    out
}

impl Embedder for Probe {
    fn id(&self) -> &str {
        PROBE_ID
    }

    fn embed(&self, x: &ImageBatch<f32>) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.len());
        let n = x.len();
        let per = x.values().len() / n;
        let (h, w) = x.size();
        for start in (0..n).step_by(EMBED_CHUNK) {
            let end = (start + EMBED_CHUNK).min(n);
            let chunk = Tensor::from_vec(&[end - start, 3, h, w], x.values().data()[start * per..end * per].to_vec());
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let (feats, _) = Self::forward(&mut tape, &p, xv);
            let maps: Vec<Tensor<f32>> = feats.iter().map(|&f| tape.value(f).clone()).collect();
            out.extend(unit_feature_embedding(&maps));
        }
        Ok(out)
    }
}

/// Embeddings of a set of images as a [`FeatureSet`] for Fréchet distance,
/// using the probe's pooled last-layer activations.
pub fn probe_feature_set(probe: &Probe, images: &[ImageBatch<f32>]) -> Result<FeatureSet> {
    let mut rows = Vec::new();
    for x in images {
        probe.check_input(x)?;
        let mut tape = Tape::new();
        let p = probe.bind(&mut tape, false);
        let xv = tape.constant(x.values().clone());
        let (feats, _) = Probe::forward(&mut tape, &p, xv);
        let pooled = tape.global_avg_pool(feats[feats.len() - 1]);
        let t = tape.value(pooled);
        let (_, f) = t.dims2();
        rows.extend(t.data().chunks_exact(f).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    FeatureSet::new(PROBE_ID, rows)
}

// ---- attribute-code export ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    /// Drawn from the prior.
    Sampled,
    /// Produced by the attribute encoder from a real image.
    Extracted,
}

impl LatentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentKind::Sampled => "sampled",
            LatentKind::Extracted => "extracted",
        }
    }
}

impl FromStr for LatentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(LatentKind::Sampled),
            "extracted" => Ok(LatentKind::Extracted),
            other => Err(Error::Data(format!("unknown code kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub label: String,
    pub kind: LatentKind,
    pub code: AttributeCode,
}

/// CSV with columns `label,kind,z0,...`. Values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn export_latents(rows: &[LatentRow], path: &Path) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::Argument("no codes to export".into()))?;
    let dim = first.code.len();
    if rows.iter().any(|r| r.code.len() != dim) {
        return Err(Error::Dimension("codes differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["label".to_string(), "kind".to_string()];
    header.extend((0..dim).map(|i| format!("z{i}")));
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.label.clone(), r.kind.as_str().to_string()];
        rec.extend(r.code.as_slice().iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() < 3 {
            return Err(Error::Data("latent row has no code components".into()));
        }
        let code = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Data(format!("bad value {v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(LatentRow {
            label: rec[0].to_string(),
            kind: rec[1].parse()?,
            code: AttributeCode(code),
        });
    }
    Ok(out)
}

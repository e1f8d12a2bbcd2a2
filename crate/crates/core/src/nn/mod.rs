//! Content encoder, attribute encoder, generator and discriminator.
//!
//! Tensors are laid out NCHW. Each network is a parameter-free layout
//! description ([`Networks`]) evaluated against a [`ParamSet`] on an
//! autodiff tape, so the same code serves inference, training and f64
//! gradient checks.

mod discriminator;
mod encoders;
mod generator;
mod layers;
mod params;

use gmmunit_autodiff::{Float, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use discriminator::Discriminator;
use encoders::{AttributeEncoder, ContentEncoder};
use generator::Generator;
use params::{ParamBuilder, ParamDecl};

pub use params::{Bound, ParamEntry, ParamId, ParamSet, Part};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub content_res_blocks: usize,
    pub gen_res_blocks: usize,
    pub attr_downsamples: usize,
    pub disc_downsamples: usize,
    /// Length of an attribute code, `C * Z`.
    pub code_dim: usize,
    pub mlp_dim: usize,
    pub n_domains: usize,
    pub attention: bool,
    pub guidance_channel: bool,
    /// False for the ablation without a content encoder, where the
    /// generator consumes the image directly.
    pub disentangled: bool,
    pub logvar_range: (f64, f64),
}

impl NetConfig {
    /// Full-depth networks.
    pub fn standard(height: usize, width: usize, code_dim: usize, n_domains: usize) -> Self {
        Self {
            height,
            width,
            base_channels: 64,
            content_res_blocks: 4,
            gen_res_blocks: 4,
            attr_downsamples: 4,
            disc_downsamples: 4,
            code_dim,
            mlp_dim: 256,
            n_domains,
            attention: false,
            guidance_channel: false,
            disentangled: true,
            logvar_range: (-10.0, 10.0),
        }
    }

    /// Reduced depth for 32x32 inputs: one fewer discriminator stage and
    /// three content residual blocks.
    pub fn digits(code_dim: usize, n_domains: usize) -> Self {
        Self {
            content_res_blocks: 3,
            disc_downsamples: 3,
            ..Self::standard(32, 32, code_dim, n_domains)
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    /// Channels of the content code (`4 * base`).
    pub fn content_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn content_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn disc_feature_size(&self) -> (usize, usize) {
        let f = 1 << self.disc_downsamples;
        (self.height / f, self.width / f)
    }

    /// Input sizes must be multiples of this: 16 at standard depth.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.attr_downsamples.max(self.disc_downsamples).max(2)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let multiple = self.spatial_multiple();
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % multiple != 0 {
                errs.push(format!("{name} {v} is not a positive multiple of {multiple}"));
            }
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("code_dim", self.code_dim),
            ("mlp_dim", self.mlp_dim),
            ("n_domains", self.n_domains),
            ("disc_downsamples", self.disc_downsamples),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        let (lo, hi) = self.logvar_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            errs.push(format!("logvar_range ({lo}, {hi}) is not a finite increasing pair"));
        }
        if self.guidance_channel && !self.attention {
            errs.push("guidance_channel requires attention".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Parameter-free layout of the four networks.
#[derive(Clone, Debug)]
pub struct Networks {
    cfg: NetConfig,
    content: Option<ContentEncoder>,
    attribute: AttributeEncoder,
    generator: Generator,
    discriminator: Discriminator,
    decls: Vec<ParamDecl>,
}

impl Networks {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::default();
        let content = cfg.disentangled.then(|| ContentEncoder::new(&mut pb, &cfg));
        let attribute = AttributeEncoder::new(&mut pb, &cfg);
        let generator = Generator::new(&mut pb, &cfg);
        let discriminator = Discriminator::new(&mut pb, &cfg);
        Ok(Self {
            cfg,
            content,
            attribute,
            generator,
            discriminator,
            decls: pb.decls,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn init_params<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        ParamSet::initialize(&self.decls, rng)
    }

    /// Checks that `params` has exactly the declared names and shapes.
    pub fn check_params<T: Float>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.decls.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                self.decls.len(),
                params.len()
            )));
        }
        for (d, e) in self.decls.iter().zip(params.entries()) {
            if d.part != e.part || d.name != e.name || d.shape != e.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {}/{} {:?} does not match declared {}/{} {:?}",
                    e.part.module_name(),
                    e.name,
                    e.value.shape(),
                    d.part.module_name(),
                    d.name,
                    d.shape
                )));
            }
        }
        Ok(())
    }

    /// Content code; the image itself in the entangled ablation.
    pub fn content<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        match &self.content {
            Some(enc) => enc.forward(tape, p, x),
            None => x,
        }
    }

    /// Posterior `(mean, logvar)`, each `(n, code_dim)`.
    pub fn attributes<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        self.attribute.forward(tape, p, x)
    }

    /// Raw image and optional mask.
    pub fn generate<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, c: Var, z: Var) -> (Var, Option<Var>) {
        self.generator.forward(tape, p, c, z, None)
    }

    /// Generator output blended with `source` when the mask head is on.
    pub fn translate<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, source: Var, c: Var, z: Var) -> Var {
        let (raw, mask) = self.generate(tape, p, c, z);
        match mask {
            Some(m) => compose_on_tape(tape, source, raw, m),
            None => raw,
        }
    }

    /// `(rf_map, domain_logits)`.
    pub fn discriminate<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Var) {
        self.discriminator.forward(tape, p, x)
    }
}

/// `raw * m + a * (1 - m)` with the single-channel mask broadcast over RGB.
pub fn compose_on_tape<T: Float>(tape: &mut Tape<T>, a: Var, raw: Var, m: Var) -> Var {
    let c = tape.shape(raw)[1];
    let m = tape.broadcast_channels(m, c);
    let neg = tape.scale(m, -T::one());
    let inv = tape.offset(neg, T::one());
    let fg = tape.mul(raw, m);
    let bg = tape.mul(a, inv);
    tape.add(fg, bg)
}

/// Images `(n, 3, h, w)` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    values: Tensor<T>,
}

impl<T: Float> ImageBatch<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.ndim() != 4 || values.shape()[1] != 3 || values.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "image batch must be (n >= 1, 3, h, w), got {:?}",
                values.shape()
            )));
        }
        let limit = T::one() + T::of(1e-6);
        if let Some(v) = values.data().iter().find(|v| !(v.abs() <= limit)) {
            return Err(Error::Argument(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(h, w)`.
    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }
}

/// `(n, 4 * base, h / 4, w / 4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentCode<T = f32> {
    pub values: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributePosterior<T = f32> {
    /// `(n, code_dim)`.
    pub mean: Tensor<T>,
    /// `(n, code_dim)`, clamped.
    pub logvar: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorOutput<T = f32> {
    /// `(n, 1, h', w')`.
    pub rf_map: Tensor<T>,
    /// `(n, n_domains)`.
    pub domain_logits: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointMode {
    #[default]
    Mean,
    Reparameterized,
}

/// Collapses a posterior to one code per row.
pub fn attribute_point<T: Float, R: Rng + ?Sized>(
    p: &AttributePosterior<T>,
    mode: PointMode,
    rng: &mut R,
) -> Tensor<T> {
    match mode {
        PointMode::Mean => p.mean.clone(),
        PointMode::Reparameterized => {
            let data = p
                .mean
                .data()
                .iter()
                .zip(p.logvar.data())
                .map(|(&m, &lv)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + (lv * T::of(0.5)).exp() * T::of(e)
                })
                .collect();
            Tensor::from_vec(p.mean.shape(), data)
        }
    }
}

/// `b_raw * m + a * (1 - m)`, `m` of shape `(n, 1, h, w)`.
pub fn compose_attention<T: Float>(a: &ImageBatch<T>, b_raw: &ImageBatch<T>, m: &Tensor<T>) -> Result<ImageBatch<T>> {
    let (n, c, h, w) = a.values.dims4();
    if b_raw.values.shape() != a.values.shape() {
        return Err(Error::Argument(format!(
            "compose: image shapes {:?} and {:?} differ",
            a.values.shape(),
            b_raw.values.shape()
        )));
    }
    if m.shape() != [n, 1, h, w] {
        return Err(Error::Argument(format!(
            "compose: mask shape {:?}, expected {:?}",
            m.shape(),
            [n, 1, h, w]
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(a.values.len());
    let planes = a.values.data().chunks_exact(plane).zip(b_raw.values.data().chunks_exact(plane));
    for (i, (pa, pb)) in planes.enumerate() {
        let mp = &m.data()[(i / c) * plane..(i / c + 1) * plane];
        out.extend(
            pa.iter()
                .zip(pb)
                .zip(mp)
                .map(|((&av, &bv), &mv)| bv * mv + av * (T::one() - mv)),
        );
    }
    ImageBatch::new(Tensor::from_vec(a.values.shape(), out))
}

/// Parameters bound to a layout.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub nets: Networks,
    pub params: ParamSet<T>,
}

impl<T: Float> Model<T> {
    /// Fresh fan-in Gaussian initialization.
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let nets = Networks::new(cfg)?;
        let params = nets.init_params(rng);
        Ok(Self { nets, params })
    }

    pub fn from_params(cfg: NetConfig, params: ParamSet<T>) -> Result<Self> {
        let nets = Networks::new(cfg)?;
        nets.check_params(&params)?;
        Ok(Self { nets, params })
    }

    pub fn config(&self) -> &NetConfig {
        self.nets.config()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            nets: self.nets.clone(),
            params: self.params.cast(),
        }
    }

    fn frozen(&self) -> (Tape<T>, Bound) {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        (tape, p)
    }

    fn check_spatial(&self, x: &ImageBatch<T>, exact: bool) -> Result<()> {
        let (h, w) = x.size();
        let cfg = self.config();
        let multiple = cfg.spatial_multiple();
        if h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image size {h}x{w} is not a multiple of {multiple}")));
        }
        if exact && (h, w) != (cfg.height, cfg.width) {
            return Err(Error::Shape(format!(
                "image size {h}x{w} differs from the configured {}x{}",
                cfg.height, cfg.width
            )));
        }
        Ok(())
    }

    pub fn encode_content(&self, x: &ImageBatch<T>) -> Result<ContentCode<T>> {
        self.check_spatial(x, false)?;
        if !self.config().disentangled {
            return Err(Error::Argument("this model has no content encoder".into()));
        }
        let (mut tape, p) = self.frozen();
        let xv = tape.constant(x.values.clone());
        let c = self.nets.content(&mut tape, &p, xv);
        Ok(ContentCode {
            values: tape.value(c).clone(),
        })
    }

    pub fn encode_attributes(&self, x: &ImageBatch<T>) -> Result<AttributePosterior<T>> {
        self.check_spatial(x, false)?;
        let (mut tape, p) = self.frozen();
        let xv = tape.constant(x.values.clone());
        let (m, lv) = self.nets.attributes(&mut tape, &p, xv);
        Ok(AttributePosterior {
            mean: tape.value(m).clone(),
            logvar: tape.value(lv).clone(),
        })
    }

    /// Raw generator output and mask, if the attention head is enabled.
    pub fn generate(&self, c: &ContentCode<T>, z: &Tensor<T>) -> Result<(ImageBatch<T>, Option<Tensor<T>>)> {
        self.generate_from(&c.values, z)
    }

    fn generate_from(&self, c: &Tensor<T>, z: &Tensor<T>) -> Result<(ImageBatch<T>, Option<Tensor<T>>)> {
        let cfg = self.config();
        if z.ndim() != 2 || z.shape()[1] != cfg.code_dim {
            return Err(Error::Dimension(format!(
                "attribute codes {:?}, expected (n, {})",
                z.shape(),
                cfg.code_dim
            )));
        }
        if c.ndim() != 4 || c.shape()[0] != z.shape()[0] {
            return Err(Error::Argument(format!(
                "content batch {:?} does not match code batch {}",
                c.shape(),
                z.shape()[0]
            )));
        }
        let expected_c = if cfg.disentangled { cfg.content_channels() } else { 3 };
        if c.shape()[1] != expected_c {
            return Err(Error::Shape(format!(
                "content has {} channels, expected {expected_c}",
                c.shape()[1]
            )));
        }
        let (mut tape, p) = self.frozen();
        let cv = tape.constant(c.clone());
        let zv = tape.constant(z.clone());
        let (raw, mask) = self.nets.generate(&mut tape, &p, cv, zv);
        let raw = ImageBatch::new(tape.value(raw).clone())?;
        Ok((raw, mask.map(|m| tape.value(m).clone())))
    }

    /// Full translation of `x` with codes `z`, including the mask blend.
    pub fn translate(&self, x: &ImageBatch<T>, z: &Tensor<T>) -> Result<ImageBatch<T>> {
        let content = if self.config().disentangled {
            self.encode_content(x)?.values
        } else {
            self.check_spatial(x, false)?;
            x.values.clone()
        };
        let (raw, mask) = self.generate_from(&content, z)?;
        match mask {
            Some(m) => compose_attention(x, &raw, &m),
            None => Ok(raw),
        }
    }

    pub fn discriminate(&self, x: &ImageBatch<T>) -> Result<DiscriminatorOutput<T>> {
        self.check_spatial(x, true)?;
        let (mut tape, p) = self.frozen();
        let xv = tape.constant(x.values.clone());
        let (rf, logits) = self.nets.discriminate(&mut tape, &p, xv);
        Ok(DiscriminatorOutput {
            rf_map: tape.value(rf).clone(),
            domain_logits: tape.value(logits).clone(),
        })
    }
}

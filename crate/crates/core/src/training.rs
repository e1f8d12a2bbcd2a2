//! Alternating discriminator / generator optimization.

use std::fmt;
use std::str::FromStr;

use gmmunit_autodiff::{Float, Grads, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{AttributeGmm, DomainLabel, GmmSpec};
use crate::nn::{Bound, ImageBatch, Model, NetConfig, Networks, ParamSet, Part, PointMode};
use crate::objectives::{self, AdvFlavor, DomainMode, DomainTargets, FeatureExtractor, LossReport, LossTerms, LossWeights};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 1e-4;
pub const LR_HALVING_PERIOD: u64 = 200_000;

/// `base * 0.5^floor(iteration / 200000)`.
pub fn lr_at(base: f64, iteration: u64) -> f64 {
    let halvings = iteration / LR_HALVING_PERIOD;
    base * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Ablations; fixed for the lifetime of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Zero-variance prior.
    Sigma0,
    NoCyc,
    NoAttrRec,
    NoIso,
    /// No content encoder; the generator reads the image directly.
    NoDisent,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::Sigma0,
        Variant::NoCyc,
        Variant::NoAttrRec,
        Variant::NoIso,
        Variant::NoDisent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Sigma0 => "sigma0",
            Variant::NoCyc => "no-cyc",
            Variant::NoAttrRec => "no-attr-rec",
            Variant::NoIso => "no-iso",
            Variant::NoDisent => "no-disent",
        }
    }

    pub fn uses_cycle(self) -> bool {
        self != Variant::NoCyc
    }

    pub fn uses_attr_rec(self) -> bool {
        self != Variant::NoAttrRec
    }

    pub fn uses_iso(self) -> bool {
        self != Variant::NoIso
    }

    pub fn apply_net(self, mut cfg: NetConfig) -> NetConfig {
        if self == Variant::NoDisent {
            cfg.disentangled = false;
        }
        cfg
    }

    pub fn apply_gmm(self, mut spec: GmmSpec) -> GmmSpec {
        if self == Variant::Sigma0 {
            spec.deterministic = true;
        }
        spec
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub base_lr: f64,
    pub weights: LossWeights,
    pub adv_flavor: AdvFlavor,
    pub domain_mode: DomainMode,
    pub point_mode: PointMode,
    pub mirror_prob: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: DEFAULT_LR,
            weights: LossWeights::default(),
            adv_flavor: AdvFlavor::default(),
            domain_mode: DomainMode::default(),
            point_mode: PointMode::default(),
            mirror_prob: 0.5,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.weights.validate();
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            errs.push(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            errs.push(format!("mirror_prob must lie in [0, 1], got {}", self.mirror_prob));
        }
        errs
    }
}

/// Adaptive-moment optimizer over a subset of a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub indices: Vec<usize>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamSet<T>, filter: impl Fn(Part) -> bool) -> Self {
        let indices = params.indices(filter);
        let zeros = |i: &usize| Tensor::zeros(params.entries()[*i].value.shape());
        Self {
            m: indices.iter().map(zeros).collect(),
            v: indices.iter().map(zeros).collect(),
            indices,
            steps: 0,
        }
    }

    /// One bias-corrected update. `grads[j]` belongs to `indices[j]`;
    /// `None` counts as a zero gradient. Non-finite gradients reject the
    /// whole step and leave everything untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != self.indices.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.indices.len()
            )));
        }
        for (j, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let entry = &params.entries()[self.indices[j]];
                if g.shape() != entry.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for {} {:?}",
                        g.shape(),
                        entry.name,
                        entry.value.shape()
                    )));
                }
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for {}/{}; step rejected",
                        entry.part.module_name(),
                        entry.name
                    )));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let (one_b1, one_b2) = (T::of(1.0 - ADAM_BETA1), T::of(1.0 - ADAM_BETA2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(ADAM_EPS);
        for (j, g) in grads.iter().enumerate() {
            let m = self.m[j].data_mut();
            let v = self.v[j].data_mut();
            let p = params.tensor_mut(self.indices[j]).data_mut();
            match g {
                Some(g) => {
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Every random quantity consumed by one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSamples {
    pub flips: Vec<bool>,
    pub d_targets: Vec<usize>,
    pub d_z: Vec<Vec<f64>>,
    pub g_targets: Vec<usize>,
    pub g_z: Vec<Vec<f64>>,
    pub g_z_prime: Vec<Vec<f64>>,
    /// Standard normal noise for reparameterized attribute points.
    pub eps: Option<Vec<Vec<f64>>>,
}

impl StepSamples {
    pub fn draw<R: Rng + ?Sized>(
        gmm: &AttributeGmm,
        n: usize,
        mirror_prob: f64,
        point_mode: PointMode,
        rng: &mut R,
    ) -> Result<Self> {
        let k = gmm.num_components();
        let flips = (0..n).map(|_| rng.random::<f64>() < mirror_prob).collect();
        let draw_targets = |rng: &mut R| -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let z = targets
                .iter()
                .map(|&t| gmm.sample_component(t, rng).map(|c| c.0))
                .collect::<Result<_>>()?;
            Ok((targets, z))
        };
        let (d_targets, d_z) = draw_targets(rng)?;
        let (g_targets, g_z) = draw_targets(rng)?;
        let g_z_prime = g_targets
            .iter()
            .map(|&t| gmm.sample_component(t, rng).map(|c| c.0))
            .collect::<Result<_>>()?;
        let eps = (point_mode == PointMode::Reparameterized).then(|| {
            (0..n)
                .map(|_| (0..gmm.code_dim()).map(|_| StandardNormal.sample(rng)).collect())
                .collect()
        });
        Ok(Self {
            flips,
            d_targets,
            d_z,
            g_targets,
            g_z,
            g_z_prime,
            eps,
        })
    }
}

fn rows_tensor<T: Float>(rows: &[Vec<f64>]) -> Tensor<T> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(&[rows.len(), d], rows.iter().flatten().map(|&v| T::of(v)).collect())
}

/// Horizontal mirror of the items flagged in `flips`.
pub fn mirror_items<T: Float>(x: &Tensor<T>, flips: &[bool]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(flips.len(), n);
    let mut out = x.clone();
    let item = c * h * w;
    for (i, _) in flips.iter().enumerate().filter(|(_, &f)| f) {
        for row in out.data_mut()[i * item..(i + 1) * item].chunks_exact_mut(w) {
            row.reverse();
        }
    }
    out
}

/// Everything a loss graph needs besides parameters.
pub struct StepInputs<'a, T> {
    /// Already mirrored.
    pub x: &'a Tensor<T>,
    pub labels: &'a [DomainLabel],
    pub samples: &'a StepSamples,
    pub gmm: &'a AttributeGmm,
    pub settings: &'a TrainSettings,
    pub extractor: Option<&'a dyn FeatureExtractor<T>>,
}

impl<T: Float> StepInputs<'_, T> {
    fn target_labels(&self, targets: &[usize]) -> Vec<DomainLabel> {
        targets.iter().map(|&k| self.gmm.components()[k].label.clone()).collect()
    }

    fn domain_targets(&self, labels: &[DomainLabel], n_logits: usize) -> Result<DomainTargets<T>> {
        DomainTargets::from_labels(labels, self.settings.domain_mode, n_logits)
    }
}

fn zero<T: Float>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Builds `L_D` on `tape`. Fakes are generated from the `d_*` samples.
pub fn discriminator_objective<T: Float>(
    nets: &Networks,
    tape: &mut Tape<T>,
    p: &Bound,
    inp: &StepInputs<'_, T>,
) -> Result<(LossTerms<Var>, Var)> {
    let x = tape.constant(inp.x.clone());
    let c = nets.content(tape, p, x);
    let z = tape.constant(rows_tensor(&inp.samples.d_z));
    let fake = nets.translate(tape, p, x, c, z);
    // fakes only feed the discriminator here
    let fake = tape.detach(fake);
    let (rf_real, logits_real) = nets.discriminate(tape, p, x);
    let (rf_fake, _) = nets.discriminate(tape, p, fake);
    let n_logits = tape.shape(logits_real)[1];
    let targets = inp.domain_targets(inp.labels, n_logits)?;
    let terms = LossTerms {
        gan_d: Some(objectives::adversarial_d(tape, rf_real, rf_fake)),
        dom_d: Some(objectives::domain(tape, logits_real, &targets)),
        ..Default::default()
    };
    let total = objectives::assemble_discriminator(tape, &terms)?;
    Ok((terms, total))
}

/// Builds `L_G` on `tape` from the `g_*` samples.
pub fn generator_objective<T: Float>(
    nets: &Networks,
    tape: &mut Tape<T>,
    p: &Bound,
    inp: &StepInputs<'_, T>,
) -> Result<(LossTerms<Var>, Var)> {
    let s = inp.settings;
    let variant = s.variant;
    let w = &s.weights;
    let x = tape.constant(inp.x.clone());

    let c = nets.content(tape, p, x);
    let (mu, logvar) = nets.attributes(tape, p, x);
    let zx = match &inp.samples.eps {
        Some(eps) if s.point_mode == PointMode::Reparameterized => {
            let half = tape.scale(logvar, T::of(0.5));
            let std = tape.exp(half);
            let noise = tape.mul_const(std, rows_tensor(eps));
            tape.add(mu, noise)
        }
        _ => mu,
    };

    let x_rec = nets.translate(tape, p, x, c, zx);
    let s_rec = objectives::l1(tape, x_rec, x);

    let z = tape.constant(rows_tensor(&inp.samples.g_z));
    let x_ab = nets.translate(tape, p, x, c, z);

    let c_rec = if nets.config().disentangled {
        let c_ab = nets.content(tape, p, x_ab);
        let l = objectives::l1(tape, c_ab, c);
        Some((l, c_ab))
    } else {
        None
    };

    let need_a = variant.uses_attr_rec() || variant.uses_iso();
    let a = need_a.then(|| nets.attributes(tape, p, x_ab).0);
    let a_rec = match a {
        Some(a) if variant.uses_attr_rec() => objectives::l1(tape, a, z),
        _ => zero(tape),
    };
    let iso = match a {
        Some(a) if variant.uses_iso() => {
            let z_prime = tape.constant(rows_tensor(&inp.samples.g_z_prime));
            let x_ab2 = nets.translate(tape, p, x, c, z_prime);
            let a2 = nets.attributes(tape, p, x_ab2).0;
            objectives::iso(tape, z, z_prime, a, a2)
        }
        _ => zero(tape),
    };

    let cyc = if variant.uses_cycle() {
        let c_ab = match c_rec {
            Some((_, c_ab)) => c_ab,
            None => nets.content(tape, p, x_ab),
        };
        let x_cyc = nets.translate(tape, p, x_ab, c_ab, zx);
        objectives::l1(tape, x_cyc, x)
    } else {
        zero(tape)
    };

    let (mu_t, sigma_t) = objectives::kl_targets::<T>(inp.gmm, inp.labels)?;
    let kl = objectives::kl(tape, mu, logvar, &mu_t, &sigma_t);

    let (rf, logits) = nets.discriminate(tape, p, x_ab);
    let gan_g = objectives::adversarial_g(tape, rf, s.adv_flavor);
    let n_logits = tape.shape(logits)[1];
    let targets = inp.domain_targets(&inp.target_labels(&inp.samples.g_targets), n_logits)?;
    let dom_g = objectives::domain(tape, logits, &targets);

    let perc = if w.lambda_perc != 0.0 {
        let ex = inp
            .extractor
            .ok_or_else(|| Error::config("lambda_perc > 0 requires a perceptual feature extractor"))?;
        Some(objectives::perceptual(tape, x, x_ab, ex))
    } else {
        None
    };

    let c_rec = match c_rec {
        Some((l, _)) => l,
        None => zero(tape),
    };
    let terms = LossTerms {
        gan_g: Some(gan_g),
        s_rec: Some(s_rec),
        c_rec: Some(c_rec),
        a_rec: Some(a_rec),
        cyc: Some(cyc),
        kl: Some(kl),
        iso: Some(iso),
        dom_g: Some(dom_g),
        perc,
        ..Default::default()
    };
    let total = objectives::assemble_generator(tape, &terms, w)?;
    Ok((terms, total))
}

fn read_terms<T: Float>(tape: &Tape<T>, t: &LossTerms<Var>) -> LossTerms {
    let r = |v: Option<Var>| v.map(|v| tape.value(v).item().f64());
    LossTerms {
        gan_d: r(t.gan_d),
        dom_d: r(t.dom_d),
        gan_g: r(t.gan_g),
        s_rec: r(t.s_rec),
        c_rec: r(t.c_rec),
        a_rec: r(t.a_rec),
        cyc: r(t.cyc),
        kl: r(t.kl),
        iso: r(t.iso),
        dom_g: r(t.dom_g),
        perc: r(t.perc),
    }
}

fn merge(d: LossTerms, g: LossTerms) -> LossTerms {
    LossTerms {
        gan_d: d.gan_d,
        dom_d: d.dom_d,
        ..g
    }
}

fn collect_grads<T: Float>(grads: &mut Grads<T>, bound: &Bound, indices: &[usize]) -> Vec<Option<Tensor<T>>> {
    indices.iter().map(|&i| grads.take(bound.vars()[i])).collect()
}

/// Complete optimization state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub settings: TrainSettings,
    pub model: Model<f32>,
    pub gmm: AttributeGmm,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub iteration: u64,
}

/// Stream of the parameter initialization, disjoint from step streams.
const INIT_STREAM: u64 = u64::MAX;

/// Per-iteration random stream: resuming at iteration `i` replays exactly
/// what an uninterrupted run would have drawn.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

impl TrainState {
    /// Fresh state; the variant is applied to both the networks and the prior.
    pub fn new(settings: TrainSettings, net: NetConfig, gmm: GmmSpec) -> Result<Self> {
        let errs = settings.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let gmm = AttributeGmm::new(settings.variant.apply_gmm(gmm))?;
        let net = settings.variant.apply_net(net);
        if net.code_dim != gmm.code_dim() {
            return Err(Error::config(format!(
                "network code_dim {} differs from the prior's {}",
                net.code_dim,
                gmm.code_dim()
            )));
        }
        if net.n_domains != gmm.label_width() {
            return Err(Error::config(format!(
                "network has {} domain logits, labels have {} bits",
                net.n_domains,
                gmm.label_width()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(INIT_STREAM);
        let model = Model::new(net, &mut rng)?;
        let opt_g = Adam::new(&model.params, Part::is_generator_side);
        let opt_d = Adam::new(&model.params, |p| !p.is_generator_side());
        Ok(Self {
            settings,
            model,
            gmm,
            opt_g,
            opt_d,
            iteration: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.settings.base_lr, self.iteration)
    }
}

/// Outcome of one step: the report and the random draws behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub report: LossReport,
    pub samples: StepSamples,
}

/// One discriminator update followed by one generator-side update.
///
/// On a non-finite loss or gradient the state is left as it was and a
/// numeric error carrying the partial report is returned.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &ImageBatch<f32>,
    labels: &[DomainLabel],
    rng: &mut R,
    extractor: Option<&dyn FeatureExtractor<f32>>,
) -> Result<StepRecord> {
    let n = batch.len();
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} images", labels.len())));
    }
    for l in labels {
        state.gmm.component_index(l)?;
    }
    let cfg = state.model.config();
    if batch.size() != (cfg.height, cfg.width) {
        return Err(Error::Shape(format!(
            "batch of {:?} images, model expects {}x{}",
            batch.size(),
            cfg.height,
            cfg.width
        )));
    }
    let s = &state.settings;
    let samples = StepSamples::draw(&state.gmm, n, s.mirror_prob, s.point_mode, rng)?;
    let x = mirror_items(batch.values(), &samples.flips);
    let lr = state.lr();
    let inputs = StepInputs {
        x: &x,
        labels,
        samples: &samples,
        gmm: &state.gmm,
        settings: &state.settings,
        extractor,
    };

    let backup_params = state.model.params.clone();
    let backup_opt_d = state.opt_d.clone();

    let mut tape = Tape::new();
    let p = state.model.params.bind(&mut tape, |part| !part.is_generator_side());
    let (d_terms, l_d) = discriminator_objective(&state.model.nets, &mut tape, &p, &inputs)?;
    let d_terms = read_terms(&tape, &d_terms);
    let l_d_value = tape.value(l_d).item().f64();
    let mut report = LossReport {
        iteration: state.iteration,
        terms: d_terms,
        l_d: l_d_value,
        l_g: f64::NAN,
    };
    if !l_d_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite L_D; report: {}", report.csv_row())));
    }
    let mut grads = tape.backward(l_d);
    let d_grads = collect_grads(&mut grads, &p, &state.opt_d.indices);
    drop(tape);
    state
        .opt_d
        .step(&mut state.model.params, &d_grads, lr)
        .map_err(|e| Error::Numeric(format!("{e}; report: {}", report.csv_row())))?;

    let mut tape = Tape::new();
    let p = state.model.params.bind(&mut tape, Part::is_generator_side);
    let built = generator_objective(&state.model.nets, &mut tape, &p, &inputs);
    let (g_terms, l_g) = match built {
        Ok(v) => v,
        Err(e) => {
            state.model.params = backup_params;
            state.opt_d = backup_opt_d;
            return Err(e);
        }
    };
    report.terms = merge(report.terms, read_terms(&tape, &g_terms));
    report.l_g = tape.value(l_g).item().f64();
    let failure = if !report.is_finite() {
        Some("non-finite loss".to_string())
    } else {
        let mut grads = tape.backward(l_g);
        let g_grads = collect_grads(&mut grads, &p, &state.opt_g.indices);
        drop(tape);
        state.opt_g.step(&mut state.model.params, &g_grads, lr).err().map(|e| e.to_string())
    };
    if let Some(why) = failure {
        state.model.params = backup_params;
        state.opt_d = backup_opt_d;
        return Err(Error::Numeric(format!("{why}; report: {}", report.csv_row())));
    }
    state.iteration += 1;
    Ok(StepRecord { report, samples })
}

/// Source of training batches.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn batch(&self, indices: &[usize]) -> Result<(ImageBatch<f32>, Vec<DomainLabel>)>;
}

/// Trains until `state.iteration == until`, calling `on_step` after each
/// step. Batches are drawn uniformly with replacement from the step's own
/// random stream, so the data order is a function of (seed, iteration).
pub fn train_until<S: BatchSource + ?Sized>(
    state: &mut TrainState,
    data: &S,
    until: u64,
    extractor: Option<&dyn FeatureExtractor<f32>>,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    while state.iteration < until {
        let mut rng = step_rng(state.settings.seed, state.iteration);
        let idx: Vec<usize> = (0..state.settings.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let (x, labels) = data.batch(&idx)?;
        let record = train_step(state, &x, &labels, &mut rng, extractor)?;
        on_step(state, &record)?;
    }
    Ok(())
}

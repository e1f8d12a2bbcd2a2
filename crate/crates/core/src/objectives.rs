//! Loss terms and the assembled discriminator / generator objectives.
//!
//! Every term is written once against the autodiff tape. The value-level
//! functions evaluate the same code on an f64 tape of constants.

use gmmunit_autodiff::{Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{AttributeGmm, DomainLabel};
use crate::nn::AttributePosterior;

const FEATURE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_s_rec: f64,
    pub lambda_cyc: f64,
    pub lambda_kl: f64,
    pub lambda_iso: f64,
    /// 0 disables the perceptual term; 0.1 is the usual value when enabled.
    pub lambda_perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s_rec: 10.0,
            lambda_cyc: 10.0,
            lambda_kl: 0.1,
            lambda_iso: 0.1,
            lambda_perc: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        [
            ("lambda_s_rec", self.lambda_s_rec),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_kl", self.lambda_kl),
            ("lambda_iso", self.lambda_iso),
            ("lambda_perc", self.lambda_perc),
        ]
        .into_iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(k, v)| format!("{k} must be finite and >= 0, got {v}"))
        .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvFlavor {
    Saturating,
    #[default]
    Nonsaturating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvSide {
    Discriminator,
    Generator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainMode {
    #[default]
    Categorical,
    Multilabel,
}

/// Individual loss values. `gan_d`/`dom_d` enter `L_D`, the rest `L_G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<V = f64> {
    pub gan_d: Option<V>,
    pub dom_d: Option<V>,
    pub gan_g: Option<V>,
    pub s_rec: Option<V>,
    pub c_rec: Option<V>,
    pub a_rec: Option<V>,
    pub cyc: Option<V>,
    pub kl: Option<V>,
    pub iso: Option<V>,
    pub dom_g: Option<V>,
    pub perc: Option<V>,
}

impl<V> Default for LossTerms<V> {
    fn default() -> Self {
        Self {
            gan_d: None,
            dom_d: None,
            gan_g: None,
            s_rec: None,
            c_rec: None,
            a_rec: None,
            cyc: None,
            kl: None,
            iso: None,
            dom_g: None,
            perc: None,
        }
    }
}

impl LossTerms<f64> {
    pub const NAMES: [&'static str; 11] = [
        "gan_d", "dom_d", "gan_g", "s_rec", "c_rec", "a_rec", "cyc", "kl", "iso", "dom_g", "perc",
    ];

    pub fn values(&self) -> [Option<f64>; 11] {
        [
            self.gan_d, self.dom_d, self.gan_g, self.s_rec, self.c_rec, self.a_rec, self.cyc, self.kl, self.iso,
            self.dom_g, self.perc,
        ]
    }

    pub fn all(v: f64) -> Self {
        Self {
            gan_d: Some(v),
            dom_d: Some(v),
            gan_g: Some(v),
            s_rec: Some(v),
            c_rec: Some(v),
            a_rec: Some(v),
            cyc: Some(v),
            kl: Some(v),
            iso: Some(v),
            dom_g: Some(v),
            perc: Some(v),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: LossTerms,
    pub l_d: f64,
    pub l_g: f64,
}

impl LossReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["iteration"];
        cols.extend(LossTerms::NAMES);
        cols.extend(["l_d", "l_g"]);
        cols.join(",")
    }

    /// Missing terms are written as empty fields.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.iteration.to_string()];
        cols.extend(
            self.terms
                .values()
                .iter()
                .map(|v| v.map(|x| format!("{x:e}")).unwrap_or_default()),
        );
        cols.push(format!("{:e}", self.l_d));
        cols.push(format!("{:e}", self.l_g));
        cols.join(",")
    }

    pub fn is_finite(&self) -> bool {
        self.l_d.is_finite() && self.l_g.is_finite() && self.terms.values().iter().flatten().all(|v| v.is_finite())
    }
}

/// Arithmetic used by the objective assembly, so plain numbers and tape
/// variables are summed in exactly the same order.
pub trait Accumulate<V: Copy> {
    fn add(&mut self, a: V, b: V) -> V;
    fn weight(&mut self, a: V, w: f64) -> V;
}

pub struct Scalar;

impl Accumulate<f64> for Scalar {
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn weight(&mut self, a: f64, w: f64) -> f64 {
        w * a
    }
}

impl<T: Float> Accumulate<Var> for Tape<T> {
    fn add(&mut self, a: Var, b: Var) -> Var {
        Tape::add(self, a, b)
    }
    fn weight(&mut self, a: Var, w: f64) -> Var {
        self.scale(a, T::of(w))
    }
}

fn need<V: Copy>(v: Option<V>, name: &str) -> Result<V> {
    v.ok_or_else(|| Error::config(format!("loss term {name} is missing")))
}

/// `L_D = L_GAN + L_dom^D`.
pub fn assemble_discriminator<V: Copy, A: Accumulate<V>>(acc: &mut A, t: &LossTerms<V>) -> Result<V> {
    let gan = need(t.gan_d, "gan_d")?;
    let dom = need(t.dom_d, "dom_d")?;
    Ok(acc.add(gan, dom))
}

/// `L_G`: adversarial, domain and content/attribute reconstruction at
/// weight 1, the rest weighted. Fractional weights are summed first.
pub fn assemble_generator<V: Copy, A: Accumulate<V>>(acc: &mut A, t: &LossTerms<V>, w: &LossWeights) -> Result<V> {
    let kl = need(t.kl, "kl")?;
    let iso = need(t.iso, "iso")?;
    let a = acc.weight(kl, w.lambda_kl);
    let b = acc.weight(iso, w.lambda_iso);
    let mut total = acc.add(a, b);
    if w.lambda_perc != 0.0 {
        let p = need(t.perc, "perc")?;
        let p = acc.weight(p, w.lambda_perc);
        total = acc.add(total, p);
    }
    for (v, name) in [
        (t.gan_g, "gan_g"),
        (t.c_rec, "c_rec"),
        (t.a_rec, "a_rec"),
        (t.dom_g, "dom_g"),
    ] {
        total = acc.add(total, need(v, name)?);
    }
    let s = acc.weight(need(t.s_rec, "s_rec")?, w.lambda_s_rec);
    total = acc.add(total, s);
    let c = acc.weight(need(t.cyc, "cyc")?, w.lambda_cyc);
    Ok(acc.add(total, c))
}

/// `(L_D, L_G)` from scalar term values.
pub fn total_objectives(terms: &LossTerms, w: &LossWeights) -> Result<(f64, f64)> {
    Ok((
        assemble_discriminator(&mut Scalar, terms)?,
        assemble_generator(&mut Scalar, terms, w)?,
    ))
}

// ---- tape-level terms -------------------------------------------------------

/// Mean absolute difference.
pub fn l1<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

/// `mean_i | ||a_i - a'_i||_1 - ||z_i - z'_i||_1 |`.
pub fn iso<T: Float>(tape: &mut Tape<T>, z: Var, z_prime: Var, a: Var, a_prime: Var) -> Var {
    let dz = tape.sub(z, z_prime);
    let dz = tape.abs(dz);
    let dz = tape.sum_rows(dz);
    let da = tape.sub(a, a_prime);
    let da = tape.abs(da);
    let da = tape.sum_rows(da);
    let gap = tape.sub(da, dz);
    let gap = tape.abs(gap);
    tape.mean(gap)
}

/// Batch mean of the closed-form KL between each posterior row and the
/// diagonal Gaussian `(mu_i, sigma_i)`; `mu`, `sigma` are `(n, d)`.
pub fn kl<T: Float>(tape: &mut Tape<T>, mean: Var, logvar: Var, mu: &Tensor<T>, sigma: &Tensor<T>) -> Var {
    let n = tape.shape(mean)[0];
    let inv_var = sigma.map(|s| T::one() / (s * s));
    let constant: T = sigma.data().iter().map(|&s| (s * s).ln() - T::one()).sum();
    let var = tape.exp(logvar);
    let var_term = tape.mul_const(var, inv_var.clone());
    let mu = tape.constant(mu.clone());
    let diff = tape.sub(mean, mu);
    let sq = tape.square(diff);
    let mean_term = tape.mul_const(sq, inv_var);
    let s = tape.add(var_term, mean_term);
    let s = tape.sub(s, logvar);
    let total = tape.sum(s);
    let total = tape.offset(total, constant);
    tape.scale(total, T::of(0.5 / n as f64))
}

/// Targets for [`kl`] from each row's own domain component.
pub fn kl_targets<T: Float>(gmm: &AttributeGmm, labels: &[DomainLabel]) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = gmm.code_dim();
    let mut mu = Vec::with_capacity(labels.len() * d);
    let mut sigma = Vec::with_capacity(labels.len() * d);
    for l in labels {
        let k = gmm.component_index(l)?;
        mu.extend(gmm.components()[k].mean.iter().map(|&v| T::of(v)));
        sigma.extend(gmm.kl_scale(k).iter().map(|&v| T::of(v)));
    }
    Ok((
        Tensor::from_vec(&[labels.len(), d], mu),
        Tensor::from_vec(&[labels.len(), d], sigma),
    ))
}

/// Class targets for categorical logits, bit matrix for multilabel ones.
#[derive(Clone, Debug, PartialEq)]
pub enum DomainTargets<T> {
    Classes(Vec<usize>),
    Bits(Tensor<T>),
}

impl<T: Float> DomainTargets<T> {
    pub fn from_labels(labels: &[DomainLabel], mode: DomainMode, n_logits: usize) -> Result<Self> {
        for l in labels {
            if l.bits.len() != n_logits || l.bits.iter().any(|&b| b > 1) {
                return Err(Error::Label(format!(
                    "label {:?} does not fit {n_logits} domain logits",
                    l.name
                )));
            }
        }
        match mode {
            DomainMode::Categorical => labels
                .iter()
                .map(|l| {
                    l.hot_index()
                        .ok_or_else(|| Error::Label(format!("label {:?} is not one-hot", l.name)))
                })
                .collect::<Result<_>>()
                .map(DomainTargets::Classes),
            DomainMode::Multilabel => {
                let bits = labels.iter().flat_map(|l| l.bits.iter().map(|&b| T::of(b as f64))).collect();
                Ok(DomainTargets::Bits(Tensor::from_vec(&[labels.len(), n_logits], bits)))
            }
        }
    }
}

/// Cross-entropy (categorical) or mean per-bit binary cross-entropy.
pub fn domain<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &DomainTargets<T>) -> Var {
    match targets {
        DomainTargets::Classes(c) => tape.cross_entropy(logits, c),
        DomainTargets::Bits(bits) => {
            // -[d ln s(x) + (1 - d) ln(1 - s(x))] = softplus(x) - d x
            let sp = tape.softplus(logits);
            let dx = tape.mul_const(logits, bits.clone());
            let per_bit = tape.sub(sp, dx);
            tape.mean(per_bit)
        }
    }
}

/// Discriminator side: `mean softplus(-real) + mean softplus(fake)`.
pub fn adversarial_d<T: Float>(tape: &mut Tape<T>, rf_real: Var, rf_fake: Var) -> Var {
    let neg = tape.scale(rf_real, -T::one());
    let a = tape.softplus(neg);
    let a = tape.mean(a);
    let b = tape.softplus(rf_fake);
    let b = tape.mean(b);
    tape.add(a, b)
}

/// Generator side: nonsaturating `mean -ln s(fake)` or saturating
/// `mean ln(1 - s(fake))`.
pub fn adversarial_g<T: Float>(tape: &mut Tape<T>, rf_fake: Var, flavor: AdvFlavor) -> Var {
    match flavor {
        AdvFlavor::Nonsaturating => {
            let neg = tape.scale(rf_fake, -T::one());
            let sp = tape.softplus(neg);
            tape.mean(sp)
        }
        AdvFlavor::Saturating => {
            let sp = tape.softplus(rf_fake);
            let m = tape.mean(sp);
            tape.scale(m, -T::one())
        }
    }
}

/// Fixed network whose intermediate activations define the perceptual
/// distance.
pub trait FeatureExtractor<T: Float> {
    fn id(&self) -> &str;
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var>;
}

/// Returns the image itself as the only feature map.
pub struct IdentityFeatures;

impl<T: Float> FeatureExtractor<T> for IdentityFeatures {
    fn id(&self) -> &str {
        "identity"
    }
    fn features(&self, _tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        vec![x]
    }
}

/// Mean over layers of the mean squared difference of instance-normalized
/// features.
pub fn perceptual<T: Float>(tape: &mut Tape<T>, a: Var, b: Var, extractor: &dyn FeatureExtractor<T>) -> Var {
    let fa = extractor.features(tape, a);
    let fb = extractor.features(tape, b);
    assert!(!fa.is_empty() && fa.len() == fb.len(), "extractor returned no features");
    let eps = T::of(FEATURE_NORM_EPS);
    let mut total = None;
    for (&x, &y) in fa.iter().zip(&fb) {
        let x = tape.instance_norm(x, eps);
        let y = tape.instance_norm(y, eps);
        let d = tape.sub(x, y);
        let d = tape.square(d);
        let m = tape.mean(d);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m),
        });
    }
    let total = total.expect("at least one layer");
    tape.scale(total, T::of(1.0 / fa.len() as f64))
}

// ---- value-level wrappers ---------------------------------------------------

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())))
    }
}

fn eval_pair<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(&mut Tape<f64>, Var, Var) -> Var) -> Result<f64> {
    same_shape(a, b)?;
    let mut tape = Tape::new();
    let a = tape.constant(a.cast());
    let b = tape.constant(b.cast());
    let out = f(&mut tape, a, b);
    Ok(tape.value(out).item())
}

pub fn loss_self_rec<T: Float>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    eval_pair(x, x_hat, l1)
}

pub fn loss_content_rec<T: Float>(c: &Tensor<T>, c_rec: &Tensor<T>) -> Result<f64> {
    eval_pair(c, c_rec, l1)
}

pub fn loss_attr_rec<T: Float>(z: &Tensor<T>, z_rec: &Tensor<T>) -> Result<f64> {
    eval_pair(z, z_rec, l1)
}

pub fn loss_cycle<T: Float>(x: &Tensor<T>, x_cyc: &Tensor<T>) -> Result<f64> {
    eval_pair(x, x_cyc, l1)
}

/// Rows are samples: all four tensors `(n, d)`.
pub fn loss_iso<T: Float>(z: &Tensor<T>, z_prime: &Tensor<T>, a: &Tensor<T>, a_prime: &Tensor<T>) -> Result<f64> {
    same_shape(z, z_prime)?;
    same_shape(z, a)?;
    same_shape(z, a_prime)?;
    if z.ndim() != 2 {
        return Err(Error::Shape(format!("codes must be (n, d), got {:?}", z.shape())));
    }
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = [z, z_prime, a, a_prime].iter().map(|t| tape.constant(t.cast())).collect();
    let out = iso(&mut tape, vars[0], vars[1], vars[2], vars[3]);
    Ok(tape.value(out).item())
}

pub fn loss_kl<T: Float>(p: &AttributePosterior<T>, labels: &[DomainLabel], gmm: &AttributeGmm) -> Result<f64> {
    same_shape(&p.mean, &p.logvar)?;
    if p.mean.ndim() != 2 || p.mean.shape()[0] != labels.len() || p.mean.shape()[1] != gmm.code_dim() {
        return Err(Error::Shape(format!(
            "posterior {:?} does not match {} labels of code length {}",
            p.mean.shape(),
            labels.len(),
            gmm.code_dim()
        )));
    }
    let (mu, sigma) = kl_targets::<f64>(gmm, labels)?;
    let mut tape = Tape::new();
    let m = tape.constant(p.mean.cast());
    let lv = tape.constant(p.logvar.cast());
    let out = kl(&mut tape, m, lv, &mu, &sigma);
    Ok(tape.value(out).item())
}

pub fn loss_domain<T: Float>(logits: &Tensor<T>, labels: &[DomainLabel], mode: DomainMode) -> Result<f64> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let targets = DomainTargets::<f64>::from_labels(labels, mode, logits.shape()[1])?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.cast());
    let out = domain(&mut tape, l, &targets);
    Ok(tape.value(out).item())
}

pub fn loss_adv<T: Float>(rf_real: &Tensor<T>, rf_fake: &Tensor<T>, side: AdvSide, flavor: AdvFlavor) -> Result<f64> {
    if !rf_real.all_finite() || !rf_fake.all_finite() {
        return Err(Error::Numeric("non-finite patch scores".into()));
    }
    let mut tape = Tape::<f64>::new();
    let fake = tape.constant(rf_fake.cast());
    let out = match side {
        AdvSide::Discriminator => {
            let real = tape.constant(rf_real.cast());
            adversarial_d(&mut tape, real, fake)
        }
        AdvSide::Generator => adversarial_g(&mut tape, fake, flavor),
    };
    Ok(tape.value(out).item())
}

pub fn loss_perceptual<T: Float>(
    x_a: &Tensor<T>,
    x_b: &Tensor<T>,
    extractor: Option<&dyn FeatureExtractor<f64>>,
) -> Result<f64> {
    let extractor = extractor.ok_or_else(|| Error::config("perceptual loss needs a feature extractor"))?;
    eval_pair(x_a, x_b, |tape, a, b| perceptual(tape, a, b, extractor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn l1_examples() {
        let x = Tensor::from_vec(&[2, 3], vec![0.1f64, -0.5, 0.3, 0.9, 0.0, -1.0]);
        for f in [loss_self_rec::<f64>, loss_content_rec, loss_attr_rec, loss_cycle] {
            assert_eq!(f(&x, &x).unwrap(), 0.0);
            let shifted = x.map(|v| v + 0.25);
            assert!((f(&x, &shifted).unwrap() - 0.25).abs() < 1e-15);
            assert!(matches!(f(&x, &Tensor::zeros(&[3, 2])), Err(Error::Shape(_))));
        }
    }

    #[test]
    fn uniform_categorical_is_ln3() {
        let labels: Vec<_> = (0..2).map(|i| DomainLabel::one_hot(i, 3, format!("d{i}"))).collect();
        let v = loss_domain(&Tensor::<f64>::zeros(&[2, 3]), &labels, DomainMode::Categorical).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
        let mut logits = Tensor::full(&[2, 3], -50.0);
        logits.data_mut()[0] = 50.0;
        logits.data_mut()[4] = 50.0;
        assert!(loss_domain(&logits, &labels, DomainMode::Categorical).unwrap() < 1e-20);
        let bad = [DomainLabel::from_bits(vec![1, 1, 0], "x"), labels[0].clone()];
        assert!(matches!(
            loss_domain(&logits, &bad, DomainMode::Categorical),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn adversarial_examples() {
        let real = Tensor::full(&[2, 1, 2, 2], 50.0f64);
        let fake = Tensor::full(&[2, 1, 2, 2], -50.0f64);
        let d = loss_adv(&real, &fake, AdvSide::Discriminator, AdvFlavor::Nonsaturating).unwrap();
        assert!(d < 1e-20);
        let zero = Tensor::zeros(&[2, 1, 2, 2]);
        let g = loss_adv(&real, &zero, AdvSide::Generator, AdvFlavor::Nonsaturating).unwrap();
        assert!((g - 2f64.ln()).abs() < 1e-15);
        let g = loss_adv(&real, &zero, AdvSide::Generator, AdvFlavor::Saturating).unwrap();
        assert!((g + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn iso_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_tensor(&[3, 4], &mut rng);
        let zp = rand_tensor(&[3, 4], &mut rng);
        let a = rand_tensor(&[3, 4], &mut rng);
        assert_eq!(loss_iso(&z, &z, &a, &a).unwrap(), 0.0);
        assert_eq!(loss_iso(&z, &zp, &z, &zp).unwrap(), 0.0);
    }

    fn gmm3() -> AttributeGmm {
        let names: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        AttributeGmm::new(GmmSpec::categorical(&names, 2, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn kl_examples() {
        let gmm = gmm3();
        let labels: Vec<_> = (0..2).map(|i| gmm.components()[i].label.clone()).collect();
        let mean: Vec<f64> = gmm.components()[..2].iter().flat_map(|c| c.mean.clone()).collect();
        let at = AttributePosterior {
            mean: Tensor::from_vec(&[2, 2], mean.clone()),
            logvar: Tensor::zeros(&[2, 2]),
        };
        assert!(loss_kl(&at, &labels, &gmm).unwrap().abs() < 1e-15);
        // one coordinate shifted by sigma: KL = 1/2
        let mut shifted = mean.clone();
        shifted[0] += 1.0;
        let p = AttributePosterior {
            mean: Tensor::from_vec(&[2, 2], shifted.clone()),
            logvar: Tensor::zeros(&[2, 2]),
        };
        let both = loss_kl(&p, &labels, &gmm).unwrap();
        assert!((both - 0.25).abs() < 1e-12);
        let single = |row: usize| {
            let q = AttributePosterior {
                mean: Tensor::from_vec(&[1, 2], shifted[row * 2..row * 2 + 2].to_vec()),
                logvar: Tensor::zeros(&[1, 2]),
            };
            loss_kl(&q, &labels[row..row + 1], &gmm).unwrap()
        };
        assert!((single(0) - 0.5).abs() < 1e-12);
        assert!((both - 0.5 * (single(0) + single(1))).abs() < 1e-15);
    }

    #[test]
    fn kl_under_deterministic_prior_uses_reference_scale() {
        let gmm = gmm3().deterministic().unwrap();
        let labels = vec![gmm.components()[0].label.clone()];
        let p = AttributePosterior {
            mean: Tensor::from_vec(&[1, 2], gmm.components()[0].mean.clone()),
            logvar: Tensor::zeros(&[1, 2]),
        };
        assert!(loss_kl(&p, &labels, &gmm).unwrap().abs() < 1e-15);
    }

    #[test]
    fn perceptual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 3, 4, 4], &mut rng);
        assert_eq!(loss_perceptual(&x, &x, Some(&IdentityFeatures)).unwrap(), 0.0);
        assert!(matches!(loss_perceptual(&x, &x, None), Err(Error::Config(_))));
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        let (ld, lg) = total_objectives(&LossTerms::all(1.0), &w).unwrap();
        assert_eq!(lg, 24.2);
        assert_eq!(ld, 2.0);
        assert_eq!(total_objectives(&LossTerms::all(0.0), &w).unwrap(), (0.0, 0.0));
        let mut t = LossTerms::all(1.0);
        t.cyc = Some(123.0);
        assert_eq!(total_objectives(&t, &w).unwrap().0, ld);
        t.kl = None;
        assert!(matches!(total_objectives(&t, &w), Err(Error::Config(_))));
        // an absent perceptual term is fine while its weight is zero
        let mut t = LossTerms::all(1.0);
        t.perc = None;
        assert_eq!(total_objectives(&t, &w).unwrap().1, 24.2);
        let on = LossWeights { lambda_perc: 0.1, ..w };
        assert!(total_objectives(&t, &on).is_err());
    }

    #[test]
    fn tape_and_scalar_assembly_agree() {
        let w = LossWeights {
            lambda_perc: 0.1,
            ..Default::default()
        };
        let vals = [0.3, 1.7, 0.2, 0.05, 0.9, 0.4, 0.11, 2.5, 0.6, 0.8, 0.33];
        let mut t = LossTerms::default();
        let slots = [
            &mut t.gan_d, &mut t.dom_d, &mut t.gan_g, &mut t.s_rec, &mut t.c_rec, &mut t.a_rec, &mut t.cyc,
            &mut t.kl, &mut t.iso, &mut t.dom_g, &mut t.perc,
        ];
        for (s, v) in slots.into_iter().zip(vals) {
            *s = Some(v);
        }
        let (ld, lg) = total_objectives(&t, &w).unwrap();
        let mut tape = Tape::<f64>::new();
        let tv = LossTerms {
            gan_d: t.gan_d.map(|v| tape.constant(Tensor::scalar(v))),
            dom_d: t.dom_d.map(|v| tape.constant(Tensor::scalar(v))),
            gan_g: t.gan_g.map(|v| tape.constant(Tensor::scalar(v))),
            s_rec: t.s_rec.map(|v| tape.constant(Tensor::scalar(v))),
            c_rec: t.c_rec.map(|v| tape.constant(Tensor::scalar(v))),
            a_rec: t.a_rec.map(|v| tape.constant(Tensor::scalar(v))),
            cyc: t.cyc.map(|v| tape.constant(Tensor::scalar(v))),
            kl: t.kl.map(|v| tape.constant(Tensor::scalar(v))),
            iso: t.iso.map(|v| tape.constant(Tensor::scalar(v))),
            dom_g: t.dom_g.map(|v| tape.constant(Tensor::scalar(v))),
            perc: t.perc.map(|v| tape.constant(Tensor::scalar(v))),
        };
        let d = assemble_discriminator(&mut tape, &tv).unwrap();
        let g = assemble_generator(&mut tape, &tv, &w).unwrap();
        assert_eq!(tape.value(d).item(), ld);
        assert_eq!(tape.value(g).item(), lg);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_empty());
        let bad = LossWeights {
            lambda_cyc: -1.0,
            lambda_kl: f64::NAN,
            ..Default::default()
        };
        assert_eq!(bad.validate().len(), 2);
    }

    #[test]
    fn report_csv_has_all_columns() {
        let r = LossReport {
            iteration: 3,
            terms: LossTerms::all(0.5),
            l_d: 1.0,
            l_g: 2.0,
        };
        let header_cols = LossReport::csv_header().split(',').count();
        assert_eq!(header_cols, 14);
        assert_eq!(r.csv_row().split(',').count(), header_cols);
    }

    proptest! {
        #[test]
        fn terms_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&[2, 5], &mut rng);
            let b = rand_tensor(&[2, 5], &mut rng);
            let c = rand_tensor(&[2, 5], &mut rng);
            let d = rand_tensor(&[2, 5], &mut rng);
            prop_assert!(loss_self_rec(&a, &b).unwrap() >= 0.0);
            prop_assert!(loss_iso(&a, &b, &c, &d).unwrap() >= 0.0);
            let labels: Vec<_> = (0..2).map(|i| DomainLabel::one_hot(i, 5, "x")).collect();
            prop_assert!(loss_domain(&a, &labels, DomainMode::Categorical).unwrap() >= 0.0);
            let bits: Vec<_> = (0..2)
                .map(|_| DomainLabel::from_bits((0..5).map(|_| rng.random_range(0..2u8)).collect(), "m"))
                .collect();
            prop_assert!(loss_domain(&a, &bits, DomainMode::Multilabel).unwrap() >= 0.0);
            let gmm = gmm3();
            let p = AttributePosterior { mean: rand_tensor(&[2, 2], &mut rng), logvar: rand_tensor(&[2, 2], &mut rng) };
            let ls: Vec<_> = (0..2).map(|i| gmm.components()[i].label.clone()).collect();
            prop_assert!(loss_kl(&p, &ls, &gmm).unwrap() >= -1e-12);
        }
    }
}

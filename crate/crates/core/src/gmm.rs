//! Gaussian mixture over attribute codes.
//!
//! Every domain owns one mixture component. Component means sit on the
//! vertices of a regular simplex so that all domains are equidistant, and
//! each component is spherical. A factorized mode models multi-attribute
//! labels: the code is split into one block per attribute and each block
//! carries a two-component (off/on) sub-mixture, so that every legal
//! combination of attribute bits is itself a component of the full mixture.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean of a component's point in attribute space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCode(pub Vec<f64>);

impl AttributeCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GmmMode {
    #[default]
    Categorical,
    Factorized,
}

/// Binary attribute vector identifying a domain or attribute combination.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DomainLabel {
    pub bits: Vec<u8>,
    pub name: String,
}

impl DomainLabel {
    pub fn one_hot(index: usize, n: usize, name: impl Into<String>) -> Self {
        let mut bits = vec![0; n];
        bits[index] = 1;
        Self {
            bits,
            name: name.into(),
        }
    }

    pub fn from_bits(bits: Vec<u8>, name: impl Into<String>) -> Self {
        Self {
            bits,
            name: name.into(),
        }
    }

    /// Index of the single set bit, if exactly one is set.
    pub fn hot_index(&self) -> Option<usize> {
        let mut set = self.bits.iter().enumerate().filter(|(_, &b)| b != 0);
        match (set.next(), set.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }
}

/// Serializable description of a mixture prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    /// Per-block code dimension `Z`.
    pub z_dim: usize,
    pub mode: GmmMode,
    /// Norm of the simplex vertices.
    pub radius: f64,
    /// Categorical: one scale per domain. Factorized: one per attribute.
    pub scales: Vec<f64>,
    /// Mixture weights over components; empty means uniform.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// Categorical: domain names. Factorized: attribute names.
    pub attributes: Vec<String>,
    /// Factorized only: groups of attribute names of which exactly one is set.
    #[serde(default)]
    pub exclusive_groups: Vec<Vec<String>>,
    /// Zero-variance ablation: sampling returns component means.
    #[serde(default)]
    pub deterministic: bool,
}

impl GmmSpec {
    pub fn categorical(domains: &[String], z_dim: usize, radius: f64, scale: f64) -> Self {
        Self {
            z_dim,
            mode: GmmMode::Categorical,
            radius,
            scales: vec![scale; domains.len()],
            weights: Vec::new(),
            attributes: domains.to_vec(),
            exclusive_groups: Vec::new(),
            deterministic: false,
        }
    }

    pub fn factorized(attributes: &[String], z_dim: usize, radius: f64, scale: f64) -> Self {
        Self {
            z_dim,
            mode: GmmMode::Factorized,
            radius,
            scales: vec![scale; attributes.len()],
            weights: Vec::new(),
            attributes: attributes.to_vec(),
            exclusive_groups: Vec::new(),
            deterministic: false,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("gmm spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("gmm spec: {e}")))
    }

    /// Number of style blocks `C` in the full code.
    pub fn blocks(&self) -> usize {
        match self.mode {
            GmmMode::Categorical => 1,
            GmmMode::Factorized => self.attributes.len(),
        }
    }

    pub fn code_dim(&self) -> usize {
        self.blocks() * self.z_dim
    }
}

/// Location and per-coordinate scale of one component of the full code.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub label: DomainLabel,
}

/// The mixture prior `p(z) = sum_k w_k N(z; mu_k, diag(s_k^2))`.
#[derive(Clone, Debug)]
pub struct AttributeGmm {
    spec: GmmSpec,
    components: Vec<Component>,
    weights: Vec<f64>,
    /// Scales used for the KL target; equal to the sampling scales except in
    /// the deterministic ablation, where sampling scales are zero.
    kl_scales: Vec<Vec<f64>>,
}

/// Vertices of a regular simplex centred at the origin, each of norm `radius`.
///
/// Built from the Helmert basis of the hyperplane orthogonal to `(1, .., 1)`
/// in `R^K`: vertex `i` has coordinates `h_j[i]`, `j = 1..K-1`, padded to `z`.
pub fn build_simplex_means(k: usize, z: usize, radius: f64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Argument("simplex needs at least one vertex".into()));
    }
    if k > z + 1 {
        return Err(Error::Dimension(format!(
            "{k} equidistant means do not fit in {z} dimensions (need K <= Z + 1)"
        )));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Argument(format!("radius must be positive, got {radius}")));
    }
    if k == 1 {
        return Ok(vec![vec![0.0; z]]);
    }
    let means = (0..k)
        .map(|i| {
            let mut v = vec![0.0; z];
            for (j, slot) in v.iter_mut().enumerate().take(k - 1) {
                let j1 = j + 1;
                let h = if i < j1 {
                    1.0
                } else if i == j1 {
                    -(j1 as f64)
                } else {
                    0.0
                };
                // h / sqrt(j (j + 1)) rescaled from norm sqrt(1 - 1/K) to `radius`
                *slot = h * radius * (k as f64 / ((j1 * (j1 + 1) * (k - 1)) as f64)).sqrt();
            }
            v
        })
        .collect();
    Ok(means)
}

impl AttributeGmm {
    pub fn new(spec: GmmSpec) -> Result<Self> {
        let mut problems = Vec::new();
        if spec.z_dim == 0 {
            problems.push("z_dim must be positive".to_string());
        }
        if spec.attributes.is_empty() {
            problems.push("at least one domain/attribute is required".to_string());
        }
        let expected_scales = spec.attributes.len();
        if spec.scales.len() != expected_scales {
            problems.push(format!(
                "expected {expected_scales} scales, got {}",
                spec.scales.len()
            ));
        }
        if spec.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            problems.push("scales must be positive and finite".to_string());
        }
        if spec.mode == GmmMode::Categorical && !spec.exclusive_groups.is_empty() {
            problems.push("exclusive groups only apply to factorized mode".to_string());
        }
        for group in &spec.exclusive_groups {
            for name in group {
                if !spec.attributes.contains(name) {
                    problems.push(format!("exclusive group names unknown attribute {name:?}"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }

        let components = match spec.mode {
            GmmMode::Categorical => {
                let k = spec.attributes.len();
                let means = build_simplex_means(k, spec.z_dim, spec.radius)?;
                means
                    .into_iter()
                    .enumerate()
                    .map(|(i, mean)| Component {
                        scale: vec![spec.scales[i]; spec.z_dim],
                        mean,
                        label: DomainLabel::one_hot(i, k, spec.attributes[i].clone()),
                    })
                    .collect::<Vec<_>>()
            }
            GmmMode::Factorized => {
                let n = spec.attributes.len();
                if n > 16 {
                    return Err(Error::config("factorized mode supports at most 16 attributes"));
                }
                (0u32..(1 << n))
                    .map(|mask| (0..n).map(|a| ((mask >> a) & 1) as u8).collect::<Vec<_>>())
                    .filter(|bits| exclusivity_ok(&spec, bits))
                    .map(|bits| {
                        let name = label_name(&spec.attributes, &bits);
                        let label = DomainLabel::from_bits(bits, name);
                        let (mean, scale) = factorized_params(&spec, &label.bits);
                        Component { mean, scale, label }
                    })
                    .collect()
            }
        };

        let weights = if spec.weights.is_empty() {
            vec![1.0 / components.len() as f64; components.len()]
        } else {
            spec.weights.clone()
        };
        if weights.len() != components.len() {
            return Err(Error::config(format!(
                "expected {} weights, got {}",
                components.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("weights must be nonnegative and sum to 1"));
        }

        let kl_scales = components.iter().map(|c| c.scale.clone()).collect();
        let mut gmm = Self {
            spec,
            components,
            weights,
            kl_scales,
        };
        if gmm.spec.deterministic {
            for c in &mut gmm.components {
                c.scale.iter_mut().for_each(|s| *s = 0.0);
            }
        }
        Ok(gmm)
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn code_dim(&self) -> usize {
        self.spec.code_dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_deterministic(&self) -> bool {
        self.spec.deterministic
    }

    /// Copy of this mixture with every sampling scale set to zero.
    pub fn deterministic(&self) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.deterministic = true;
        Self::new(spec)
    }

    /// Number of bits in a label of this mixture.
    pub fn label_width(&self) -> usize {
        self.spec.attributes.len()
    }

    /// `p(z)`; rejects zero-scale mixtures.
    pub fn density(&self, z: &AttributeCode) -> Result<f64> {
        Ok(self.log_density(z)?.exp())
    }

    pub fn log_density(&self, z: &AttributeCode) -> Result<f64> {
        if z.len() != self.code_dim() {
            return Err(Error::Argument(format!(
                "code has length {}, mixture expects {}",
                z.len(),
                self.code_dim()
            )));
        }
        if self.spec.deterministic {
            return Err(Error::DegenerateDensity);
        }
        let logs: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, &w)| {
                let lp: f64 = z
                    .0
                    .iter()
                    .zip(&c.mean)
                    .zip(&c.scale)
                    .map(|((&x, &m), &s)| {
                        let d = (x - m) / s;
                        -0.5 * d * d - s.ln() - 0.5 * (2.0 * PI).ln()
                    })
                    .sum();
                w.ln() + lp
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }

    /// Draw from component `k`. The standard-normal draws are consumed even
    /// for zero-scale components so that random streams stay aligned across
    /// the stochastic and deterministic configurations.
    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<AttributeCode> {
        let c = self.components.get(k).ok_or_else(|| {
            Error::Argument(format!("component {k} out of range ({})", self.components.len()))
        })?;
        let values = c
            .mean
            .iter()
            .zip(&c.scale)
            .map(|(&m, &s)| {
                let eps: f64 = StandardNormal.sample(rng);
                if s == 0.0 {
                    m
                } else {
                    m + s * eps
                }
            })
            .collect();
        Ok(AttributeCode(values))
    }

    pub fn sample_mixture<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, AttributeCode)> {
        let k = if self.components.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if w > 0.0 && u < acc {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave u >= acc; fall back to the last weighted component
            pick.unwrap_or_else(|| self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        };
        Ok((k, self.sample_component(k, rng)?))
    }

    /// Index of the component a label selects.
    pub fn component_index(&self, d: &DomainLabel) -> Result<usize> {
        if d.bits.len() != self.label_width() {
            return Err(Error::Label(format!(
                "label {:?} has {} bits, mixture expects {}",
                d.name,
                d.bits.len(),
                self.label_width()
            )));
        }
        if d.bits.iter().any(|&b| b > 1) {
            return Err(Error::Label(format!("label {:?} is not binary", d.name)));
        }
        match self.spec.mode {
            GmmMode::Categorical => d
                .hot_index()
                .ok_or_else(|| Error::Label(format!("label {:?} must have exactly one bit set", d.name))),
            GmmMode::Factorized => {
                if !exclusivity_ok(&self.spec, &d.bits) {
                    return Err(Error::Label(format!(
                        "label {:?} violates an exclusivity group",
                        d.name
                    )));
                }
                Ok(self
                    .components
                    .iter()
                    .position(|c| c.label.bits == d.bits)
                    .expect("every legal label is enumerated"))
            }
        }
    }

    /// Mean and per-coordinate scale of the component for label `d`.
    pub fn domain_component(&self, d: &DomainLabel) -> Result<&Component> {
        Ok(&self.components[self.component_index(d)?])
    }

    /// Per-coordinate scale used as the KL target for component `k`.
    pub fn kl_scale(&self, k: usize) -> &[f64] {
        &self.kl_scales[k]
    }

    pub fn label_by_name(&self, name: &str) -> Option<&DomainLabel> {
        self.components.iter().map(|c| &c.label).find(|l| l.name == name)
    }
}

fn exclusivity_ok(spec: &GmmSpec, bits: &[u8]) -> bool {
    spec.exclusive_groups.iter().all(|group| {
        group
            .iter()
            .filter(|name| {
                let i = spec.attributes.iter().position(|a| a == *name).expect("validated");
                bits[i] == 1
            })
            .count()
            == 1
    })
}

fn label_name(attributes: &[String], bits: &[u8]) -> String {
    let on: Vec<&str> = attributes
        .iter()
        .zip(bits)
        .filter(|(_, &b)| b == 1)
        .map(|(a, _)| a.as_str())
        .collect();
    if on.is_empty() {
        "none".to_string()
    } else {
        on.join("+")
    }
}

fn factorized_params(spec: &GmmSpec, bits: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let z = spec.z_dim;
    let mut mean = Vec::with_capacity(bits.len() * z);
    let mut scale = Vec::with_capacity(bits.len() * z);
    for (a, &bit) in bits.iter().enumerate() {
        let mut block = vec![0.0; z];
        block[0] = if bit == 1 { spec.radius } else { -spec.radius };
        mean.extend(block);
        scale.extend(std::iter::repeat_n(spec.scales[a], z));
    }
    (mean, scale)
}

/// Closed-form `KL(N(m, diag(e^logv)) || N(mu, sigma^2 I))`.
pub fn kl_diag_gaussian(m: &[f64], logv: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    kl_diag_gaussian_blockwise(m, logv, mu, &vec![sigma; mu.len()])
}

/// As [`kl_diag_gaussian`] with one target scale per coordinate.
pub fn kl_diag_gaussian_blockwise(m: &[f64], logv: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if m.len() != logv.len() || m.len() != mu.len() || m.len() != sigma.len() {
        return Err(Error::Argument("kl: length mismatch".into()));
    }
    let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
    if !finite(m) || !finite(logv) || !finite(mu) {
        return Err(Error::Argument("kl: non-finite input".into()));
    }
    if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Argument("kl: sigma must be positive".into()));
    }
    let total: f64 = m
        .iter()
        .zip(logv)
        .zip(mu)
        .zip(sigma)
        .map(|(((&m, &lv), &mu), &s)| {
            let s2 = s * s;
            lv.exp() / s2 + (mu - m) * (mu - m) / s2 - 1.0 + s2.ln() - lv
        })
        .sum();
    Ok(0.5 * total)
}

/// Result of a linear walk between two codes.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub code: AttributeCode,
    /// `t` left `[0, 1]`: the code lies outside the segment.
    pub extrapolated: bool,
}

/// `(1 - t) z_a + t z_b`; the endpoints are returned exactly.
pub fn interpolate_codes(z_a: &AttributeCode, z_b: &AttributeCode, t: f64) -> Result<Interpolation> {
    if z_a.len() != z_b.len() {
        return Err(Error::Argument(format!(
            "interpolation endpoints differ in length ({} vs {})",
            z_a.len(),
            z_b.len()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Argument("interpolation parameter must be finite".into()));
    }
    let code = if t == 0.0 {
        z_a.clone()
    } else if t == 1.0 {
        z_b.clone()
    } else {
        AttributeCode(z_a.0.iter().zip(&z_b.0).map(|(&a, &b)| (1.0 - t) * a + t * b).collect())
    };
    let extrapolated = !(0.0..=1.0).contains(&t);
    if extrapolated {
        log::debug!("interpolation parameter {t} extrapolates beyond the endpoints");
    }
    Ok(Interpolation { code, extrapolated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn pairwise(means: &[Vec<f64>]) -> Vec<f64> {
        let mut d = Vec::new();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                d.push(means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
            }
        }
        d
    }

    #[test]
    fn simplex_examples() {
        assert_eq!(build_simplex_means(1, 4, 1.0).unwrap(), vec![vec![0.0; 4]]);
        assert_eq!(build_simplex_means(2, 1, 1.0).unwrap(), vec![vec![1.0], vec![-1.0]]);
        let tri = build_simplex_means(3, 2, 1.0).unwrap();
        // brute-force pairwise distance matrix
        for d in pairwise(&tri) {
            assert!((d - 1.732_050_8).abs() < 1e-7, "{d}");
        }
    }

    #[test]
    fn simplex_errors() {
        assert!(matches!(build_simplex_means(4, 2, 1.0), Err(Error::Dimension(_))));
        assert!(matches!(build_simplex_means(2, 2, 0.0), Err(Error::Argument(_))));
        assert!(matches!(build_simplex_means(2, 2, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn simplex_norm_and_centroid() {
        for z in 1..=8 {
            for k in 2..=z + 1 {
                let m = build_simplex_means(k, z, 2.5).unwrap();
                for v in &m {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((n - 2.5).abs() < 1e-12);
                }
                for i in 0..z {
                    let c: f64 = m.iter().map(|v| v[i]).sum::<f64>() / k as f64;
                    assert!(c.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn standard_normal_peak() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(1), 1, 1.0, 1.0)).unwrap();
        let p = gmm.density(&AttributeCode(vec![0.0])).unwrap();
        assert!((p - 0.398_942_280_401_432_7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_component_density() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(2), 3, 1.0, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let a = gmm.density(&AttributeCode(z)).unwrap();
            let b = gmm.density(&AttributeCode(neg)).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }
    }

    #[test]
    fn density_errors() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(2), 2, 1.0, 0.5)).unwrap();
        assert!(matches!(gmm.density(&AttributeCode(vec![0.0])), Err(Error::Argument(_))));
        let det = gmm.deterministic().unwrap();
        assert!(matches!(det.density(&AttributeCode(vec![0.0, 0.0])), Err(Error::DegenerateDensity)));
    }

    #[test]
    fn deterministic_sampling_returns_mean() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(3), 4, 1.0, 0.5))
            .unwrap()
            .deterministic()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..3 {
            assert_eq!(gmm.sample_component(k, &mut rng).unwrap().0, gmm.components()[k].mean);
        }
    }

    #[test]
    fn sampling_is_reproducible_and_checked() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(3), 4, 1.0, 0.5)).unwrap();
        let a = gmm.sample_component(1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gmm.sample_component(1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(gmm.sample_component(3, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn mixture_respects_point_mass_weights() {
        let mut spec = GmmSpec::categorical(&names(3), 2, 1.0, 0.5);
        spec.weights = vec![1.0, 0.0, 0.0];
        let gmm = AttributeGmm::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert_eq!(gmm.sample_mixture(&mut rng).unwrap().0, 0);
        }
    }

    #[test]
    fn single_component_mixture_matches_component_draw() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(1), 3, 1.0, 0.7)).unwrap();
        let (k, a) = gmm.sample_mixture(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gmm.sample_component(0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(k, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = GmmSpec::categorical(&names(3), 2, 1.0, 0.5);
        spec.weights = vec![0.5, 0.5, 0.5];
        assert!(AttributeGmm::new(spec).is_err());
        let mut spec = GmmSpec::categorical(&names(3), 2, 1.0, 0.5);
        spec.scales[1] = 0.0;
        assert!(AttributeGmm::new(spec).is_err());
        // four equidistant means need three dimensions
        assert!(AttributeGmm::new(GmmSpec::categorical(&names(4), 2, 1.0, 0.5)).is_err());
    }

    #[test]
    fn kl_identity_and_known_value() {
        let mu = [0.3, -0.2];
        let lv = [(0.25f64).ln(), (0.25f64).ln()];
        assert!(kl_diag_gaussian(&mu, &lv, &mu, 0.5).unwrap().abs() < 1e-15);
        assert!((kl_diag_gaussian(&[0.0], &[0.0], &[1.0], 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diag_gaussian(&[0.0], &[0.0], &[1.0], 0.0).is_err());
        assert!(kl_diag_gaussian(&[f64::NAN], &[0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn categorical_lookup() {
        let gmm = AttributeGmm::new(GmmSpec::categorical(&names(3), 2, 1.0, 0.5)).unwrap();
        let c = gmm.domain_component(&DomainLabel::one_hot(2, 3, "d2")).unwrap();
        assert_eq!(c.mean, gmm.components()[2].mean);
        assert!(gmm.domain_component(&DomainLabel::from_bits(vec![1, 1, 0], "x")).is_err());
    }

    #[test]
    fn factorized_all_off_concatenates_off_means() {
        let gmm = AttributeGmm::new(GmmSpec::factorized(&names(3), 2, 1.0, 0.5)).unwrap();
        let c = gmm.domain_component(&DomainLabel::from_bits(vec![0, 0, 0], "none")).unwrap();
        assert_eq!(c.mean, vec![-1.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn exclusivity_groups() {
        let mut spec = GmmSpec::factorized(&names(3), 2, 1.0, 0.5);
        spec.exclusive_groups = vec![vec!["d0".into(), "d1".into()]];
        let gmm = AttributeGmm::new(spec).unwrap();
        // 2 choices for the group times 2 for d2
        assert_eq!(gmm.num_components(), 4);
        assert!(matches!(
            gmm.domain_component(&DomainLabel::from_bits(vec![1, 1, 0], "bad")),
            Err(Error::Label(_))
        ));
        assert!(gmm.domain_component(&DomainLabel::from_bits(vec![0, 1, 1], "ok")).is_ok());
    }

    #[test]
    fn interpolation_examples() {
        let a = AttributeCode(vec![0.0; 3]);
        let b = AttributeCode(vec![2.0; 3]);
        assert_eq!(interpolate_codes(&a, &b, 0.0).unwrap().code, a);
        assert_eq!(interpolate_codes(&a, &b, 1.0).unwrap().code, b);
        let mid = interpolate_codes(&a, &b, 0.5).unwrap();
        assert_eq!(mid.code.0, vec![1.0; 3]);
        assert!(!mid.extrapolated);
        let far = interpolate_codes(&a, &b, 1.5).unwrap();
        assert!(far.extrapolated);
        for v in far.code.0 {
            assert!((v - (2.0 + 0.5 * (2.0 - 0.0))).abs() < 1e-15);
        }
        assert!(interpolate_codes(&a, &AttributeCode(vec![0.0]), 0.5).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let mut spec = GmmSpec::factorized(&names(3), 4, 0.123_456_789_012_345_67, 0.1 + 0.2);
        spec.exclusive_groups = vec![vec!["d0".into(), "d2".into()]];
        spec.weights = vec![0.25; 4];
        let text = spec.to_toml();
        let back = GmmSpec::from_toml(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.radius.to_bits(), spec.radius.to_bits());
        assert_eq!(back.to_toml(), text);
    }
}

use gmmunit_autodiff::{Float, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Which network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    ContentEncoder,
    AttributeEncoder,
    Generator,
    Discriminator,
}

impl Part {
    pub const ALL: [Part; 4] = [
        Part::ContentEncoder,
        Part::AttributeEncoder,
        Part::Generator,
        Part::Discriminator,
    ];

    pub fn module_name(self) -> &'static str {
        match self {
            Part::ContentEncoder => "content_encoder",
            Part::AttributeEncoder => "attribute_encoder",
            Part::Generator => "generator",
            Part::Discriminator => "discriminator",
        }
    }

    pub fn from_module_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.module_name() == name)
    }

    /// Everything updated by the generator-side optimizer.
    pub fn is_generator_side(self) -> bool {
        self != Part::Discriminator
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Zero-mean Gaussian with standard deviation `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamDecl {
    pub part: Part,
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations while a network layout is assembled.
#[derive(Default)]
pub(crate) struct ParamBuilder {
    pub decls: Vec<ParamDecl>,
}

impl ParamBuilder {
    pub fn declare(&mut self, part: Part, name: String, shape: &[usize], init: Init) -> ParamId {
        debug_assert!(
            !self.decls.iter().any(|d| d.part == part && d.name == name),
            "duplicate parameter {name}"
        );
        self.decls.push(ParamDecl {
            part,
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.decls.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub part: Part,
    pub name: String,
    pub value: Tensor<T>,
}

/// All trainable tensors of a model, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamSet<T> {
    pub(crate) fn initialize<R: Rng + ?Sized>(decls: &[ParamDecl], rng: &mut R) -> Self {
        let entries = decls
            .iter()
            .map(|d| {
                let n: usize = d.shape.iter().product();
                let data = match d.init {
                    Init::FanIn { fan_in, gain } => {
                        let std = gain / (fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| {
                                let e: f64 = StandardNormal.sample(rng);
                                T::of(e * std)
                            })
                            .collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                ParamEntry {
                    part: d.part,
                    name: d.name.clone(),
                    value: Tensor::from_vec(&d.shape, data),
                }
            })
            .collect();
        Self { entries }
    }

    pub fn from_entries(entries: Vec<ParamEntry<T>>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].value
    }

    pub fn count_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    part: e.part,
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Indices of the entries owned by parts selected by `filter`.
    pub fn indices(&self, filter: impl Fn(Part) -> bool) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| filter(self.entries[i].part)).collect()
    }

    /// Records every parameter on `tape`; parts for which `trainable` is
    /// false become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(Part) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable(e.part) {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter handles on one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

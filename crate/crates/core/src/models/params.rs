use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::tensorcore::{Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// uniform(−1/√fan_in, 1/√fan_in), fan_in = rows
    Uniform,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, rows: usize, cols: usize, init: Init) -> Self {
        Self { name, rows, cols, init }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linear(out: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec::new(format!("{name}.weight"), d_in, d_out, Init::Uniform));
    out.push(ParamSpec::new(format!("{name}.bias"), 1, d_out, Init::Zeros));
}

fn norm(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    out.push(ParamSpec::new(format!("{name}.gain"), 1, d, Init::Ones));
    out.push(ParamSpec::new(format!("{name}.bias"), 1, d, Init::Zeros));
}

/// Names of the fusion blocks for a variant, in order.
pub fn block_names(cfg: &ModelConfig) -> &'static [&'static str] {
    match cfg.variant {
        super::Variant::A => &["fusion"],
        super::Variant::B => &["stage1", "stage2"],
    }
}

/// Every trainable tensor, in the fixed order used for checkpoints.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.hidden_dim;
    let mut out = Vec::new();
    linear(&mut out, "image_proj", cfg.image_dim, h);
    linear(&mut out, "question_proj", cfg.question_dim, h);
    linear(&mut out, "knowledge_proj", cfg.knowledge_dim, h);
    for block in block_names(cfg) {
        for p in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{block}.attn.{p}"), h, h);
        }
        norm(&mut out, &format!("{block}.norm1"), h);
        linear(&mut out, &format!("{block}.mlp1"), h, cfg.ffn_dim);
        linear(&mut out, &format!("{block}.mlp2"), cfg.ffn_dim, h);
        norm(&mut out, &format!("{block}.norm2"), h);
    }
    linear(&mut out, "classifier", cfg.classifier_in(), cfg.answer_vocab_size);
    out
}

/// Named parameter tensors in declared order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization. Values are drawn in `f32` so that models built
    /// in either precision start from identical numbers.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layout(cfg);
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.rows, s.cols),
                Init::Ones => Tensor::filled(s.rows, s.cols, T::one()),
                Init::Uniform => {
                    let bound = 1.0 / (s.rows as f32).sqrt();
                    Tensor::from_fn(s.rows, s.cols, |_, _| {
                        T::from_f64(rng.random_range(-bound..=bound) as f64)
                    })
                }
            };
            tensors.push(t);
        }
        Ok(Self::from_parts(specs.into_iter().map(|s| s.name).collect(), tensors))
    }

    /// Wraps tensors that follow `layout(cfg)`.
    pub fn from_layout(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        let specs = layout(cfg);
        if specs.len() != tensors.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if t.shape() != [s.rows, s.cols] {
                return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                    op: "from_layout",
                    left: [s.rows, s.cols],
                    right: t.shape(),
                }));
            }
        }
        Ok(Self::from_parts(specs.into_iter().map(|s| s.name).collect(), tensors))
    }

    fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams::from_parts(self.names.clone(), self.tensors.iter().map(Tensor::cast).collect())
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundParams, TensorError> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundParams {
            vars,
            index: self.index.clone(),
        })
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
    }

    /// Handles in declared order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

use rand::Rng;

use crate::tensor::{Float, Graph, ParamId, Tensor, Var};

/// What a stored tensor is used for; drives optimizer treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Conv/linear weights: trained, weight-decayed.
    Weight,
    /// Biases and norm affine terms: trained, no decay.
    Bias,
    /// Running statistics: saved and loaded, never trained.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
}

/// Named tensors of a model, in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Float> {
    params: Vec<Param<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, role });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        role: ParamRole,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("param shape"), role)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars (excludes running statistics).
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role != ParamRole::Buffer)
            .map(|p| p.value.numel())
            .sum()
    }

    /// The graph leaf for `id`, created and bound on first use.
    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = g.param_var(id) {
            return v;
        }
        let p = &self.params[id.0];
        let v = g.input(p.value.clone(), p.role != ParamRole::Buffer);
        g.bind_param(id, v);
        v
    }

    /// Applies running-stat updates recorded during a training pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.params[id.0].value = t;
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    role: p.role,
                })
                .collect(),
        }
    }
}

//! Named parameters and the building blocks shared by every model family.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bcos::bcos_layer_on_tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named, trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            role,
            value: value.with_requires_grad(),
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Bound { tape, vars }
    }

    /// Adds the gradients held by `tape` into each parameter's buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = bound.tape.grad(v)? {
                p.value.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }
}

/// A [`ParamStore`] recorded on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter in store order; zeros where none reached.
    pub fn grads(&self) -> Result<Vec<Vec<f64>>> {
        self.vars
            .iter()
            .map(|&v| {
                Ok(match self.tape.grad(v)? {
                    Some(g) => g.into_data(),
                    None => vec![0.0; self.tape.value(v)?.len()],
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Linear,
    Bcos { exponent: u32 },
}

/// An `in → out` projection: affine (optionally biased) or a B-cos MaxOut
/// pair.
#[derive(Debug, Clone)]
pub enum Projection {
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
        inputs: usize,
        outputs: usize,
    },
    Bcos {
        branch_a: ParamId,
        branch_b: ParamId,
        exponent: u32,
        inputs: usize,
        outputs: usize,
    },
}

impl Projection {
    /// Linear projections get a zero-initialized bias when `bias` is set;
    /// B-cos projections never have one.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kind: ProjectionKind,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            ProjectionKind::Linear => {
                let weight = store.add(
                    format!("{name}.weight"),
                    ParamRole::Weight,
                    Tensor::trunc_normal(vec![outputs, inputs], INIT_STD, rng),
                )?;
                let bias = if bias {
                    Some(store.add(format!("{name}.bias"), ParamRole::Bias, Tensor::zeros(vec![outputs]))?)
                } else {
                    None
                };
                Projection::Linear {
                    weight,
                    bias,
                    inputs,
                    outputs,
                }
            }
            ProjectionKind::Bcos { exponent } => {
                if exponent == 0 {
                    return Err(Error::Config("B-cos exponent must be at least 1".into()));
                }
                let branch_a = store.add(
                    format!("{name}.weight_a"),
                    ParamRole::Weight,
                    Tensor::trunc_normal(vec![outputs, inputs], INIT_STD, rng),
                )?;
                let branch_b = store.add(
                    format!("{name}.weight_b"),
                    ParamRole::Weight,
                    Tensor::trunc_normal(vec![outputs, inputs], INIT_STD, rng),
                )?;
                Projection::Bcos {
                    branch_a,
                    branch_b,
                    exponent,
                    inputs,
                    outputs,
                }
            }
        })
    }

    pub fn param_count(inputs: usize, outputs: usize, kind: ProjectionKind, bias: bool) -> usize {
        match kind {
            ProjectionKind::Linear => inputs * outputs + if bias { outputs } else { 0 },
            ProjectionKind::Bcos { .. } => 2 * inputs * outputs,
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            Projection::Linear { inputs, .. } | Projection::Bcos { inputs, .. } => *inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Projection::Linear { outputs, .. } | Projection::Bcos { outputs, .. } => *outputs,
        }
    }

    pub fn forward(&self, b: &Bound<'_>, x: Var) -> Result<Var> {
        let tape = b.tape();
        let shape = tape.shape(x)?;
        if shape.last() != Some(&self.inputs()) {
            return Err(Error::dim(format!(
                "projection expects trailing extent {}, got {shape:?}",
                self.inputs()
            )));
        }
        match *self {
            Projection::Linear { weight, bias, .. } => {
                let y = tape.matmul_t(x, b.var(weight))?;
                match bias {
                    Some(bias) => tape.add(y, b.var(bias)),
                    None => Ok(y),
                }
            }
            Projection::Bcos {
                branch_a,
                branch_b,
                exponent,
                ..
            } => bcos_layer_on_tape(tape, x, b.var(branch_a), b.var(branch_b), exponent),
        }
    }
}

/// Normalization over the feature axis with a learned scale and, when
/// present, a learned shift.
#[derive(Debug, Clone)]
pub struct Norm {
    scale: ParamId,
    shift: Option<ParamId>,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, shift: bool) -> Result<Self> {
        let scale = store.add(format!("{name}.scale"), ParamRole::NormScale, Tensor::ones(vec![dim]))?;
        let shift = if shift {
            Some(store.add(format!("{name}.shift"), ParamRole::NormShift, Tensor::zeros(vec![dim]))?)
        } else {
            None
        };
        Ok(Self { scale, shift })
    }

    pub fn param_count(dim: usize, shift: bool) -> usize {
        dim * if shift { 2 } else { 1 }
    }

    pub fn forward(&self, b: &Bound<'_>, x: Var) -> Result<Var> {
        b.tape()
            .layer_norm(x, Some(b.var(self.scale)), self.shift.map(|s| b.var(s)), NORM_EPS)
    }
}

/// Two projections, with a ReLU between them for the linear family.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Projection,
    fc2: Projection,
    relu: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        kind: ProjectionKind,
        rng: &mut R,
    ) -> Result<Self> {
        let linear = kind == ProjectionKind::Linear;
        Ok(Self {
            fc1: Projection::new(store, &format!("{name}.fc1"), dim, hidden, kind, linear, rng)?,
            fc2: Projection::new(store, &format!("{name}.fc2"), hidden, dim, kind, linear, rng)?,
            relu: linear,
        })
    }

    pub fn param_count(dim: usize, hidden: usize, kind: ProjectionKind) -> usize {
        let bias = kind == ProjectionKind::Linear;
        Projection::param_count(dim, hidden, kind, bias) + Projection::param_count(hidden, dim, kind, bias)
    }

    pub fn forward(&self, b: &Bound<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(b, x)?;
        let h = if self.relu { b.tape().relu(h)? } else { h };
        self.fc2.forward(b, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_param_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Projection::new(&mut store, "lin", 5, 3, ProjectionKind::Linear, true, &mut rng).unwrap();
        assert_eq!(store.scalar_count(), 5 * 3 + 3);
        let mut store = ParamStore::new();
        Projection::new(
            &mut store,
            "bc",
            5,
            3,
            ProjectionKind::Bcos { exponent: 2 },
            true,
            &mut rng,
        )
        .unwrap();
        assert_eq!(store.scalar_count(), 2 * 5 * 3);
        assert!(store.iter().all(|p| p.role == ParamRole::Weight));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", ParamRole::Bias, Tensor::zeros(vec![1])).unwrap();
        assert!(store.add("a", ParamRole::Bias, Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn grads_flow_back_into_the_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = Projection::new(&mut store, "p", 2, 2, ProjectionKind::Linear, true, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(Tensor::ones(vec![1, 2]));
        let y = p.forward(&bound, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        store.accumulate_grads(&bound).unwrap();
        let bias = store.find("p.bias").unwrap();
        assert_eq!(bias.value.grad().unwrap(), &[1.0, 1.0]);
        store.zero_grads();
        assert!(store.find("p.bias").unwrap().value.grad().is_none());
    }
}

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Grads, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is, which decides L2 treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Kernel,
    Bias,
    Conditioning,
}

/// Which sub-model owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Group {
    PixelCnn,
    Vae,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub kind: ParamKind,
    pub group: Group,
}

/// Named parameters with an EMA shadow of each.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Tensor<f32>>,
    pub ema: Vec<Tensor<f32>>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn count_group(&self, group: Group) -> usize {
        self.specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| s.group == group)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn by_name(&self) -> BTreeMap<&str, usize> {
        self.specs.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().chain(&self.ema).all(|t| t.all_finite())
    }

    /// `ema ← d·ema + (1−d)·param`.
    pub fn update_ema(&mut self, decay: f64) {
        let d = decay as f32;
        let e = 1.0 - d;
        for (s, v) in self.ema.iter_mut().zip(&self.values) {
            for (a, &b) in s.data.iter_mut().zip(&v.data) {
                *a = d * *a + e * b;
            }
        }
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|t| t.cast()).collect()
    }

    pub fn ema_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.ema.iter().map(|t| t.cast()).collect()
    }
}

/// Registers parameters and draws their initial values.
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<f32>>,
    rng: ChaCha8Rng,
    group: Group,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        ParamBuilder {
            specs: Vec::new(),
            values: Vec::new(),
            rng,
            group: Group::PixelCnn,
        }
    }

    pub fn set_group(&mut self, group: Group) {
        self.group = group;
    }

    fn push(&mut self, name: String, shape: [usize; 4], kind: ParamKind, value: Tensor<f32>) -> ParamId {
        assert!(
            !self.specs.iter().any(|s| s.name == name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape,
            kind,
            group: self.group,
        });
        self.values.push(value);
        ParamId(self.specs.len() - 1)
    }

    /// Kernel of shape `[a, b, kh, kw]` drawn from `N(0, (scale²)/fan_in)`,
    /// where `fan_in = b·kh·kw` (or `a·kh·kw` when `fan_in_first`).
    pub fn kernel(&mut self, name: impl Into<String>, shape: [usize; 4], scale: f64, fan_in_first: bool) -> ParamId {
        let fan_in = if fan_in_first {
            shape[0] * shape[2] * shape[3]
        } else {
            shape[1] * shape[2] * shape[3]
        };
        let std = scale / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                (v * std) as f32
            })
            .collect();
        self.push(name.into(), shape, ParamKind::Kernel, Tensor::from_vec(shape, data))
    }

    pub fn bias(&mut self, name: impl Into<String>, channels: usize) -> ParamId {
        let shape = [channels, 1, 1, 1];
        self.push(name.into(), shape, ParamKind::Bias, Tensor::zeros(shape))
    }

    /// Zero-initialized conditioning projection.
    pub fn conditioning(&mut self, name: impl Into<String>, shape: [usize; 4]) -> ParamId {
        self.push(name.into(), shape, ParamKind::Conditioning, Tensor::zeros(shape))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            specs: self.specs,
            ema: self.values.clone(),
            values: self.values,
        }
    }
}

/// Dropout configuration for a training-mode forward pass.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

/// One forward pass: the tape plus lazily bound parameter leaves.
pub struct Ctx<'p, T: Scalar> {
    pub g: Graph<T>,
    params: &'p [Tensor<T>],
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
    dropout: Option<Dropout>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// Evaluation pass: nothing requires gradients, no dropout.
    pub fn eval(params: &'p [Tensor<T>]) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable: vec![false; params.len()],
            dropout: None,
        }
    }

    /// Training pass; `trainable[i]` selects parameters that receive gradients.
    pub fn train(params: &'p [Tensor<T>], trainable: Vec<bool>, dropout: Option<Dropout>) -> Self {
        assert_eq!(trainable.len(), params.len(), "trainable mask size");
        Ctx {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
            dropout,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params[id.0].clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some(d) = self.dropout.as_mut() else {
            return x;
        };
        if d.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - d.rate;
        let scale = T::f(1.0 / keep);
        let n = self.g.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if d.rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        self.g.dropout(x, mask)
    }

    /// Gradient for each parameter that was bound and trainable.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

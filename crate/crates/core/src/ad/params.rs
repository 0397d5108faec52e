use rand::Rng;

use super::error::AdError;
use super::scalar::Scalar;
use super::tape::{BatchStats, Gradients, Tape, Var};
use super::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Trainable parameters get gradients and optimizer state; buffers
    /// (batchnorm running statistics) do not.
    pub trainable: bool,
}

/// Owns every parameter and buffer of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<NamedTensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            value,
            trainable,
        });
        self.grads.push(None);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    /// Adds tape gradients onto the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            match &mut self.grads[id.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Replace all values with those of `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<(), AdError> {
        if self.entries.len() != other.entries.len() {
            return Err(AdError::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(AdError::Config(format!(
                    "parameter '{}' {:?} does not match '{}' {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            grads: vec![None; self.entries.len()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-uniform, for layers feeding a ReLU.
    He,
    /// Glorot-uniform.
    Glorot,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

/// Fully-connected layer with optional batchnorm and ReLU.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNormParams>,
    pub relu: bool,
    pub inp: usize,
    pub out: usize,
}

/// Running-statistic update deferred until after a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

impl BnUpdate {
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let m = self.momentum;
        for (r, b) in store
            .get_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.stats.mean)
        {
            *r = T::of((1.0 - m) * r.f64() + m * b);
        }
        for (r, b) in store
            .get_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.stats.var)
        {
            *r = T::of((1.0 - m) * r.f64() + m * b);
        }
    }
}

impl LayerParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        batchnorm: bool,
        relu: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let limit = match init {
            Init::He => (6.0 / inp as f64).sqrt(),
            Init::Glorot => (6.0 / (inp + out) as f64).sqrt(),
        };
        let w: Vec<T> = (0..inp * out)
            .map(|_| T::of(rng.random_range(-limit..limit)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![out, inp], w).expect("shape"),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true);
        let bn = batchnorm.then(|| BatchNormParams {
            gamma: store.add(
                format!("{name}.bn.weight"),
                Tensor::filled(&[out], T::one()),
                true,
            ),
            beta: store.add(format!("{name}.bn.bias"), Tensor::zeros(&[out]), true),
            running_mean: store.add(
                format!("{name}.bn.running_mean"),
                Tensor::zeros(&[out]),
                false,
            ),
            running_var: store.add(
                format!("{name}.bn.running_var"),
                Tensor::filled(&[out], T::one()),
                false,
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        });
        Self {
            weight,
            bias,
            bn,
            relu,
            inp,
            out,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.inp * self.out + self.out + if self.bn.is_some() { 2 * self.out } else { 0 }
    }

    /// `linear → batchnorm → relu` over the last axis of `x`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, AdError> {
        let w = tape.param(self.weight, store.get(self.weight));
        let b = tape.param(self.bias, store.get(self.bias));
        let mut h = tape.linear(x, w, b)?;
        if let Some(bn) = &self.bn {
            let gamma = tape.param(bn.gamma, store.get(bn.gamma));
            let beta = tape.param(bn.beta, store.get(bn.beta));
            h = match mode {
                Mode::Train => {
                    let (y, stats) = tape.batchnorm_train(h, gamma, beta, bn.eps)?;
                    updates.push(BnUpdate {
                        running_mean: bn.running_mean,
                        running_var: bn.running_var,
                        momentum: bn.momentum,
                        stats,
                    });
                    y
                }
                Mode::Eval => tape.batchnorm_eval(
                    h,
                    gamma,
                    beta,
                    store.get(bn.running_mean).data(),
                    store.get(bn.running_var).data(),
                    bn.eps,
                )?,
            };
        }
        if self.relu {
            h = tape.relu(h)?;
        }
        Ok(h)
    }
}

/// Stack of [`LayerParams`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<LayerParams>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`. Every layer gets batchnorm + ReLU unless
    /// `plain_last` is set, in which case the final layer is a bare affine map.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        plain_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = !(plain_last && i + 1 == n);
                let init = if act { Init::He } else { Init::Glorot };
                LayerParams::new(
                    store,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    act,
                    act,
                    init,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerParams::parameter_count).sum()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, AdError> {
        for layer in &self.layers {
            x = layer.forward(tape, store, x, mode, updates)?;
        }
        Ok(x)
    }
}

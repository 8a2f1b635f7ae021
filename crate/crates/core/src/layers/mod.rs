//! Named parameters, layer wrappers and the training utilities around them.
//!
//! A model first declares its parameters on a [`Registry`] (name, shape and
//! initializer). [`init_parameters`] turns that declaration into a
//! [`ParamSet`]; a [`Forward`] context then binds parameters onto a tape as
//! leaves when a layer first touches them.

mod init;
mod optim;

pub use init::init_parameters;
pub use optim::{adam_step, AdamConfig, AdamState, CosineWarmRestarts};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, NormMode, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Initializer attached to a declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    /// Uniform in `±sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Declarative list of a model's parameters and non-trainable buffers.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a trainable parameter. Names must be unique.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(
            !self.params.iter().chain(&self.buffers).any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(ParamSpec { name, shape: shape.to_vec(), init });
        ParamId(self.params.len() - 1)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> BufferId {
        let name = name.into();
        assert!(
            !self.params.iter().chain(&self.buffers).any(|p| p.name == name),
            "duplicate buffer name {name}"
        );
        self.buffers.push(ParamSpec { name, shape: shape.to_vec(), init });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn buffers(&self) -> &[ParamSpec] {
        &self.buffers
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

/// A named trainable tensor and its most recent gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Materialized parameters and buffers, in declaration order.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub(crate) fn from_parts(params: Vec<Parameter<T>>, buffers: Vec<(String, Tensor<T>)>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ParamSet { params, buffers, index }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.buffers
    }

    /// Stores gradients from a backward pass onto the bound parameters.
    pub fn store_grads(&mut self, bound: &[(ParamId, Var)], grads: &mut crate::tensor::Gradients<T>) {
        for &(id, var) in bound {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(self.params[id.0].value.shape()));
            self.params[id.0].grad = Some(g);
        }
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        for u in updates {
            let m = u.momentum;
            let keep = T::one() - m;
            let mean = self.buffers[u.running_mean.0].1.data_mut();
            for (r, &b) in mean.iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            let var = self.buffers[u.running_var.0].1.data_mut();
            for (r, &b) in var.iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet::from_parts(
            self.params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: None })
                .collect(),
            self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        )
    }
}

/// A pending running-statistics update from a training-mode batch norm.
pub struct BnUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

/// Whether layers behave as in training (batch statistics, dropout) or
/// evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-pass state shared by all layers: the tape, the parameter bindings,
/// the dropout RNG and pending batch-norm updates.
pub struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamSet<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    track: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamSet<T>, mode: Mode) -> Self {
        Forward {
            tape,
            params,
            bound: vec![None; params.len()],
            mode,
            rng: None,
            track: mode == Mode::Train,
            bn_updates: Vec::new(),
        }
    }

    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Whether parameter leaves request gradients.
    pub fn with_tracking(mut self, track: bool) -> Self {
        self.track = track;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    /// Uses `var` for parameter `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).value.clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.params.buffer(id)
    }

    /// Every parameter that was bound during this pass.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng
            .as_mut()
            .ok_or_else(|| Error::config("training-mode dropout needs an RNG on the forward context"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Declares a square `kernel` convolution with He-normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        reg: &mut Registry,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = reg.param(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], Init::HeNormal { fan_in });
        let bias = bias.then(|| reg.param(format!("{name}.bias"), &[c_out], Init::Const(0.0)));
        Conv2d { weight, bias, stride, padding }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn register(reg: &mut Registry, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: reg.param(format!("{name}.gamma"), &[channels], Init::Const(1.0)),
            beta: reg.param(format!("{name}.beta"), &[channels], Init::Const(0.0)),
            running_mean: reg.buffer(format!("{name}.running_mean"), &[channels], Init::Const(0.0)),
            running_var: reg.buffer(format!("{name}.running_var"), &[channels], Init::Const(1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::from_f64_lossy(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, NormMode::Train { eps })?;
                if let Some(stats) = stats {
                    ctx.bn_updates.push(BnUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        momentum: T::from_f64_lossy(self.momentum),
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.params.buffer(self.running_mean).data();
                let var = ctx.params.buffer(self.running_var).data();
                let (y, _) = ctx.tape.batch_norm(x, gamma, beta, NormMode::Eval { mean, var, eps })?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Declares an `f_in → f_out` affine map with uniform `±sqrt(1/f_in)`
    /// weights and zero bias.
    pub fn register(reg: &mut Registry, name: &str, f_in: usize, f_out: usize) -> Self {
        Linear {
            weight: reg.param(format!("{name}.weight"), &[f_out, f_in], Init::Uniform { fan_in: f_in }),
            bias: reg.param(format!("{name}.bias"), &[f_out], Init::Const(0.0)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, b)
    }
}

/// Inverted dropout; identity outside training mode.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn forward<T: Real>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        if ctx.mode != Mode::Train || self.rate == 0.0 {
            return Ok(x);
        }
        let shape = ctx.tape.shape(x).to_vec();
        let mask = dropout_mask::<T>(&shape, self.rate, ctx.rng()?)?;
        let m = ctx.tape.constant(mask);
        ctx.tape.mul(x, m)
    }
}

fn dropout_mask<T: Real>(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(shape, |_| if rng.random::<f64>() < rate { T::zero() } else { keep }))
}

/// Standalone inverted dropout on a tape.
pub fn dropout<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask::<T>(tape.shape(x), rate, rng)?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}
